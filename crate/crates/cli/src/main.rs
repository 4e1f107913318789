use std::error::Error;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use atal_core::dataset::{Dataset, Split};
use atal_core::engine::experiments::{ablate, budget_sweep, mean_std, transfer_labels, RunSummary};
use atal_core::engine::{load_data, train_fully_supervised, Engine, ExperimentConfig, StepOutcome, StrategyKind};
use atal_core::gridnet::Architecture;
use clap::{Args, Parser, Subcommand};
use log::info;

type CliResult<T = ()> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "atal", version, about = "Point-supervised saliency segmentation with active point selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set al.max_budget=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got '{kv}'"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test dataset as PNM files plus manifests.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on every pixel label and report test metrics.
    TrainFull {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Save the trajectory snapshots here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run (or resume) one active learning experiment in a directory.
    AlRun {
        #[arg(long, default_value = "atal")]
        strategy: StrategyKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Every strategy against every configured seed.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Comma separated; all strategies when omitted.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<StrategyKind>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Max-F at each configured budget, averaged over seeds.
    BudgetSweep {
        #[arg(long, default_value = "atal")]
        strategy: StrategyKind,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Summarize an experiment; optionally retrain its labels on another architecture.
    Evaluate {
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        transfer_arch: Option<String>,
    },
    /// Serve an experiment to human annotators over HTTP.
    Serve {
        #[arg(long)]
        experiment: Option<PathBuf>,
        /// Overrides the port of the bind address.
        #[arg(long)]
        port: Option<u16>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenerateData { out, seed, config } => generate_data(&out, seed, &config.resolve()?),
        Command::TrainFull { seed, out, config } => {
            let cfg = config.resolve()?;
            let (train, test) = load_data(&cfg, seed)?;
            let arch = Architecture::by_id(&cfg.architecture)?;
            let (traj, eval) = train_fully_supervised(&cfg, &arch, &train, &test, seed)?;
            if let Some(dir) = out {
                traj.save(&dir)?;
            }
            println!("max_f\tavg_f\tmae\n{:.4}\t{:.4}\t{:.4}", eval.max_f, eval.avg_f, eval.mae);
            Ok(())
        }
        Command::AlRun {
            strategy,
            seed,
            out,
            config,
        } => al_run(&out, strategy, seed, &config),
        Command::Ablate { out, strategies, config } => {
            let cfg = config.resolve()?;
            let strategies = if strategies.is_empty() {
                StrategyKind::ALL.to_vec()
            } else {
                strategies
            };
            let (table, _) = ablate(&cfg, &strategies, &cfg.seeds, Some(&out))?;
            println!("strategy\tmax_f_mean\tmax_f_std");
            for s in strategies {
                let (m, sd) = mean_std(&table.max_f(s));
                println!("{s}\t{m:.4}\t{sd:.4}");
            }
            Ok(())
        }
        Command::BudgetSweep { strategy, out, config } => {
            let cfg = config.resolve()?;
            let curve = budget_sweep(&cfg, strategy, &cfg.seeds, &cfg.budgets, Some(&out))?;
            println!("budget\tmax_f_mean");
            for (b, m) in curve.budgets.iter().zip(curve.mean()) {
                println!("{b}\t{m:.4}");
            }
            Ok(())
        }
        Command::Evaluate {
            experiment,
            transfer_arch,
        } => evaluate(&experiment, transfer_arch.as_deref()),
        Command::Serve { experiment, port } => {
            let mut addr: SocketAddr = atal_service::bind_addr()?;
            if let Some(p) = port {
                addr.set_port(p);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(atal_service::serve(addr, experiment))?;
            Ok(())
        }
    }
}

fn generate_data(out: &Path, seed: u64, cfg: &ExperimentConfig) -> CliResult {
    let d = &cfg.data;
    for (split, count) in [(Split::Train, d.train_count), (Split::Test, d.test_count)] {
        let ds = Dataset::synthetic(split, seed, count, d.size, &d.generator)?;
        ds.write(out, Some(seed), Some(&d.generator))?;
        info!("{} {split:?} images in {}", ds.len(), out.display());
    }
    Ok(())
}

fn al_run(out: &Path, strategy: StrategyKind, seed: u64, config: &ConfigArgs) -> CliResult {
    let mut engine = if out.join("state.json").exists() {
        info!("resuming {}", out.display());
        Engine::open(out)?
    } else {
        Engine::create(out, config.resolve()?, strategy, seed)?
    };
    match engine.advance()? {
        StepOutcome::Suspended(n) => println!("waiting for {n} answers; serve with `atal serve --experiment {}`", out.display()),
        StepOutcome::Finished => {
            let s = RunSummary::of(engine.state())?;
            let ratio = s.full_sup_ratio.map_or("-".to_string(), |r| format!("{r:.4}"));
            println!("strategy\tseed\tbudget\tmax_f\tavg_f\tmae\tfull_sup_ratio");
            println!(
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{ratio}",
                s.strategy, s.seed, s.budget, s.max_f, s.avg_f, s.mae
            );
        }
        StepOutcome::Progressed => unreachable!("advance stops only when waiting or finished"),
    }
    Ok(())
}

fn evaluate(dir: &Path, transfer_arch: Option<&str>) -> CliResult {
    let state = atal_core::engine::ExperimentState::load(dir)?;
    println!("round\tbudget\tmax_f\tavg_f\tmae");
    for m in state.metric_history.iter().chain(state.final_metrics.iter()) {
        println!("{}\t{}\t{:.4}\t{:.4}\t{:.4}", m.round, m.budget, m.max_f, m.avg_f, m.mae);
    }
    if let Some(id) = transfer_arch {
        let arch = Architecture::by_id(id)?;
        let t = transfer_labels(&state.config, &state.labels, &arch, state.seed)?;
        println!(
            "transfer to {}: max_f {:.4}, fully supervised {:.4}, ratio {:.4}",
            t.architecture, t.max_f, t.full_sup_max_f, t.ratio
        );
    }
    Ok(())
}

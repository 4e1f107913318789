//! Whole runs and the tables built from several of them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    load_data, train_fully_supervised, train_on_labels, evaluate_models, Engine, ExperimentConfig, ExperimentState,
    OracleMode, StepOutcome, StrategyKind,
};
use crate::error::{Error, Result};
use crate::gridnet::{Architecture, GridNet};
use crate::labels::SparseLabels;
use crate::metrics::Evaluation;
use crate::rng::purpose_seed;

/// Runs one strategy and seed to the end with the ground-truth oracle.
/// `dir` keeps the experiment on disk; `reference` skips the fully
/// supervised fit when its max-F is already known.
pub fn run_experiment(
    config: &ExperimentConfig,
    strategy: StrategyKind,
    seed: u64,
    dir: Option<&Path>,
    reference: Option<f64>,
) -> Result<ExperimentState> {
    let mut cfg = config.clone();
    cfg.oracle = OracleMode::GroundTruth;
    let mut engine = match dir {
        Some(d) => Engine::create(d, cfg, strategy, seed)?,
        None => Engine::in_memory(cfg, strategy, seed)?,
    };
    if let Some(f) = reference {
        engine.set_full_supervision_reference(f);
    }
    match engine.advance()? {
        StepOutcome::Finished => Ok(engine.state().clone()),
        other => Err(Error::InvalidInput(format!("ground-truth run stopped early: {other:?}"))),
    }
}

/// Fully supervised max-F for a seed's data.
pub fn reference_max_f(config: &ExperimentConfig, seed: u64) -> Result<Evaluation> {
    let (train, test) = load_data(config, seed)?;
    let arch = Architecture::by_id(&config.architecture)?;
    Ok(train_fully_supervised(config, &arch, &train, &test, seed)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub budget: usize,
    pub max_f: f64,
    pub avg_f: f64,
    pub mae: f64,
    pub full_sup_ratio: Option<f64>,
}

impl RunSummary {
    pub fn of(state: &ExperimentState) -> Result<Self> {
        let m = state
            .final_metrics
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("experiment has not finished".into()))?;
        Ok(Self {
            strategy: state.strategy,
            seed: state.seed,
            budget: m.budget,
            max_f: m.max_f,
            avg_f: m.avg_f,
            mae: m.mae,
            full_sup_ratio: m.full_sup_ratio,
        })
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<RunSummary>,
}

impl AblationTable {
    pub fn max_f(&self, strategy: StrategyKind) -> Vec<f64> {
        self.runs.iter().filter(|r| r.strategy == strategy).map(|r| r.max_f).collect()
    }

    /// Per-run rows followed by `mean` and `std` rows for each strategy.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("strategy\tseed\tbudget\tmax_f\tavg_f\tmae\tfull_sup_ratio\n");
        let mut groups: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.strategy,
                r.seed,
                r.budget,
                r.max_f,
                r.avg_f,
                r.mae,
                r.full_sup_ratio.map_or("-".into(), |x| format!("{x:.6}"))
            );
            groups.entry(r.strategy.to_string()).or_default().push(r);
        }
        for (name, rows) in groups {
            let col = |f: fn(&RunSummary) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (mf, sf) = col(|r| r.max_f);
            let (ma, sa) = col(|r| r.avg_f);
            let (mm, sm) = col(|r| r.mae);
            let ratios: Vec<f64> = rows.iter().filter_map(|r| r.full_sup_ratio).collect();
            let (mr, sr) = mean_std(&ratios);
            let budget = rows[0].budget;
            let _ = writeln!(s, "{name}\tmean\t{budget}\t{mf:.6}\t{ma:.6}\t{mm:.6}\t{mr:.6}");
            let _ = writeln!(s, "{name}\tstd\t{budget}\t{sf:.6}\t{sa:.6}\t{sm:.6}\t{sr:.6}");
        }
        s
    }
}

/// Every strategy against every seed. Runs go to `out/<strategy>/seed_<s>`
/// when `out` is given, and the table to `out/ablation.tsv`.
pub fn ablate(
    config: &ExperimentConfig,
    strategies: &[StrategyKind],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<(AblationTable, Vec<ExperimentState>)> {
    let mut runs = Vec::new();
    let mut states = Vec::new();
    for &seed in seeds {
        let reference = if config.full_supervision {
            Some(reference_max_f(config, seed)?.max_f)
        } else {
            None
        };
        for &strategy in strategies {
            let dir = out.map(|o| o.join(strategy.name()).join(format!("seed_{seed}")));
            let state = run_experiment(config, strategy, seed, dir.as_deref(), reference)?;
            runs.push(RunSummary::of(&state)?);
            states.push(state);
        }
    }
    let table = AblationTable { runs };
    if let Some(o) = out {
        let path = o.join("ablation.tsv");
        std::fs::write(&path, table.to_tsv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok((table, states))
}

/// Max-F by budget for each seed of a run that went up to the largest budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub budgets: Vec<usize>,
    /// `per_seed[s][b]` is seed `s`'s max-F at `budgets[b]`.
    pub per_seed: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
}

impl BudgetCurve {
    pub fn mean(&self) -> Vec<f64> {
        (0..self.budgets.len())
            .map(|b| mean_std(&self.per_seed.iter().map(|s| s[b]).collect::<Vec<_>>()).0)
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("budget\tmean_max_f\tstd_max_f");
        for seed in &self.seeds {
            let _ = write!(s, "\tseed_{seed}");
        }
        s.push('\n');
        for (b, &budget) in self.budgets.iter().enumerate() {
            let col: Vec<f64> = self.per_seed.iter().map(|v| v[b]).collect();
            let (m, sd) = mean_std(&col);
            let _ = write!(s, "{budget}\t{m:.6}\t{sd:.6}");
            for v in col {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Max-F of a finished run at a given per-image budget. The model trained
/// at each budget is the one a shorter run would end with.
pub fn max_f_at_budget(state: &ExperimentState, budget: usize) -> Option<f64> {
    state
        .metric_history
        .iter()
        .chain(state.final_metrics.iter())
        .find(|m| m.budget == budget)
        .map(|m| m.max_f)
}

/// One run per seed up to the largest budget, read off at each budget.
pub fn budget_sweep(
    config: &ExperimentConfig,
    strategy: StrategyKind,
    seeds: &[u64],
    budgets: &[usize],
    out: Option<&Path>,
) -> Result<BudgetCurve> {
    let max = *budgets
        .iter()
        .max()
        .ok_or_else(|| Error::Config("budget sweep needs at least one budget".into()))?;
    let mut cfg = config.clone();
    cfg.max_budget = max;
    cfg.full_supervision = false;
    cfg.validate()?;
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let dir = out.map(|o| o.join(strategy.name()).join(format!("seed_{seed}")));
        let state = run_experiment(&cfg, strategy, seed, dir.as_deref(), None)?;
        let row = budgets
            .iter()
            .map(|&b| {
                max_f_at_budget(&state, b)
                    .ok_or_else(|| Error::Config(format!("budget {b} is never reached with the configured steps")))
            })
            .collect::<Result<Vec<_>>>()?;
        per_seed.push(row);
    }
    let curve = BudgetCurve {
        budgets: budgets.to_vec(),
        per_seed,
        seeds: seeds.to_vec(),
    };
    if let Some(o) = out {
        let path = o.join("budget_sweep.tsv");
        std::fs::write(&path, curve.to_tsv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub architecture: String,
    pub max_f: f64,
    pub full_sup_max_f: f64,
    pub ratio: f64,
}

/// Trains `arch` on labels collected by some other run and compares it
/// with `arch`'s own fully supervised fit on the same data.
pub fn transfer_labels(
    config: &ExperimentConfig,
    labels: &[SparseLabels],
    arch: &Architecture,
    seed: u64,
) -> Result<TransferResult> {
    let (train, test) = load_data(config, seed)?;
    let init = GridNet::new(arch, train.channels(), purpose_seed(seed, "transfer_init", 0));
    let traj = train_on_labels(config, arch, &train, labels, init, purpose_seed(seed, "transfer_shuffle", 0))?;
    let eval = evaluate_models(&traj.snapshots, &test)?;
    let (_, full) = train_fully_supervised(config, arch, &train, &test, seed)?;
    Ok(TransferResult {
        architecture: arch.id.clone(),
        max_f: eval.max_f,
        full_sup_max_f: full.max_f,
        ratio: eval.max_f / full.max_f,
    })
}

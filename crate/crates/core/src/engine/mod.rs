//! The active-learning loop: train, evaluate, select, query, propagate.
//!
//! An [`Engine`] owns one experiment. With the ground-truth oracle it runs
//! to the end on its own; with an external oracle it stops after issuing
//! each batch of queries and continues once every query has an answer.

pub mod config;
pub mod experiments;
pub mod state;
pub mod strategy;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{ExperimentConfig, OracleMode, StrategyKind};
pub use state::{DirLock, ExperimentState, Phase, RoundMetrics};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::gridnet::{Architecture, GridNet};
use crate::labels::{Class, LabelSource, SparseLabels};
use crate::metrics::{evaluate, Evaluation};
use crate::oracle::{
    append_jsonl, gt_answer, initial_points, read_jsonl, AnswerSource, LabelAnswer, LabelQuery, QueryStatus,
};
use crate::rng::purpose_seed;
use crate::superpixel::{propagate, segment, SuperpixelPartition};
use crate::trajectory::{ensemble_predict, homogenization, train, train_den, Example, Schedule, TrainOptions, Trajectory};
use state::{ANSWERS_FILE, QUERIES_FILE};
use strategy::{random_points, select_with_models, ImageSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// Something changed; another step may follow.
    Progressed,
    /// Waiting for this many answers.
    Suspended(usize),
    Finished,
}

/// Train and test splits for a config: loaded from `data.dir` when set,
/// generated otherwise.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match &cfg.data.dir {
        Some(dir) => Ok((Dataset::load(&dir.join("train.tsv"))?, Dataset::load(&dir.join("test.tsv"))?)),
        None => {
            let s = cfg.data.seed.unwrap_or(seed);
            let d = &cfg.data;
            Ok((
                Dataset::synthetic(Split::Train, s, d.train_count, d.size, &d.generator)?,
                Dataset::synthetic(Split::Test, s, d.test_count, d.size, &d.generator)?,
            ))
        }
    }
}

pub fn evaluate_models(models: &[GridNet], test: &Dataset) -> Result<Evaluation> {
    let preds = test
        .items
        .par_iter()
        .map(|it| ensemble_predict(models, &it.image))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<_> = test.items.iter().map(|it| it.mask.clone()).collect();
    evaluate(&preds, &masks)
}

/// Trains a trajectory of `arch` on the given labels with the configured schedule.
pub fn train_on_labels(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    data: &Dataset,
    labels: &[SparseLabels],
    init: GridNet,
    shuffle_seed: u64,
) -> Result<Trajectory> {
    let examples = data
        .items
        .iter()
        .zip(labels)
        .map(|(it, l)| Example::new(&it.image, l))
        .collect::<Result<Vec<_>>>()?;
    if init.architecture_id() != arch.id {
        return Err(Error::InvalidInput(format!(
            "initial model is {}, expected {}",
            init.architecture_id(),
            arch.id
        )));
    }
    let opts = TrainOptions {
        shuffle_seed,
        ..cfg.train
    };
    train(init, &examples, &Schedule::Cyclic(cfg.ccls), &opts)
}

/// Every training pixel labeled; the reference the sparse runs are compared to.
pub fn train_fully_supervised(
    cfg: &ExperimentConfig,
    arch: &Architecture,
    train_set: &Dataset,
    test_set: &Dataset,
    seed: u64,
) -> Result<(Trajectory, Evaluation)> {
    let labels = train_set
        .items
        .iter()
        .map(|it| SparseLabels::dense(&it.id, it.mask.height(), it.mask.width(), it.mask.data()))
        .collect::<Result<Vec<_>>>()?;
    let init = GridNet::new(arch, train_set.channels(), purpose_seed(seed, "full_init", 0));
    let traj = train_on_labels(cfg, arch, train_set, &labels, init, purpose_seed(seed, "full_shuffle", 0))?;
    let eval = evaluate_models(&traj.snapshots, test_set)?;
    Ok((traj, eval))
}

pub struct Engine {
    state: ExperimentState,
    dir: Option<PathBuf>,
    train: Dataset,
    test: Dataset,
    arch: Architecture,
    partitions: Vec<SuperpixelPartition>,
    index_of: HashMap<String, usize>,
    last_model: Option<GridNet>,
    _lock: Option<DirLock>,
}

impl Engine {
    /// An experiment that lives only in memory.
    pub fn in_memory(config: ExperimentConfig, strategy: StrategyKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_data(&config, seed)?;
        let labels = train
            .items
            .iter()
            .map(|it| SparseLabels::new(&it.id, it.image.height(), it.image.width()))
            .collect();
        let state = ExperimentState::new(config, strategy, seed, labels);
        Self::assemble(state, train, test, None, None)
    }

    /// Starts a new experiment in `dir`, which must not hold one already.
    pub fn create(dir: &Path, config: ExperimentConfig, strategy: StrategyKind, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = DirLock::acquire(dir)?;
        if dir.join(state::STATE_FILE).exists() {
            return Err(Error::InvalidInput(format!("{} already holds an experiment", dir.display())));
        }
        let mut engine = Self::in_memory(config, strategy, seed)?;
        engine.dir = Some(dir.to_path_buf());
        engine._lock = Some(lock);
        std::fs::write(dir.join("config.txt"), engine.state.config.to_text()).map_err(|e| Error::io(dir, e))?;
        engine.persist()?;
        Ok(engine)
    }

    /// Reopens an experiment, folding in answers that reached
    /// `answers.jsonl` after the last state save.
    pub fn open(dir: &Path) -> Result<Self> {
        let lock = DirLock::acquire(dir)?;
        let state = ExperimentState::load(dir)?;
        let (train, test) = load_data(&state.config, state.seed)?;
        let mut engine = Self::assemble(state, train, test, Some(dir.to_path_buf()), Some(lock))?;
        let logged: Vec<LabelAnswer> = read_jsonl(&dir.join(ANSWERS_FILE))?;
        for a in logged {
            match engine.state.queries.iter().find(|q| q.query_id == a.query_id) {
                Some(q) if q.status == QueryStatus::Pending => engine.record(a)?,
                Some(_) => {}
                None => warn!("answer for unknown query {} ignored", a.query_id),
            }
        }
        if engine.state.config.fine_tune {
            if let Some(r) = engine.state.trajectory_refs.last() {
                engine.last_model = Some(Trajectory::load(&dir.join(r))?.last().clone());
            }
        }
        Ok(engine)
    }

    fn assemble(
        state: ExperimentState,
        train: Dataset,
        test: Dataset,
        dir: Option<PathBuf>,
        lock: Option<DirLock>,
    ) -> Result<Self> {
        if train.len() != state.labels.len() {
            return Err(Error::shape(format!("{} training images", state.labels.len()), train.len()));
        }
        let arch = Architecture::by_id(&state.config.architecture)?;
        let sp = state.config.superpixel;
        let partitions = train
            .items
            .par_iter()
            .enumerate()
            .map(|(i, it)| segment(&it.image, &sp, purpose_seed(state.seed, "superpixel", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let index_of = train.items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        Ok(Self {
            state,
            dir,
            train,
            test,
            arch,
            partitions,
            index_of,
            last_model: None,
            _lock: lock,
        })
    }

    pub fn state(&self) -> &ExperimentState {
        &self.state
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn partitions(&self) -> &[SuperpixelPartition] {
        &self.partitions
    }

    pub fn image(&self, image_id: &str) -> Option<&Image> {
        self.index_of.get(image_id).map(|&i| &self.train.items[i].image)
    }

    pub fn partition(&self, image_id: &str) -> Option<&SuperpixelPartition> {
        self.index_of.get(image_id).map(|&i| &self.partitions[i])
    }

    pub fn pending(&self) -> Vec<&LabelQuery> {
        self.state.pending().collect()
    }

    /// Supplies the fully supervised max-F so it is not retrained here.
    pub fn set_full_supervision_reference(&mut self, max_f: f64) {
        self.state.full_sup_max_f = Some(max_f);
    }

    /// Steps until the engine waits for answers or the budget is used up.
    pub fn advance(&mut self) -> Result<StepOutcome> {
        loop {
            match self.step()? {
                StepOutcome::Progressed => continue,
                other => return Ok(other),
            }
        }
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        match self.state.phase {
            Phase::Finished => return Ok(StepOutcome::Finished),
            Phase::AwaitingAnswers => {
                let pending = self.state.pending_count();
                if pending > 0 {
                    return Ok(StepOutcome::Suspended(pending));
                }
                self.apply_batch()?;
            }
            Phase::Fresh => {
                if self.state.config.full_supervision && self.state.full_sup_max_f.is_none() {
                    let (_, eval) =
                        train_fully_supervised(&self.state.config, &self.arch, &self.train, &self.test, self.state.seed)?;
                    info!("fully supervised reference max-F {:.4}", eval.max_f);
                    self.state.full_sup_max_f = Some(eval.max_f);
                }
                self.issue_seed_queries()?;
            }
            Phase::Ready => {
                if self.state.remaining_budget() > 0 {
                    self.run_round()?;
                } else {
                    self.finalize()?;
                }
            }
        }
        self.persist()?;
        Ok(StepOutcome::Progressed)
    }

    /// Records an answer to a pending query. It is on disk before this returns.
    /// Returns the number of queries still pending.
    pub fn submit(&mut self, query_id: u64, class: Class, source: AnswerSource) -> Result<usize> {
        let q = self
            .state
            .queries
            .iter()
            .find(|q| q.query_id == query_id)
            .ok_or(Error::UnknownQuery(query_id))?;
        if q.status == QueryStatus::Answered {
            return Err(Error::AlreadyAnswered(query_id));
        }
        let answer = LabelAnswer { query_id, class, source };
        if let Some(dir) = &self.dir {
            append_jsonl(&dir.join(ANSWERS_FILE), std::slice::from_ref(&answer))?;
        }
        self.record(answer)?;
        Ok(self.state.pending_count())
    }

    fn record(&mut self, answer: LabelAnswer) -> Result<()> {
        let q = self
            .state
            .queries
            .iter_mut()
            .find(|q| q.query_id == answer.query_id)
            .ok_or(Error::UnknownQuery(answer.query_id))?;
        if q.status == QueryStatus::Answered {
            return Err(Error::AlreadyAnswered(answer.query_id));
        }
        q.status = QueryStatus::Answered;
        let pos = self.state.answers.partition_point(|a| a.query_id < answer.query_id);
        self.state.answers.insert(pos, answer);
        Ok(())
    }

    fn issue(&mut self, round: usize, picks: Vec<(usize, strategy::Pick)>) -> Result<()> {
        let mut batch = Vec::with_capacity(picks.len());
        for (i, p) in picks {
            let query = LabelQuery {
                query_id: self.state.next_query_id,
                image_id: self.train.items[i].id.clone(),
                row: p.row,
                col: p.col,
                round,
                superpixel_id: Some(self.partitions[i].label(p.row, p.col)),
                status: QueryStatus::Pending,
                score: p.score,
                phi: p.phi,
            };
            self.state.next_query_id += 1;
            batch.push(query);
        }
        if let Some(dir) = &self.dir {
            append_jsonl(&dir.join(QUERIES_FILE), &batch)?;
        }
        self.state.queries.extend(batch.iter().cloned());
        self.state.phase = Phase::AwaitingAnswers;
        if self.state.config.oracle == OracleMode::GroundTruth {
            for q in &batch {
                let mask = &self.train.items[self.index_of[&q.image_id]].mask;
                let answer = gt_answer(mask, q)?;
                if let Some(dir) = &self.dir {
                    append_jsonl(&dir.join(ANSWERS_FILE), std::slice::from_ref(&answer))?;
                }
                self.record(answer)?;
            }
        }
        Ok(())
    }

    fn issue_seed_queries(&mut self) -> Result<()> {
        let n = self.state.config.initial_points;
        let mut picks = Vec::new();
        for (i, it) in self.train.items.iter().enumerate() {
            for (row, col) in initial_points(&it.id, self.state.seed, n, it.image.height(), it.image.width())? {
                picks.push((
                    i,
                    strategy::Pick {
                        row,
                        col,
                        score: None,
                        phi: None,
                    },
                ));
            }
        }
        self.issue(0, picks)
    }

    /// Turns the answered batch into labels and closes the round.
    fn apply_batch(&mut self) -> Result<()> {
        let round = self.state.queries.last().map_or(0, |q| q.round);
        let classes: HashMap<u64, Class> = self.state.answers.iter().map(|a| (a.query_id, a.class)).collect();
        let propagates = self.state.strategy.propagates();
        for q in self.state.queries.iter().filter(|q| q.round == round) {
            let i = self.index_of[&q.image_id];
            let class = classes[&q.query_id];
            let source = if round == 0 { LabelSource::Seed } else { LabelSource::Queried };
            let labels = &mut self.state.labels[i];
            labels.add_point(q.row, q.col, class, source, round)?;
            if propagates {
                labels.add_propagated(&propagate(q.row, q.col, class, round, &self.partitions[i])?)?;
            }
            self.state.budget_spent_per_image[i] += 1;
        }
        if let Some(m) = self.state.pending_metrics.take() {
            self.state.metric_history.push(m);
            self.state.round += 1;
        }
        self.state.phase = Phase::Ready;
        Ok(())
    }

    fn train_round_model(&mut self, round: usize) -> Result<Trajectory> {
        let seed = self.state.seed;
        let init = match (&self.last_model, self.state.config.fine_tune) {
            (Some(m), true) => m.clone(),
            _ => GridNet::new(&self.arch, self.train.channels(), purpose_seed(seed, "init", 0)),
        };
        let traj = train_on_labels(
            &self.state.config,
            &self.arch,
            &self.train,
            &self.state.labels,
            init,
            purpose_seed(seed, "shuffle", 0),
        )?;
        if self.state.config.fine_tune {
            self.last_model = Some(traj.last().clone());
        }
        if let Some(dir) = &self.dir {
            let rel = format!("trajectories/round_{round}");
            traj.save(&dir.join(&rel))?;
            if !self.state.trajectory_refs.contains(&rel) {
                self.state.trajectory_refs.push(rel);
            }
        }
        Ok(traj)
    }

    fn probes(&self) -> Vec<Image> {
        let n = self.state.config.probe_images.min(self.test.len());
        let mut rng = ChaCha8Rng::seed_from_u64(purpose_seed(self.state.seed, "probes", 0));
        let mut idx = sample(&mut rng, self.test.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| self.test.items[i].image.clone()).collect()
    }

    fn metrics(&self, round: usize, eval: &Evaluation, delta: Option<f64>, train_updates: u64, sel: u64) -> RoundMetrics {
        RoundMetrics {
            round,
            budget: self.state.budget_spent(),
            max_f: eval.max_f,
            avg_f: eval.avg_f,
            mae: eval.mae,
            full_sup_ratio: self.state.full_sup_max_f.filter(|&f| f > 0.0).map(|f| eval.max_f / f),
            delta,
            train_updates,
            selection_updates: sel,
        }
    }

    /// Models that drive selection in this round, with their update cost.
    fn selection_models(&self, traj: &Trajectory) -> Result<(Vec<GridNet>, u64)> {
        let cfg = &self.state.config;
        let seed = self.state.seed;
        match self.state.strategy {
            StrategyKind::DenAtal => {
                let examples = self.examples()?;
                let seeds: Vec<u64> = (0..cfg.den_members as u64)
                    .map(|j| purpose_seed(seed, "den", j))
                    .collect();
                let opts = TrainOptions {
                    shuffle_seed: purpose_seed(seed, "den_shuffle", 0),
                    ..cfg.train
                };
                let den = train_den(
                    &seeds,
                    &self.arch,
                    self.train.channels(),
                    &examples,
                    cfg.ccls.total_iterations,
                    cfg.den_lr,
                    &opts,
                )?;
                Ok((den.members, den.update_count))
            }
            StrategyKind::AtalNoCcls => {
                let init = GridNet::new(&self.arch, self.train.channels(), purpose_seed(seed, "init", 0));
                let schedule = Schedule::Constant {
                    lr: cfg.ccls.eta_min,
                    total_iterations: cfg.ccls.total_iterations,
                    cycles: cfg.ccls.cycles,
                };
                let opts = TrainOptions {
                    shuffle_seed: purpose_seed(seed, "shuffle", 0),
                    ..cfg.train
                };
                let t = train(init, &self.examples()?, &schedule, &opts)?;
                Ok((t.snapshots, t.update_count))
            }
            _ => Ok((traj.snapshots.clone(), traj.update_count)),
        }
    }

    fn examples(&self) -> Result<Vec<Example<'_>>> {
        self.train
            .items
            .iter()
            .zip(&self.state.labels)
            .map(|(it, l)| Example::new(&it.image, l))
            .collect()
    }

    fn run_round(&mut self) -> Result<()> {
        let round = self.state.round;
        let traj = self.train_round_model(round)?;
        let eval = evaluate_models(&traj.snapshots, &self.test)?;
        let (models, sel_updates) = self.selection_models(&traj)?;
        let delta = if models.len() >= 2 {
            Some(homogenization(&models, &self.probes())?)
        } else {
            None
        };
        let m = self.metrics(round, &eval, delta, traj.update_count, sel_updates);
        info!(
            "{} seed {} round {round}: budget {} max-F {:.4}",
            self.state.strategy, self.state.seed, m.budget, m.max_f
        );
        self.state.pending_metrics = Some(m);

        let k = self.state.config.points_per_round.min(self.state.remaining_budget());
        let cfg = &self.state.config;
        let strategy = self.state.strategy;
        let selections: Vec<ImageSelection> = if strategy == StrategyKind::RandomPoints {
            let rng = &mut self.state.rng;
            self.state.labels.iter().map(|l| random_points(rng, l, k)).collect()
        } else {
            self.train
                .items
                .par_iter()
                .zip(&self.state.labels)
                .map(|(it, l)| select_with_models(strategy, &models, &it.image, l, k, cfg, round + 1))
                .collect::<Result<Vec<_>>>()?
        };
        let filled: usize = selections.iter().map(|s| s.filled).sum();
        if filled > 0 {
            info!("round {round}: {filled} points taken from the low-margin fallback");
        }
        self.dump_round(round + 1, &selections)?;
        let picks = selections
            .into_iter()
            .enumerate()
            .flat_map(|(i, s)| s.picks.into_iter().map(move |p| (i, p)))
            .collect();
        self.issue(round + 1, picks)
    }

    fn finalize(&mut self) -> Result<()> {
        let round = self.state.round;
        let traj = self.train_round_model(round)?;
        let eval = evaluate_models(&traj.snapshots, &self.test)?;
        let delta = if traj.snapshots.len() >= 2 {
            Some(homogenization(&traj.snapshots, &self.probes())?)
        } else {
            None
        };
        let m = self.metrics(round, &eval, delta, traj.update_count, 0);
        info!(
            "{} seed {} final: budget {} max-F {:.4}",
            self.state.strategy, self.state.seed, m.budget, m.max_f
        );
        self.state.final_metrics = Some(m);
        self.state.phase = Phase::Finished;
        Ok(())
    }

    fn dump_round(&self, round: usize, selections: &[ImageSelection]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let n = self.state.config.dump_images.min(selections.len());
        if n == 0 {
            return Ok(());
        }
        let out = dir.join("dumps").join(format!("round_{round}"));
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        for (i, sel) in selections.iter().take(n).enumerate() {
            let id = &self.train.items[i].id;
            self.partitions[i].write_pgm(&out.join(format!("{id}_superpixels.pgm")))?;
            if let Some(u) = &sel.umap {
                u.write_scores_pgm(&out.join(format!("{id}_uncertainty.pgm")))?;
                u.write_regions_pgm(&out.join(format!("{id}_regions.pgm")))?;
            }
        }
        Ok(())
    }

    fn persist(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        self.state.save(dir)?;
        let path = dir.join("metrics.tsv");
        std::fs::write(&path, metrics_table(&self.state)).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("selected_points.tsv");
        std::fs::write(&path, selected_points_table(&self.state)).map_err(|e| Error::io(&path, e))?;
        if self.state.answers.iter().any(|a| a.source == AnswerSource::Human) {
            let path = dir.join("divergence.tsv");
            std::fs::write(&path, self.divergence_table()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Human answers that disagree with the ground-truth mask.
    pub fn divergence_table(&self) -> String {
        let mut s = String::from("query_id\tround\timage_id\trow\tcol\tanswer\tground_truth\n");
        for a in self.state.answers.iter().filter(|a| a.source == AnswerSource::Human) {
            let Some(q) = self.state.queries.iter().find(|q| q.query_id == a.query_id) else {
                continue;
            };
            let Some(&i) = self.index_of.get(&q.image_id) else {
                continue;
            };
            let truth = Class::from_bit(self.train.items[i].mask.get(q.row, q.col));
            if truth != a.class {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{:?}\t{:?}",
                    q.query_id, q.round, q.image_id, q.row, q.col, a.class, truth
                );
            }
        }
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

/// One row per completed round plus the final fit.
pub fn metrics_table(state: &ExperimentState) -> String {
    let mut s = String::from("round\tbudget\tmax_f\tavg_f\tmae\tfull_sup_ratio\tdelta\tkind\n");
    let rows = state
        .metric_history
        .iter()
        .map(|m| (m, "round"))
        .chain(state.final_metrics.iter().map(|m| (m, "final")));
    for (m, kind) in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{kind}",
            m.round,
            m.budget,
            m.max_f,
            m.avg_f,
            m.mae,
            opt(m.full_sup_ratio),
            opt(m.delta)
        );
    }
    s
}

pub fn selected_points_table(state: &ExperimentState) -> String {
    let mut s = String::from("round\timage_id\trow\tcol\tscore\tphi\n");
    for q in state.queries.iter().filter(|q| q.round > 0) {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            q.round,
            q.image_id,
            q.row,
            q.col,
            opt(q.score),
            opt(q.phi)
        );
    }
    s
}

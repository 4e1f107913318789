//! Experiment state and its checksummed on-disk form.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OracleMode, StrategyKind};
use crate::error::{Error, Result};
use crate::labels::SparseLabels;
use crate::oracle::{AnswerSource, LabelAnswer, LabelQuery, QueryStatus};
use crate::rng::purpose_seed;

pub const STATE_FILE: &str = "state.json";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const ANSWERS_FILE: &str = "answers.jsonl";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Nothing has been queried yet.
    Fresh,
    /// Queries are out; the loop waits until all of them are answered.
    AwaitingAnswers,
    /// Labels are up to date and the next round (or the final fit) can run.
    Ready,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Annotated points per image the model was trained with.
    pub budget: usize,
    pub max_f: f64,
    pub avg_f: f64,
    pub mae: f64,
    pub full_sup_ratio: Option<f64>,
    /// Homogenization over the snapshots used for selection.
    pub delta: Option<f64>,
    pub train_updates: u64,
    pub selection_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentState {
    pub config: ExperimentConfig,
    pub strategy: StrategyKind,
    pub seed: u64,
    /// Completed selection rounds.
    pub round: usize,
    pub phase: Phase,
    pub labels: Vec<SparseLabels>,
    pub budget_spent_per_image: Vec<usize>,
    pub metric_history: Vec<RoundMetrics>,
    /// Metrics of the round whose queries are still out.
    pub pending_metrics: Option<RoundMetrics>,
    pub final_metrics: Option<RoundMetrics>,
    pub full_sup_max_f: Option<f64>,
    pub rng: ChaCha8Rng,
    pub queries: Vec<LabelQuery>,
    /// Sorted by query id.
    pub answers: Vec<LabelAnswer>,
    pub next_query_id: u64,
    /// Trajectory directories relative to the experiment directory.
    pub trajectory_refs: Vec<String>,
}

impl ExperimentState {
    pub fn new(config: ExperimentConfig, strategy: StrategyKind, seed: u64, labels: Vec<SparseLabels>) -> Self {
        let n = labels.len();
        Self {
            config,
            strategy,
            seed,
            round: 0,
            phase: Phase::Fresh,
            labels,
            budget_spent_per_image: vec![0; n],
            metric_history: Vec::new(),
            pending_metrics: None,
            final_metrics: None,
            full_sup_max_f: None,
            rng: ChaCha8Rng::seed_from_u64(purpose_seed(seed, "state", 0)),
            queries: Vec::new(),
            answers: Vec::new(),
            next_query_id: 0,
            trajectory_refs: Vec::new(),
        }
    }

    pub fn pending(&self) -> impl Iterator<Item = &LabelQuery> {
        self.queries.iter().filter(|q| q.status == QueryStatus::Pending)
    }

    pub fn pending_count(&self) -> usize {
        self.pending().count()
    }

    /// Smallest per-image spend; all images are kept in step.
    pub fn budget_spent(&self) -> usize {
        self.budget_spent_per_image.iter().copied().min().unwrap_or(0)
    }

    pub fn remaining_budget(&self) -> usize {
        self.config.max_budget.saturating_sub(self.budget_spent())
    }

    /// The same state with answer provenance and the oracle mode erased, for
    /// comparing runs that differ only in who answered. Stored trajectory
    /// paths are dropped too since in-memory runs have none.
    pub fn without_provenance(&self) -> Self {
        let mut s = self.clone();
        s.config.oracle = OracleMode::GroundTruth;
        for a in &mut s.answers {
            a.source = AnswerSource::GtOracle;
        }
        s.trajectory_refs.clear();
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_vec(self)?;
        let crc = crc32fast::hash(&body);
        let mut out = format!("# crc32={crc:08x}\n").into_bytes();
        out.extend_from_slice(&body);
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Parse {
            offset: 0,
            message: "missing checksum header".into(),
        })?;
        let header = std::str::from_utf8(&bytes[..nl]).unwrap_or("");
        let stored = header
            .strip_prefix("# crc32=")
            .and_then(|h| u32::from_str_radix(h.trim(), 16).ok())
            .ok_or(Error::Parse {
                offset: 0,
                message: format!("bad checksum header '{header}'"),
            })?;
        let mut body = &bytes[nl + 1..];
        if body.last() == Some(&b'\n') {
            body = &body[..body.len() - 1];
        }
        let computed = crc32fast::hash(body);
        if computed != stored {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        Ok(serde_json::from_slice(body)?)
    }

    /// Writes `state.json` through a temporary file and a rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(STATE_FILE);
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes, &path)
    }
}

/// Exclusive ownership of an experiment directory; removed on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

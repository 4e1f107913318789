//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversary::AttackConfig;
use crate::dataset::GeneratorParams;
use crate::error::{Error, Result};
use crate::superpixel::SlicParams;
use crate::trajectory::{CclsConfig, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Atal,
    RandomPoints,
    EntropyTopk,
    DenAtal,
    AtalNoRds,
    AtalNoSp,
    AtalNoCcls,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Atal,
        StrategyKind::RandomPoints,
        StrategyKind::EntropyTopk,
        StrategyKind::DenAtal,
        StrategyKind::AtalNoRds,
        StrategyKind::AtalNoSp,
        StrategyKind::AtalNoCcls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Atal => "atal",
            StrategyKind::RandomPoints => "random_points",
            StrategyKind::EntropyTopk => "entropy_topk",
            StrategyKind::DenAtal => "den_atal",
            StrategyKind::AtalNoRds => "atal_no_rds",
            StrategyKind::AtalNoSp => "atal_no_sp",
            StrategyKind::AtalNoCcls => "atal_no_ccls",
        }
    }

    /// Whether annotated points are spread over their superpixel.
    pub fn propagates(self) -> bool {
        self != StrategyKind::AtalNoSp
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Answers come straight from the ground-truth masks.
    GroundTruth,
    /// Rounds suspend until answers are submitted from outside.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory holding `train.tsv` and `test.tsv`; synthetic data otherwise.
    pub dir: Option<PathBuf>,
    /// Generator seed; the experiment seed when absent.
    pub seed: Option<u64>,
    pub train_count: usize,
    pub test_count: usize,
    pub size: usize,
    pub generator: GeneratorParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub architecture: String,
    pub ccls: CclsConfig,
    pub train: TrainOptions,
    pub attack: AttackConfig,
    pub margin_threshold: f64,
    pub k_percent: f64,
    pub cover_ratio: usize,
    pub per_image_cap: usize,
    pub superpixel: SlicParams,
    pub initial_points: usize,
    pub points_per_round: usize,
    pub max_budget: usize,
    pub fine_tune: bool,
    pub oracle: OracleMode,
    pub den_members: usize,
    pub den_lr: f64,
    pub full_supervision: bool,
    pub probe_images: usize,
    pub dump_images: usize,
    pub seeds: Vec<u64>,
    pub budgets: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                dir: None,
                seed: None,
                train_count: 20,
                test_count: 40,
                size: 32,
                generator: GeneratorParams::default(),
            },
            architecture: "grid4".into(),
            ccls: CclsConfig::default(),
            train: TrainOptions::default(),
            attack: AttackConfig::default(),
            margin_threshold: 0.5,
            k_percent: 3.0,
            cover_ratio: 4,
            per_image_cap: 512,
            superpixel: SlicParams::default(),
            initial_points: 2,
            points_per_round: 2,
            max_budget: 20,
            fine_tune: false,
            oracle: OracleMode::GroundTruth,
            den_members: 5,
            den_lr: 0.01,
            full_supervision: true,
            probe_images: 8,
            dump_images: 2,
            seeds: vec![1, 2, 3],
            budgets: vec![2, 4, 6, 8, 10, 20],
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.data.generator;
        match key {
            "data.dir" => self.data.dir = Some(PathBuf::from(value)),
            "data.seed" => self.data.seed = Some(parse_num(key, value)?),
            "data.train_count" => self.data.train_count = parse_num(key, value)?,
            "data.test_count" => self.data.test_count = parse_num(key, value)?,
            "data.size" => self.data.size = parse_num(key, value)?,
            "data.channels" => g.channels = parse_num(key, value)?,
            "data.distractor_rate" => g.distractor_rate = parse_num(key, value)?,
            "data.noise" => g.noise = parse_num(key, value)?,
            "data.texture" => g.texture = parse_num(key, value)?,
            "data.background_level" => g.background_level = parse_num(key, value)?,
            "data.blob_level" => g.blob_level = parse_num(key, value)?,
            "data.min_blobs" => g.min_blobs = parse_num(key, value)?,
            "data.max_blobs" => g.max_blobs = parse_num(key, value)?,
            "data.min_radius" => g.min_radius = parse_num(key, value)?,
            "data.max_radius" => g.max_radius = parse_num(key, value)?,
            "model.arch" => self.architecture = value.to_string(),
            "ccls.eta_max" => self.ccls.eta_max = parse_num(key, value)?,
            "ccls.eta_min" => self.ccls.eta_min = parse_num(key, value)?,
            "ccls.iterations" => self.ccls.total_iterations = parse_num(key, value)?,
            "ccls.cycles" => self.ccls.cycles = parse_num(key, value)?,
            "train.momentum" => self.train.momentum = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.clip_norm" => {
                self.train.clip_norm = match value {
                    "none" | "off" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "attack.epsilon" => self.attack.epsilon = parse_num(key, value)?,
            "attack.alpha" => self.attack.alpha = parse_num(key, value)?,
            "attack.steps" => self.attack.steps = parse_num(key, value)?,
            "uncertainty.margin_threshold" => self.margin_threshold = parse_num(key, value)?,
            "sampling.k_percent" => self.k_percent = parse_num(key, value)?,
            "sampling.cover_ratio" => self.cover_ratio = parse_num(key, value)?,
            "sampling.per_image_cap" => self.per_image_cap = parse_num(key, value)?,
            "superpixel.count" => self.superpixel.target_count = parse_num(key, value)?,
            "superpixel.compactness" => self.superpixel.compactness = parse_num(key, value)?,
            "superpixel.iterations" => self.superpixel.iterations = parse_num(key, value)?,
            "al.initial_points" => self.initial_points = parse_num(key, value)?,
            "al.points_per_round" => self.points_per_round = parse_num(key, value)?,
            "al.max_budget" => self.max_budget = parse_num(key, value)?,
            "al.fine_tune" => self.fine_tune = parse_bool(key, value)?,
            "al.oracle" => {
                self.oracle = match value {
                    "gt" | "ground_truth" => OracleMode::GroundTruth,
                    "external" | "human" => OracleMode::External,
                    _ => return Err(Error::Config(format!("al.oracle: unknown mode '{value}'"))),
                }
            }
            "den.members" => self.den_members = parse_num(key, value)?,
            "den.lr" => self.den_lr = parse_num(key, value)?,
            "eval.full_supervision" => self.full_supervision = parse_bool(key, value)?,
            "eval.probe_images" => self.probe_images = parse_num(key, value)?,
            "report.dump_images" => self.dump_images = parse_num(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "budgets" => self.budgets = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.ccls.validate()?;
        self.attack.validate()?;
        crate::gridnet::Architecture::by_id(&self.architecture)?;
        if self.data.dir.is_none() {
            self.data.generator.validate(self.data.size)?;
            if self.data.train_count == 0 || self.data.test_count == 0 {
                return Err(Error::Config("data counts must be at least 1".into()));
            }
        }
        if self.points_per_round == 0 {
            return Err(Error::Config("al.points_per_round must be at least 1".into()));
        }
        if self.initial_points > self.max_budget {
            return Err(Error::Config(format!(
                "al.initial_points {} exceeds al.max_budget {}",
                self.initial_points, self.max_budget
            )));
        }
        if self.cover_ratio == 0 {
            return Err(Error::Config("sampling.cover_ratio must be at least 1".into()));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::Config(format!("sampling.k_percent {} outside (0,100]", self.k_percent)));
        }
        if !(self.margin_threshold > 0.0 && self.margin_threshold < 1.0) {
            return Err(Error::Config("uncertainty.margin_threshold must be in (0,1)".into()));
        }
        if self.den_members < 2 {
            return Err(Error::Config("den.members must be at least 2".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it gives back this config.
    pub fn to_text(&self) -> String {
        let g = &self.data.generator;
        let mut lines = Vec::new();
        if let Some(d) = &self.data.dir {
            lines.push(format!("data.dir = {}", d.display()));
        }
        if let Some(s) = self.data.seed {
            lines.push(format!("data.seed = {s}"));
        }
        let join = |v: &[String]| v.join(",");
        lines.extend([
            format!("data.train_count = {}", self.data.train_count),
            format!("data.test_count = {}", self.data.test_count),
            format!("data.size = {}", self.data.size),
            format!("data.channels = {}", g.channels),
            format!("data.distractor_rate = {}", g.distractor_rate),
            format!("data.noise = {}", g.noise),
            format!("data.texture = {}", g.texture),
            format!("data.background_level = {}", g.background_level),
            format!("data.blob_level = {}", g.blob_level),
            format!("data.min_blobs = {}", g.min_blobs),
            format!("data.max_blobs = {}", g.max_blobs),
            format!("data.min_radius = {}", g.min_radius),
            format!("data.max_radius = {}", g.max_radius),
            format!("model.arch = {}", self.architecture),
            format!("ccls.eta_max = {}", self.ccls.eta_max),
            format!("ccls.eta_min = {}", self.ccls.eta_min),
            format!("ccls.iterations = {}", self.ccls.total_iterations),
            format!("ccls.cycles = {}", self.ccls.cycles),
            format!("train.momentum = {}", self.train.momentum),
            format!("train.batch_size = {}", self.train.batch_size),
            format!(
                "train.clip_norm = {}",
                self.train.clip_norm.map_or("none".to_string(), |c| c.to_string())
            ),
            format!("attack.epsilon = {}", self.attack.epsilon),
            format!("attack.alpha = {}", self.attack.alpha),
            format!("attack.steps = {}", self.attack.steps),
            format!("uncertainty.margin_threshold = {}", self.margin_threshold),
            format!("sampling.k_percent = {}", self.k_percent),
            format!("sampling.cover_ratio = {}", self.cover_ratio),
            format!("sampling.per_image_cap = {}", self.per_image_cap),
            format!("superpixel.count = {}", self.superpixel.target_count),
            format!("superpixel.compactness = {}", self.superpixel.compactness),
            format!("superpixel.iterations = {}", self.superpixel.iterations),
            format!("al.initial_points = {}", self.initial_points),
            format!("al.points_per_round = {}", self.points_per_round),
            format!("al.max_budget = {}", self.max_budget),
            format!("al.fine_tune = {}", self.fine_tune),
            format!(
                "al.oracle = {}",
                match self.oracle {
                    OracleMode::GroundTruth => "gt",
                    OracleMode::External => "external",
                }
            ),
            format!("den.members = {}", self.den_members),
            format!("den.lr = {}", self.den_lr),
            format!("eval.full_supervision = {}", self.full_supervision),
            format!("eval.probe_images = {}", self.probe_images),
            format!("report.dump_images = {}", self.dump_images),
            format!("seeds = {}", join(&self.seeds.iter().map(u64::to_string).collect::<Vec<_>>())),
            format!("budgets = {}", join(&self.budgets.iter().map(usize::to_string).collect::<Vec<_>>())),
        ]);
        lines.join("\n") + "\n"
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cyclic cosine learning-rate schedule with warm restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CclsConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_iterations: usize,
    pub cycles: usize,
}

impl Default for CclsConfig {
    fn default() -> Self {
        Self {
            eta_max: 0.1,
            eta_min: 0.001,
            total_iterations: 500,
            cycles: 5,
        }
    }
}

impl CclsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_max >= self.eta_min && self.eta_min >= 0.0 && self.eta_max.is_finite()) {
            return Err(Error::Config(format!(
                "need eta_max >= eta_min >= 0, got {} and {}",
                self.eta_max, self.eta_min
            )));
        }
        if self.cycles == 0 {
            return Err(Error::Config("ccls.cycles must be at least 1".into()));
        }
        if self.total_iterations < self.cycles {
            return Err(Error::Config(format!(
                "ccls.iterations {} is smaller than ccls.cycles {}",
                self.total_iterations, self.cycles
            )));
        }
        Ok(())
    }

    /// `floor(I / L)`.
    pub fn cycle_len(&self) -> usize {
        self.total_iterations / self.cycles
    }

    /// Iterations (1-based) at which snapshots are taken: `C, 2C, …, L·C`.
    pub fn snapshot_iterations(&self) -> Vec<usize> {
        (1..=self.cycles).map(|k| k * self.cycle_len()).collect()
    }

    /// The cosine envelope at cycle position `phase` in [0, 1]: `eta_max` at 0,
    /// the midpoint at 0.5, `eta_min` at 1. Iterations sample it at `(i-1 mod C)/C`.
    pub fn lr_at_phase(&self, phase: f64) -> f64 {
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

/// Learning rate at 1-based iteration `i`:
/// `η_min + ½(η_max − η_min)(1 + cos(π · ((i − 1) mod C) / C))`.
pub fn ccls_lr(i: usize, cfg: &CclsConfig) -> Result<f64> {
    cfg.validate()?;
    if i == 0 || i > cfg.total_iterations {
        return Err(Error::InvalidInput(format!(
            "iteration {i} outside 1..={}",
            cfg.total_iterations
        )));
    }
    let c = cfg.cycle_len();
    Ok(cfg.lr_at_phase(((i - 1) % c) as f64 / c as f64))
}

/// How a training run sets its learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Cyclic(CclsConfig),
    /// Fixed rate, snapshots still taken at the cyclic iterations of `cycles`.
    Constant {
        lr: f64,
        total_iterations: usize,
        cycles: usize,
    },
}

impl Schedule {
    pub fn total_iterations(&self) -> usize {
        match self {
            Schedule::Cyclic(c) => c.total_iterations,
            Schedule::Constant { total_iterations, .. } => *total_iterations,
        }
    }

    pub fn cycles(&self) -> usize {
        match self {
            Schedule::Cyclic(c) => c.cycles,
            Schedule::Constant { cycles, .. } => *cycles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Cyclic(c) => c.validate(),
            Schedule::Constant {
                lr,
                total_iterations,
                cycles,
            } => {
                if !(*lr >= 0.0 && lr.is_finite()) {
                    return Err(Error::Config(format!("constant lr {lr} must be >= 0")));
                }
                if *cycles == 0 || total_iterations < cycles {
                    return Err(Error::Config("need 1 <= cycles <= iterations".into()));
                }
                Ok(())
            }
        }
    }

    pub fn lr(&self, i: usize) -> Result<f64> {
        match self {
            Schedule::Cyclic(c) => ccls_lr(i, c),
            Schedule::Constant { lr, total_iterations, .. } => {
                if i == 0 || i > *total_iterations {
                    return Err(Error::InvalidInput(format!("iteration {i} outside 1..={total_iterations}")));
                }
                Ok(*lr)
            }
        }
    }

    pub fn snapshot_iterations(&self) -> Vec<usize> {
        let (total, cycles) = (self.total_iterations(), self.cycles());
        (1..=cycles).map(|k| k * (total / cycles)).collect()
    }
}

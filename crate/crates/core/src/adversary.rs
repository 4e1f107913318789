//! L∞ projected gradient ascent on the input, used only to probe how
//! stable the ensemble's decision is around each pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, ProbMap};
use crate::gridnet::GridNet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Radius of the L∞ ball, in unit-interval pixel units.
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            alpha: 0.01,
            steps: 7,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("attack.epsilon {} outside [0,1]", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("attack.alpha {} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// Hardens a probability map: class 1 iff `p >= 0.5`.
pub fn make_pseudo_labels(clean: &ProbMap) -> Vec<u8> {
    clean.data().iter().map(|&p| u8::from(p >= 0.5)).collect()
}

/// Runs `cfg.steps` signed-gradient ascent steps on the mean cross-entropy
/// between the models' predictions and `pseudo_labels`, projecting back into
/// `[x0 - ε, x0 + ε] ∩ [0, 1]` after every step.
///
/// With several models the step direction is the sign of the mean of the
/// per-model input gradients.
pub fn pgd_attack(models: &[GridNet], image: &Image, pseudo_labels: &[u8], cfg: &AttackConfig) -> Result<Image> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::InvalidInput("attack needs at least one model".into()));
    }
    if pseudo_labels.len() != image.pixels() {
        return Err(Error::shape(image.pixels(), pseudo_labels.len()));
    }
    if cfg.steps == 0 || cfg.epsilon == 0.0 {
        return Ok(image.clone());
    }
    let targets: Vec<(usize, f64)> = pseudo_labels
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, c as f64))
        .collect();
    let origin = image.data();
    let lower: Vec<f64> = origin.iter().map(|&v| (v - cfg.epsilon).max(0.0)).collect();
    let upper: Vec<f64> = origin.iter().map(|&v| (v + cfg.epsilon).min(1.0)).collect();

    let mut adv = image.clone();
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0; origin.len()];
        for m in models {
            let g = m.backprop(&adv, &targets, true)?.input.expect("input gradient requested");
            grad.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("input gradient"));
        }
        let next: Vec<f64> = adv
            .data()
            .iter()
            .zip(&grad)
            .enumerate()
            .map(|(i, (&x, &g))| {
                let step = if g > 0.0 {
                    cfg.alpha
                } else if g < 0.0 {
                    -cfg.alpha
                } else {
                    0.0
                };
                (x + step).clamp(lower[i], upper[i])
            })
            .collect();
        adv = Image::new(image.height(), image.width(), image.channels(), next)?;
    }
    Ok(adv)
}

use serde::{Deserialize, Serialize};

use super::{Gradients, GridNet};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − η·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(model: &GridNet) -> Self {
        Self {
            velocity: vec![0.0; model.params().len()],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// Applies one update. A non-finite gradient leaves both the model and
    /// the velocity untouched.
    pub fn step(&mut self, model: &mut GridNet, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidInput(format!("learning rate {lr} must be finite and >= 0")));
        }
        if grads.values.len() != self.velocity.len() || grads.values.len() != model.params().len() {
            return Err(Error::shape(self.velocity.len(), grads.values.len()));
        }
        if grads.values.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        for ((w, v), g) in model.params_mut().iter_mut().zip(&mut self.velocity).zip(&grads.values) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
        model.bump_updates(grads.images);
        Ok(())
    }
}

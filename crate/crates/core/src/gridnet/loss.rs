use crate::error::{Error, Result};
use crate::grid::ProbMap;
use crate::labels::SparseLabels;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy over the labeled pixels; 0 for an empty set.
pub fn masked_bce(pred: &ProbMap, labels: &SparseLabels) -> Result<f64> {
    if pred.height() != labels.height() || pred.width() != labels.width() {
        return Err(Error::shape(
            format!("{}x{}", labels.height(), labels.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    Ok(masked_bce_targets(pred.data(), &labels.targets()))
}

pub fn masked_bce_targets(probs: &[f64], targets: &[(usize, f64)]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let total: f64 = targets
        .iter()
        .map(|&(idx, y)| {
            let p = probs[idx].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / targets.len() as f64
}

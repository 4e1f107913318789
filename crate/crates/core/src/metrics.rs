//! Saliency evaluation: MAE and the F-measure over a threshold sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GroundTruthMask, ProbMap};

pub const THRESHOLDS: usize = 255;
pub const BETA_SQ: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub max_f: f64,
    pub avg_f: f64,
    pub mae: f64,
    /// `(threshold, precision, recall)` averaged over images.
    pub pr_curve: Vec<(f64, f64, f64)>,
}

/// `k / 254` for `k = 0..=254`.
pub fn thresholds() -> Vec<f64> {
    (0..THRESHOLDS).map(|k| k as f64 / (THRESHOLDS - 1) as f64).collect()
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let denom = BETA_SQ * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / denom
    }
}

/// Precision and recall of `p >= t` against the mask. Precision is 0 with
/// no predicted positives, recall is 0 with no salient pixels.
pub fn precision_recall(pred: &ProbMap, mask: &GroundTruthMask, t: f64) -> (f64, f64) {
    let (mut tp, mut pp, mut gp) = (0usize, 0usize, 0usize);
    for (&p, &m) in pred.data().iter().zip(mask.data()) {
        let pos = p >= t;
        pp += pos as usize;
        gp += m as usize;
        tp += (pos && m == 1) as usize;
    }
    let precision = if pp == 0 { 0.0 } else { tp as f64 / pp as f64 };
    let recall = if gp == 0 { 0.0 } else { tp as f64 / gp as f64 };
    (precision, recall)
}

/// Per-image precision and recall are averaged over images before the
/// F-measure is taken at each threshold.
pub fn evaluate(preds: &[ProbMap], masks: &[GroundTruthMask]) -> Result<Evaluation> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one image".into()));
    }
    if preds.len() != masks.len() {
        return Err(Error::shape(format!("{} masks", preds.len()), masks.len()));
    }
    for (p, m) in preds.iter().zip(masks) {
        if (p.height(), p.width()) != (m.height(), m.width()) {
            return Err(Error::shape(
                format!("{}x{}", m.height(), m.width()),
                format!("{}x{}", p.height(), p.width()),
            ));
        }
    }
    let n = preds.len() as f64;
    let mae = preds
        .iter()
        .zip(masks)
        .map(|(p, m)| {
            p.data().iter().zip(m.data()).map(|(&a, &b)| (a - b as f64).abs()).sum::<f64>() / p.data().len() as f64
        })
        .sum::<f64>()
        / n;

    let ts = thresholds();
    let mut pr_curve = Vec::with_capacity(ts.len());
    let (mut max_f, mut sum_f) = (0.0f64, 0.0);
    for &t in &ts {
        let (mut ps, mut rs) = (0.0, 0.0);
        for (p, m) in preds.iter().zip(masks) {
            let (pi, ri) = precision_recall(p, m, t);
            ps += pi;
            rs += ri;
        }
        let (p, r) = (ps / n, rs / n);
        let f = f_beta(p, r);
        max_f = max_f.max(f);
        sum_f += f;
        pr_curve.push((t, p, r));
    }
    Ok(Evaluation {
        max_f,
        avg_f: sum_f / ts.len() as f64,
        mae,
        pr_curve,
    })
}

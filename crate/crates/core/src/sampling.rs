//! Candidate filtering, greedy spatial cover and cosine-dissimilarity
//! ranking of the points to query.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, ProbMap};
use crate::uncertainty::UncertaintyMap;

pub const DEFAULT_TOP_PERCENT: f64 = 3.0;
pub const DEFAULT_PER_IMAGE_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePoint {
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub descriptor: Vec<f64>,
    pub coord_norm: (f64, f64),
}

impl CandidatePoint {
    pub fn pixel_index(&self, width: usize) -> usize {
        self.row * width + self.col
    }

    fn distance(&self, other: &CandidatePoint) -> f64 {
        let dy = self.coord_norm.0 - other.coord_norm.0;
        let dx = self.coord_norm.1 - other.coord_norm.1;
        (dy * dy + dx * dx).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverSet {
    pub points: Vec<CandidatePoint>,
    /// Sum of pairwise distances inside the cover after each addition.
    pub objective_trace: Vec<f64>,
}

/// `(row/H, col/W, 3×3 mean intensity per channel, probability, 1)`.
pub fn descriptor(image: &Image, prob: &ProbMap, row: usize, col: usize) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let mut d = vec![row as f64 / h as f64, col as f64 / w as f64];
    for ch in 0..image.channels() {
        let (mut sum, mut n) = (0.0, 0.0);
        for r in row.saturating_sub(1)..=(row + 1).min(h - 1) {
            for c in col.saturating_sub(1)..=(col + 1).min(w - 1) {
                sum += image.get(r, c, ch);
                n += 1.0;
            }
        }
        d.push(sum / n);
    }
    d.push(prob.get(row, col));
    d.push(1.0);
    d
}

/// The `⌈K/100 · H·W⌉` highest positive scores (ties row-major), at most `cap`.
/// Descriptors are filled from `image` and `prob`.
pub fn candidate_set(
    umap: &UncertaintyMap,
    top_percent: f64,
    cap: usize,
    image: &Image,
    prob: &ProbMap,
) -> Result<Vec<CandidatePoint>> {
    if !(top_percent > 0.0 && top_percent <= 100.0) {
        return Err(Error::Config(format!("candidate percentage {top_percent} outside (0,100]")));
    }
    let (h, w) = (umap.height, umap.width);
    if (image.height(), image.width()) != (h, w) || (prob.height(), prob.width()) != (h, w) {
        return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", image.height(), image.width())));
    }
    let quota = ((top_percent / 100.0 * (h * w) as f64).ceil() as usize).min(cap);
    let mut order: Vec<usize> = (0..h * w).filter(|&i| umap.scores[i] > 0.0).collect();
    // stable sort keeps row-major order among equal scores
    order.sort_by(|&a, &b| umap.scores[b].total_cmp(&umap.scores[a]));
    order.truncate(quota);
    Ok(order
        .into_iter()
        .map(|i| {
            let (row, col) = (i / w, i % w);
            CandidatePoint {
                row,
                col,
                score: umap.scores[i],
                descriptor: descriptor(image, prob, row, col),
                coord_norm: (row as f64 / h as f64, col as f64 / w as f64),
            }
        })
        .collect())
}

/// Index of the highest-score candidate, first in list order on ties.
pub fn highest_score_index(candidates: &[CandidatePoint]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if best.is_none_or(|b| c.score > candidates[b].score) {
            best = Some(i);
        }
    }
    best
}

/// Greedy max-sum-distance cover: start from `seed_index`, then keep adding
/// the candidate with the largest summed distance to the chosen points.
/// Ties go to the lowest row-major pixel index, so `width` is needed.
pub fn greedy_cover(candidates: &[CandidatePoint], m: usize, seed_index: usize, width: usize) -> Result<CoverSet> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("greedy cover over an empty candidate set".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("cover size must be at least 1".into()));
    }
    if seed_index >= candidates.len() {
        return Err(Error::InvalidInput(format!(
            "seed index {seed_index} outside candidate set of {}",
            candidates.len()
        )));
    }
    let n = candidates.len();
    let target = m.min(n);
    let mut chosen = vec![false; n];
    // running Σ distance from every candidate to the chosen set
    let mut gain = vec![0.0; n];
    let mut points = Vec::with_capacity(target);
    let mut objective_trace = Vec::with_capacity(target);
    let mut objective = 0.0;

    let add = |idx: usize, chosen: &mut Vec<bool>, gain: &mut Vec<f64>| {
        chosen[idx] = true;
        for (j, g) in gain.iter_mut().enumerate() {
            if !chosen[j] {
                *g += candidates[j].distance(&candidates[idx]);
            }
        }
    };

    add(seed_index, &mut chosen, &mut gain);
    points.push(candidates[seed_index].clone());
    objective_trace.push(objective);

    while points.len() < target {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if chosen[j] {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) => {
                    let better = gain[j] > gain[b]
                        || (gain[j] == gain[b] && candidates[j].pixel_index(width) < candidates[b].pixel_index(width));
                    Some(if better { j } else { b })
                }
            };
        }
        let j = best.expect("unchosen candidates remain");
        objective += gain[j];
        add(j, &mut chosen, &mut gain);
        points.push(candidates[j].clone());
        objective_trace.push(objective);
    }
    Ok(CoverSet { points, objective_trace })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity to the labeled descriptors; 0 when there are none.
pub fn similarity_phi(candidate: &CandidatePoint, labeled: &[Vec<f64>]) -> f64 {
    if labeled.is_empty() {
        return 0.0;
    }
    labeled.iter().map(|d| cosine(&candidate.descriptor, d)).sum::<f64>() / labeled.len() as f64
}

/// A chosen point with its similarity to the labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub point: CandidatePoint,
    pub phi: f64,
}

/// The `k` cover points least similar to the labeled set, ties in cover order.
pub fn select_batch(cover: &CoverSet, labeled: &[Vec<f64>], k: usize) -> Vec<Selected> {
    if k > cover.points.len() {
        warn!("asked for {k} points from a cover of {}; returning the whole cover", cover.points.len());
    }
    let mut ranked: Vec<Selected> = cover
        .points
        .iter()
        .map(|p| Selected {
            point: p.clone(),
            phi: similarity_phi(p, labeled),
        })
        .collect();
    ranked.sort_by(|a, b| a.phi.total_cmp(&b.phi));
    ranked.truncate(k);
    ranked
}

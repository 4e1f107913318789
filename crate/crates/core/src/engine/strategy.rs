//! Per-image point selection for each strategy.

use log::debug;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, StrategyKind};
use crate::error::Result;
use crate::grid::{Image, ProbMap};
use crate::gridnet::GridNet;
use crate::labels::SparseLabels;
use crate::sampling::{candidate_set, descriptor, greedy_cover, highest_score_index, select_batch};
use crate::trajectory::ensemble_predict;
use crate::uncertainty::{attack_ensemble, bvsb, uncertainty_map, UncertaintyMap};

#[derive(Debug, Clone, PartialEq)]
pub struct Pick {
    pub row: usize,
    pub col: usize,
    pub score: Option<f64>,
    pub phi: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ImageSelection {
    pub picks: Vec<Pick>,
    pub umap: Option<UncertaintyMap>,
    /// Picks that came from the low-margin fill instead of the strategy.
    pub filled: usize,
}

/// Selection for the model-driven strategies. Random selection needs the
/// shared generator and goes through [`random_points`].
pub fn select_with_models(
    kind: StrategyKind,
    models: &[GridNet],
    image: &Image,
    labels: &SparseLabels,
    k: usize,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<ImageSelection> {
    match kind {
        StrategyKind::EntropyTopk => {
            let clean = ensemble_predict(models, image)?;
            let w = clean.width();
            let mut order: Vec<usize> = (0..clean.data().len())
                .filter(|&i| !labels.is_point(i / w, i % w))
                .collect();
            order.sort_by(|&a, &b| entropy(clean.data()[b]).total_cmp(&entropy(clean.data()[a])));
            let picks = order
                .into_iter()
                .take(k)
                .map(|i| Pick {
                    row: i / w,
                    col: i % w,
                    score: Some(entropy(clean.data()[i])),
                    phi: None,
                })
                .collect();
            Ok(ImageSelection {
                picks,
                umap: None,
                filled: 0,
            })
        }
        StrategyKind::RandomPoints => unreachable!("random selection does not use models"),
        _ => adversarial(kind != StrategyKind::AtalNoRds, models, image, labels, k, cfg, round),
    }
}

fn adversarial(
    use_cover: bool,
    models: &[GridNet],
    image: &Image,
    labels: &SparseLabels,
    k: usize,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<ImageSelection> {
    let pred = attack_ensemble(models, image, &cfg.attack)?;
    let umap = uncertainty_map(&pred.clean, &pred.adversarial, cfg.margin_threshold, round)?;
    let mut masked = umap.clone();
    for p in labels.points() {
        masked.scores[p.row * umap.width + p.col] = 0.0;
    }
    let cands = candidate_set(&masked, cfg.k_percent, cfg.per_image_cap, image, &pred.clean)?;
    let mut picks: Vec<Pick> = if cands.is_empty() {
        Vec::new()
    } else if use_cover {
        let seed = highest_score_index(&cands).unwrap_or(0);
        let cover = greedy_cover(&cands, cfg.cover_ratio * k, seed, umap.width)?;
        let labeled: Vec<Vec<f64>> = labels
            .points()
            .map(|p| descriptor(image, &pred.clean, p.row, p.col))
            .collect();
        select_batch(&cover, &labeled, k)
            .into_iter()
            .map(|s| Pick {
                row: s.point.row,
                col: s.point.col,
                score: Some(s.point.score),
                phi: Some(s.phi),
            })
            .collect()
    } else {
        cands
            .iter()
            .take(k)
            .map(|c| Pick {
                row: c.row,
                col: c.col,
                score: Some(c.score),
                phi: None,
            })
            .collect()
    };
    let before = picks.len();
    fill_low_margin(&pred.clean, labels, &mut picks, k);
    if picks.len() > before {
        debug!(
            "{}: {} of {k} points from the low-margin fallback",
            labels.image_id(),
            picks.len() - before
        );
    }
    Ok(ImageSelection {
        filled: picks.len() - before,
        picks,
        umap: Some(umap),
    })
}

/// `k` distinct unannotated pixels, uniformly.
pub fn random_points(rng: &mut ChaCha8Rng, labels: &SparseLabels, k: usize) -> ImageSelection {
    let w = labels.width();
    let free: Vec<usize> = (0..labels.height() * w)
        .filter(|&i| !labels.is_point(i / w, i % w))
        .collect();
    let picks = sample(rng, free.len(), k.min(free.len()))
        .into_iter()
        .map(|j| Pick {
            row: free[j] / w,
            col: free[j] % w,
            score: None,
            phi: None,
        })
        .collect();
    ImageSelection {
        picks,
        umap: None,
        filled: 0,
    }
}

/// Tops `picks` up to `k` with the unannotated pixels of smallest clean
/// margin, ties row-major.
pub fn fill_low_margin(clean: &ProbMap, labels: &SparseLabels, picks: &mut Vec<Pick>, k: usize) {
    if picks.len() >= k {
        return;
    }
    let w = clean.width();
    let mut order: Vec<usize> = (0..clean.data().len())
        .filter(|&i| {
            let (r, c) = (i / w, i % w);
            !labels.is_point(r, c) && !picks.iter().any(|p| (p.row, p.col) == (r, c))
        })
        .collect();
    order.sort_by(|&a, &b| bvsb(clean.data()[a]).total_cmp(&bvsb(clean.data()[b])));
    for i in order.into_iter().take(k - picks.len()) {
        picks.push(Pick {
            row: i / w,
            col: i % w,
            score: Some(0.0),
            phi: None,
        });
    }
}

pub fn entropy(p: f64) -> f64 {
    let h = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    h(p) + h(1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{Class, LabelSource};

    #[test]
    fn entropy_peaks_at_half() {
        assert!((entropy(0.5) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(0.0), 0.0);
        assert!(entropy(0.3) > entropy(0.1));
        assert!((entropy(0.2) - entropy(0.8)).abs() < 1e-15);
    }

    #[test]
    fn fill_skips_points_and_orders_by_margin() {
        let mut data = vec![0.0; 64];
        data[5] = 0.5;
        data[6] = 0.45;
        data[7] = 0.5;
        let clean = ProbMap::new(8, 8, data).unwrap();
        let mut labels = SparseLabels::new("x", 8, 8);
        labels.add_point(0, 5, Class::Salient, LabelSource::Seed, 0).unwrap();
        let mut picks = Vec::new();
        fill_low_margin(&clean, &labels, &mut picks, 2);
        let at: Vec<(usize, usize)> = picks.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(at, vec![(0, 7), (0, 6)]);
    }

    #[test]
    fn random_points_avoid_annotations() {
        use rand::SeedableRng;
        let mut labels = SparseLabels::new("x", 8, 8);
        for c in 0..8 {
            for r in 0..7 {
                labels.add_point(r, c, Class::Background, LabelSource::Seed, 0).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sel = random_points(&mut rng, &labels, 3);
        assert_eq!(sel.picks.len(), 3);
        assert!(sel.picks.iter().all(|p| p.row == 7));
    }
}

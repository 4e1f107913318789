//! Flip-gated margin uncertainty and the SR / PIR / PSR pixel taxonomy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::{make_pseudo_labels, pgd_attack, AttackConfig};
use crate::dataset::pnm;
use crate::error::{Error, Result};
use crate::grid::{Image, ProbMap};
use crate::gridnet::{ensemble_forward, GridNet};

/// How a pixel's decision reacts to the adversarial perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Same class before and after the attack.
    Safe,
    /// Flipped although the clean prediction was confident.
    PerturbationInsensitive,
    /// Flipped and the clean prediction was close to the boundary.
    PerturbationSensitive,
}

impl Region {
    /// Gray level used in region dumps.
    pub fn gray(self) -> u8 {
        match self {
            Region::Safe => 0,
            Region::PerturbationInsensitive => 128,
            Region::PerturbationSensitive => 255,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Region::Safe => "SR",
            Region::PerturbationInsensitive => "PIR",
            Region::PerturbationSensitive => "PSR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub regions: Vec<Region>,
    pub source_round: usize,
}

impl UncertaintyMap {
    pub fn score(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.width + col]
    }

    pub fn region(&self, row: usize, col: usize) -> Region {
        self.regions[row * self.width + col]
    }

    pub fn count(&self, region: Region) -> usize {
        self.regions.iter().filter(|&&r| r == region).count()
    }

    pub fn write_scores_pgm(&self, path: &Path) -> Result<()> {
        pnm::write_gray(self.height, self.width, &self.scores, path)
    }

    pub fn write_regions_pgm(&self, path: &Path) -> Result<()> {
        let values: Vec<u8> = self.regions.iter().map(|r| r.gray()).collect();
        let bytes = pnm::encode_gray8(self.height, self.width, &values);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Best-versus-second-best margin of a binary prediction, `|2p - 1|`.
pub fn bvsb(p: f64) -> f64 {
    (2.0 * p - 1.0).abs()
}

fn salient(p: f64) -> bool {
    p >= 0.5
}

fn check(clean: &ProbMap, adv: &ProbMap, margin_threshold: f64) -> Result<()> {
    clean.same_shape(adv)?;
    if !(margin_threshold > 0.0 && margin_threshold < 1.0) {
        return Err(Error::Config(format!("margin threshold {margin_threshold} outside (0,1)")));
    }
    Ok(())
}

fn region_of(c: f64, a: f64, margin_threshold: f64) -> Region {
    if salient(c) == salient(a) {
        Region::Safe
    } else if bvsb(c) >= margin_threshold {
        Region::PerturbationInsensitive
    } else {
        Region::PerturbationSensitive
    }
}

pub fn classify_regions(clean: &ProbMap, adv: &ProbMap, margin_threshold: f64) -> Result<Vec<Region>> {
    check(clean, adv, margin_threshold)?;
    Ok(clean
        .data()
        .iter()
        .zip(adv.data())
        .map(|(&c, &a)| region_of(c, a, margin_threshold))
        .collect())
}

/// `flip · (1 − bvsb(clean))` per pixel, with region tags.
pub fn uncertainty_map(clean: &ProbMap, adv: &ProbMap, margin_threshold: f64, round: usize) -> Result<UncertaintyMap> {
    let regions = classify_regions(clean, adv, margin_threshold)?;
    let scores = clean
        .data()
        .iter()
        .zip(&regions)
        .map(|(&c, r)| if *r == Region::Safe { 0.0 } else { 1.0 - bvsb(c) })
        .collect();
    Ok(UncertaintyMap {
        height: clean.height(),
        width: clean.width(),
        scores,
        regions,
        source_round: round,
    })
}

/// Clean and attacked ensemble predictions for one image.
#[derive(Debug, Clone)]
pub struct AttackedPrediction {
    pub clean: ProbMap,
    pub adversarial: ProbMap,
    pub perturbed: Image,
}

/// Attacks the ensemble with its own hardened clean prediction as the
/// target and re-predicts on the perturbed image.
pub fn attack_ensemble(models: &[GridNet], image: &Image, attack: &AttackConfig) -> Result<AttackedPrediction> {
    let clean = ensemble_forward(models, image)?;
    let pseudo = make_pseudo_labels(&clean);
    let perturbed = pgd_attack(models, image, &pseudo, attack)?;
    let adversarial = ensemble_forward(models, &perturbed)?;
    Ok(AttackedPrediction {
        clean,
        adversarial,
        perturbed,
    })
}

pub fn ensemble_uncertainty(
    models: &[GridNet],
    image: &Image,
    attack: &AttackConfig,
    margin_threshold: f64,
    round: usize,
) -> Result<UncertaintyMap> {
    let pred = attack_ensemble(models, image, attack)?;
    uncertainty_map(&pred.clean, &pred.adversarial, margin_threshold, round)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: &[f64]) -> ProbMap {
        let mut data = vec![0.5; 64];
        data[..values.len()].copy_from_slice(values);
        ProbMap::new(8, 8, data).unwrap()
    }

    #[test]
    fn margins() {
        assert_eq!(bvsb(0.5), 0.0);
        assert!((bvsb(0.9) - 0.8).abs() < 1e-15);
        assert_eq!(bvsb(1.0), 1.0);
        assert_eq!(bvsb(0.0), 1.0);
    }

    #[test]
    fn taxonomy_examples() {
        let clean = map(&[0.9, 0.9, 0.55]);
        let adv = map(&[0.8, 0.4, 0.45]);
        let r = classify_regions(&clean, &adv, 0.5).unwrap();
        assert_eq!(r[0], Region::Safe);
        assert_eq!(r[1], Region::PerturbationInsensitive);
        assert_eq!(r[2], Region::PerturbationSensitive);
    }

    #[test]
    fn score_examples() {
        let clean = map(&[0.55]);
        let adv = map(&[0.40]);
        let u = uncertainty_map(&clean, &adv, 0.5, 3).unwrap();
        assert!((u.score(0, 0) - 0.9).abs() < 1e-12);
        assert_eq!(u.source_round, 3);
        let same = uncertainty_map(&clean, &clean, 0.5, 0).unwrap();
        assert!(same.scores.iter().all(|&s| s == 0.0));
        assert_eq!(same.count(Region::Safe), 64);
    }

    #[test]
    fn shape_and_threshold_errors() {
        let a = ProbMap::filled(8, 8, 0.3);
        let b = ProbMap::filled(8, 9, 0.3);
        assert!(uncertainty_map(&a, &b, 0.5, 0).is_err());
        assert!(classify_regions(&a, &a, 1.0).is_err());
        assert!(classify_regions(&a, &a, 0.0).is_err());
    }
}

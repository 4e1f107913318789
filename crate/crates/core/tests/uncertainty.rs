use atal_core::engine::{load_data, train_on_labels, ExperimentConfig};
use atal_core::grid::ProbMap;
use atal_core::gridnet::{Architecture, GridNet};
use atal_core::labels::{Class, LabelSource, SparseLabels};
use atal_core::uncertainty::{classify_regions, ensemble_uncertainty, uncertainty_map, Region};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive(clean: &[f64], adv: &[f64], tm: f64) -> (Vec<f64>, Vec<Region>) {
    let mut scores = Vec::new();
    let mut regions = Vec::new();
    for i in 0..clean.len() {
        let c_cls = if clean[i] >= 0.5 { 1 } else { 0 };
        let a_cls = if adv[i] >= 0.5 { 1 } else { 0 };
        let best = clean[i].max(1.0 - clean[i]);
        let second = clean[i].min(1.0 - clean[i]);
        let margin = best - second;
        if c_cls == a_cls {
            scores.push(0.0);
            regions.push(Region::Safe);
        } else {
            scores.push(1.0 - margin);
            regions.push(if margin >= tm {
                Region::PerturbationInsensitive
            } else {
                Region::PerturbationSensitive
            });
        }
    }
    (scores, regions)
}

fn arb_maps() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.0f64..=1.0, 100),
        prop::collection::vec(0.0f64..=1.0, 100),
    )
}

proptest! {
    #[test]
    fn matches_naive_scan((c, a) in arb_maps()) {
        let clean = ProbMap::new(10, 10, c.clone()).unwrap();
        let adv = ProbMap::new(10, 10, a.clone()).unwrap();
        let u = uncertainty_map(&clean, &adv, 0.5, 0).unwrap();
        let (scores, regions) = naive(&c, &a, 0.5);
        prop_assert_eq!(&u.regions, &regions);
        for (x, y) in u.scores.iter().zip(&scores) {
            prop_assert!((x - y).abs() < 1e-15);
        }
        // zero score exactly on safe pixels, and every score in [0,1]
        for (s, r) in u.scores.iter().zip(&u.regions) {
            prop_assert!((0.0..=1.0).contains(s));
            prop_assert_eq!(*s == 0.0, *r == Region::Safe);
        }
    }

    #[test]
    fn flip_detection_is_symmetric((c, a) in arb_maps()) {
        let clean = ProbMap::new(10, 10, c).unwrap();
        let adv = ProbMap::new(10, 10, a).unwrap();
        let fwd = classify_regions(&clean, &adv, 0.5).unwrap();
        let bwd = classify_regions(&adv, &clean, 0.5).unwrap();
        for (x, y) in fwd.iter().zip(&bwd) {
            prop_assert_eq!(*x == Region::Safe, *y == Region::Safe);
        }
    }

    #[test]
    fn sensitive_pixels_outrank_insensitive((c, a) in arb_maps()) {
        let clean = ProbMap::new(10, 10, c).unwrap();
        let adv = ProbMap::new(10, 10, a).unwrap();
        let u = uncertainty_map(&clean, &adv, 0.5, 0).unwrap();
        let min_psr = u.scores.iter().zip(&u.regions)
            .filter(|(_, r)| **r == Region::PerturbationSensitive)
            .map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
        let max_pir = u.scores.iter().zip(&u.regions)
            .filter(|(_, r)| **r == Region::PerturbationInsensitive)
            .map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_psr > max_pir);
    }
}

/// A net fit to one salient and one background point per image should be
/// most attack-sensitive where it is wrong.
#[test]
fn uncertainty_concentrates_on_mistakes() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_count = 8;
    let arch = Architecture::by_id(&cfg.architecture).unwrap();
    let mut wins = 0;
    for seed in [1u64, 2, 3] {
        let (train, _) = load_data(&cfg, seed).unwrap();
        let size = cfg.data.size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<SparseLabels> = train
            .items
            .iter()
            .map(|item| {
                let mut l = SparseLabels::new(&item.id, size, size);
                for want in [1u8, 0] {
                    loop {
                        let (r, c) = (rng.gen_range(0..size), rng.gen_range(0..size));
                        if item.mask.get(r, c) == want {
                            l.add_point(r, c, Class::from_bit(want), LabelSource::Seed, 0).unwrap();
                            break;
                        }
                    }
                }
                l
            })
            .collect();
        let init = GridNet::new(&arch, train.items[0].image.channels(), seed);
        let t = train_on_labels(&cfg, &arch, &train, &labels, init, seed).unwrap();
        let (mut wrong, mut nw, mut right, mut nr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (item, l) in train.items.iter().zip(&labels) {
            let u = ensemble_uncertainty(&t.snapshots, &item.image, &cfg.attack, cfg.margin_threshold, 0).unwrap();
            let clean = t.predict(&item.image).unwrap();
            for r in 0..size {
                for c in 0..size {
                    if l.get(r, c).is_some() {
                        continue;
                    }
                    if u8::from(clean.get(r, c) >= 0.5) == item.mask.get(r, c) {
                        right += u.score(r, c);
                        nr += 1.0;
                    } else {
                        wrong += u.score(r, c);
                        nw += 1.0;
                    }
                }
            }
        }
        if nw > 0.0 && wrong / nw > right / nr.max(1.0) {
            wins += 1;
        }
    }
    assert!(wins >= 2, "uncertainty favoured mistakes in only {wins} of 3 seeds");
}

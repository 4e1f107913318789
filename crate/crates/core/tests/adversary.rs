use atal_core::adversary::{make_pseudo_labels, pgd_attack, AttackConfig};
use atal_core::dataset::{Dataset, GeneratorParams, Split};
use atal_core::engine::{train_on_labels, ExperimentConfig};
use atal_core::grid::{Image, ProbMap};
use atal_core::gridnet::{ensemble_forward, Architecture, GridNet};
use atal_core::labels::{Class, LabelSource, SparseLabels};
use proptest::prelude::*;

fn arb_image() -> impl Strategy<Value = Image> {
    (8usize..12, 8usize..12, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(0.0f64..=1.0, h * w * c).prop_map(move |d| Image::new(h, w, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attack_stays_in_ball_and_range(
        img in arb_image(),
        net_seed in any::<u64>(),
        members in 1usize..3,
        epsilon in 0.0f64..=0.3,
        alpha in 0.0f64..=0.1,
        steps in 0usize..5,
        label_bits in any::<u64>(),
    ) {
        let arch = Architecture::custom("tiny", vec![3]);
        let nets: Vec<GridNet> = (0..members)
            .map(|j| GridNet::new(&arch, img.channels(), net_seed.wrapping_add(j as u64)))
            .collect();
        let before = nets.clone();
        let y: Vec<u8> = (0..img.height() * img.width()).map(|i| ((label_bits >> (i % 64)) & 1) as u8).collect();
        let cfg = AttackConfig { epsilon, alpha, steps };
        let original = img.clone();
        let adv = pgd_attack(&nets, &img, &y, &cfg).unwrap();
        prop_assert_eq!(&img, &original);
        prop_assert!(adv.max_abs_diff(&img) <= epsilon + 1e-9);
        prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&nets, &before);
        prop_assert!(nets.iter().all(|n| n.update_count() == 0));
    }

    #[test]
    fn pseudo_labels_threshold_each_pixel(data in prop::collection::vec(0.001f64..0.999, 1..200)) {
        let n = data.len();
        let mut data = data;
        data[0] = 0.5;
        let map = ProbMap::new(1, n, data.clone()).unwrap();
        let y = make_pseudo_labels(&map);
        let naive: Vec<u8> = data.iter().map(|&p| if p >= 0.5 { 1 } else { 0 }).collect();
        prop_assert_eq!(y, naive);
    }
}

/// Flip rate between clean and attacked ensemble predictions grows with the
/// number of attack steps.
#[test]
fn more_steps_flip_more_pixels() {
    let mut cfg = ExperimentConfig::default();
    cfg.ccls.total_iterations = 100;
    let params = GeneratorParams::default();
    let train = Dataset::synthetic(Split::Train, 2, 8, 24, &params).unwrap();
    let labels: Vec<SparseLabels> = train
        .items
        .iter()
        .map(|it| {
            let mut l = SparseLabels::new(&it.id, 24, 24);
            for r in (0..24).step_by(5) {
                for c in (0..24).step_by(5) {
                    l.add_point(r, c, Class::from_bit(it.mask.get(r, c)), LabelSource::Seed, 0).unwrap();
                }
            }
            l
        })
        .collect();
    let arch = Architecture::standard();
    let traj = train_on_labels(&cfg, &arch, &train, &labels, GridNet::new(&arch, 3, 2), 2).unwrap();
    let test = Dataset::synthetic(Split::Test, 2, 20, 24, &params).unwrap();
    let rates: Vec<f64> = [0usize, 1, 3, 7]
        .iter()
        .map(|&steps| {
            let attack = AttackConfig { steps, ..Default::default() };
            let mut flips = 0usize;
            for it in &test.items {
                let clean = ensemble_forward(&traj.snapshots, &it.image).unwrap();
                let y = make_pseudo_labels(&clean);
                let adv = pgd_attack(&traj.snapshots, &it.image, &y, &attack).unwrap();
                let after = ensemble_forward(&traj.snapshots, &adv).unwrap();
                flips += clean
                    .data()
                    .iter()
                    .zip(after.data())
                    .filter(|(a, b)| (**a >= 0.5) != (**b >= 0.5))
                    .count();
            }
            flips as f64 / (20.0 * 24.0 * 24.0)
        })
        .collect();
    assert_eq!(rates[0], 0.0);
    assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
    assert!(rates[3] > 0.0, "{rates:?}");
}

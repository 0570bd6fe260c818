mod common;

use patchprobe::attention::{attention_gap, AttentionTriplet};
use patchprobe::harness::synth::{layout_dominated_mean_pool, layout_dominated_triplet};
use patchprobe::similarity::{Direction, Mechanism};
use patchprobe::store::Variant;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swapping_signal_and_noise_negates_the_gap(seed in any::<u64>(), n in 2usize..20, d in 2usize..16) {
        let mut rng = common::rng(seed);
        let r = common::random_set(&mut rng, n, d, Variant::Reference);
        let s = common::random_set(&mut rng, n, d, Variant::Signal);
        let z = common::random_set(&mut rng, n, d, Variant::Noise);
        let t = AttentionTriplet::new(r, s, z).unwrap();
        let swapped = t.clone().with_roles_swapped();
        for m in Mechanism::ALL {
            for dir in [Direction::AToB, Direction::Symmetric] {
                let g = attention_gap(&t, m, dir).unwrap();
                let h = attention_gap(&swapped, m, dir).unwrap();
                prop_assert!((g.gap + h.gap).abs() <= 1e-12, "{m}");
                prop_assert!((g.gap - (g.sim_to_layout - g.sim_to_data)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mean_pool_gap_follows_closed_form(k in 1usize..20) {
        let p = k as f64 / 20.0;
        let t = layout_dominated_triplet(p, 100, 4, "m", "doc").unwrap();
        let g = attention_gap(&t, Mechanism::MeanPool, Direction::AToB).unwrap();
        let (data, layout) = layout_dominated_mean_pool(p);
        prop_assert!((g.sim_to_data - data).abs() < 1e-9);
        prop_assert!((g.sim_to_layout - layout).abs() < 1e-9);
    }
}

#[test]
fn mean_pool_gap_grows_with_layout_fraction() {
    let gaps: Vec<f64> = (1..20)
        .map(|k| {
            let t = layout_dominated_triplet(k as f64 / 20.0, 100, 4, "m", "doc").unwrap();
            attention_gap(&t, Mechanism::MeanPool, Direction::AToB).unwrap().gap
        })
        .collect();
    assert!(gaps.windows(2).all(|w| w[0] < w[1]), "{gaps:?}");
    assert!(gaps[9].abs() < 1e-12);
}

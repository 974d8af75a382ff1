mod common;

use common::*;
use imuge_core::masks::{
    binarize_otsu, dilate, erode, largest_region_fraction, localize, opening, refine_mask, region_sizes,
    sample_tamper_mask, Interval, Mask, MaskSpec, RegionShape,
};
use proptest::prelude::*;

fn mask_strategy(binary: bool) -> impl Strategy<Value = Mask> {
    (4usize..20, 4usize..20).prop_flat_map(move |(h, w)| {
        let cell = if binary {
            prop_oneof![Just(0.0), Just(1.0)].boxed()
        } else {
            prop_oneof![0.0f64..=1.0, (0u8..8).prop_map(|k| f64::from(k) / 7.0)].boxed()
        };
        prop::collection::vec(cell, h * w).prop_map(move |d| Mask::from_vec(h, w, d).unwrap())
    })
}

proptest! {
    #[test]
    fn otsu_matches_exhaustive_search(m in mask_strategy(false)) {
        prop_assert_eq!(binarize_otsu(&m), otsu_oracle(&m));
    }

    #[test]
    fn morphology_matches_window_loops(m in mask_strategy(true), k in 1usize..6) {
        prop_assert_eq!(erode(&m, k), erode_oracle(&m, k));
        prop_assert_eq!(dilate(&m, k), dilate_oracle(&m, k));
        prop_assert_eq!(refine_mask(&m, k), refine_oracle(&m, k));
    }

    #[test]
    fn opening_is_idempotent_and_anti_extensive(m in mask_strategy(true), k in 1usize..6) {
        let o = opening(&m, k);
        prop_assert_eq!(opening(&o, k), o.clone());
        prop_assert!(o.data().iter().zip(m.data()).all(|(a, b)| a <= b));
    }

    #[test]
    fn localize_is_binary(m in mask_strategy(false)) {
        prop_assert!(localize(&m).is_binary());
    }

    #[test]
    fn sampled_masks_respect_their_bands(seed in 0u64..500) {
        let spec = MaskSpec::training();
        let m = sample_tamper_mask(&mut rng(seed), &spec, 64, 64).unwrap();
        prop_assert!(m.is_binary());
        prop_assert!(spec.rst.contains(m.fraction()), "rst {}", m.fraction());
        prop_assert!(spec.rlt.contains(largest_region_fraction(&m)));
        let regions = region_sizes(&m).len();
        prop_assert!(regions >= spec.count.0 && regions <= spec.count.1);
    }
}

#[test]
fn ellipses_are_sampled_too() {
    let spec = MaskSpec {
        rst: Interval::new(0.1, 0.3),
        rlt: Interval::new(0.05, 0.2),
        count: (1, 3),
        shape: RegionShape::Ellipse,
    };
    for seed in 0..20 {
        let m = sample_tamper_mask(&mut rng(seed), &spec, 64, 64).unwrap();
        assert!(spec.rst.contains(m.fraction()));
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let spec = MaskSpec::training();
    let a = sample_tamper_mask(&mut rng(5), &spec, 32, 32).unwrap();
    let b = sample_tamper_mask(&mut rng(5), &spec, 32, 32).unwrap();
    assert_eq!(a, b);
}

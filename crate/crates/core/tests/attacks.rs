mod common;

use common::*;
use imuge_core::attacks::{
    apply_benign, apply_tamper, crop_window, diff_jpeg, execute_batch, execute_plan, gaussian_blur, rescale_roundtrip,
    sample_attack_plan, AttackConfig, AttackPlan, AttackStep, BenignKind, Rounding, TamperKind,
};
use imuge_core::masks::Mask;
use imuge_tensor::gradcheck::check_input_gradient;
use imuge_tensor::{Graph, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn tamper_is_a_per_pixel_branch(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, n in 1usize..3) {
        let mut r = rng(seed);
        let imm = uniform(&[n, 3, h, w], -1.0, 1.0, &mut r);
        let irr = uniform(&[n, 3, h, w], -1.0, 1.0, &mut r);
        let m = binary(&[n, 1, h, w], 0.5, &mut r);
        let g = Graph::inference();
        let out = apply_tamper(g.constant(imm.clone()), g.constant(irr.clone()), &m).unwrap().value();
        let expect = tamper_oracle(&imm, &irr, &m);
        prop_assert_eq!(out.data(), expect.as_slice());
    }

    #[test]
    fn benign_outputs_stay_in_range(seed in 0u64..200) {
        let mut r = rng(seed);
        let x = uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut r);
        let plan = sample_attack_plan(&mut r, &AttackConfig::default(), 16, 16).unwrap();
        let g = Graph::inference();
        let y = apply_benign(g.constant(x), &plan, Rounding::StraightThrough).unwrap().value();
        prop_assert_eq!(y.shape(), &[1, 3, 16, 16]);
        prop_assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_window_area_and_aspect(seed in any::<u64>(), keep in 0.3f64..=1.0) {
        let (y0, x0, ch, cw) = crop_window(&mut rng(seed), 64, 64, keep).unwrap();
        prop_assert!(y0 + ch <= 64 && x0 + cw <= 64);
        let aspect = cw as f64 / ch as f64;
        prop_assert!((0.5..=2.0).contains(&aspect));
        prop_assert!(((ch * cw) as f64 / 4096.0 - keep).abs() < 0.05);
    }
}

#[test]
fn non_binary_mask_is_a_contract_error() {
    let g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    assert!(apply_tamper(x, x, &Tensor::full(&[1, 1, 4, 4], 0.5)).is_err());
}

#[test]
fn awgn_matches_its_sigma() {
    let x = Tensor::zeros(&[1, 3, 256, 256]);
    let plan = AttackPlan {
        benign: BenignKind::Awgn,
        seed: 17,
        ..AttackPlan::identity()
    };
    let g = Graph::inference();
    // zero input, so clamping to [-1, 1] only touches > 10 sigma draws
    let y = apply_benign(g.constant(x), &plan, Rounding::StraightThrough).unwrap().value();
    let n = y.numel() as f64;
    let mean = y.sum() / n;
    let std = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.005 && (std - 0.1).abs() < 0.005, "{mean} {std}");
}

#[test]
fn rescale_and_blur_keep_size_and_constants() {
    let g = Graph::inference();
    let c = g.constant(Tensor::full(&[1, 3, 20, 20], 0.25));
    for s in [0.5, 0.7, 1.5, 2.0] {
        let y = rescale_roundtrip(c, s).unwrap().value();
        assert_eq!(y.shape(), &[1, 3, 20, 20]);
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
    for k in [3, 5, 7] {
        let y = gaussian_blur(c, k).unwrap().value();
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
    assert!(gaussian_blur(c, 4).is_err());
}

#[test]
fn attacks_are_differentiable() {
    let mut r = rng(3);
    let x = uniform(&[1, 3, 16, 16], -0.9, 0.9, &mut r);
    let w = uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut r);
    let idx: Vec<usize> = (0..30).map(|k| (k * 29) % x.numel()).collect();
    let probe = |f: &dyn Fn(imuge_tensor::Var<'_>) -> imuge_tensor::Var<'_>| {
        let pts = check_input_gradient(&x, &idx, 1e-6, |g, v| f(v).mul(g.constant(w.clone())).map(|y| y.sum_all())).unwrap();
        for p in pts {
            assert!(p.rel_error(1e-6) <= 1e-3, "{p:?}");
        }
    };
    probe(&|v| gaussian_blur(v, 5).unwrap());
    probe(&|v| rescale_roundtrip(v, 0.7).unwrap());
    probe(&|v| diff_jpeg(v, 90, Rounding::Cubic).unwrap());
}

#[test]
fn straight_through_gradient_is_the_unrounded_pipeline() {
    // without rounding the codec chain is the identity on [0, 255], so the
    // straight-through gradient of sum(w * jpeg(x)) is w up to the colour
    // matrices' inverse precision
    let mut r = rng(4);
    let x = uniform(&[1, 3, 8, 8], -0.5, 0.5, &mut r);
    let w = uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r);
    let g = Graph::new();
    let v = g.leaf(x);
    let loss = diff_jpeg(v, 80, Rounding::StraightThrough).unwrap().mul(g.constant(w.clone())).unwrap().sum_all();
    let grad = g.backward(loss).unwrap().wrt(v).cloned().unwrap();
    assert!(grad.max_abs_diff(&w).unwrap() < 1e-3);
}

#[test]
fn executor_orders_tamper_then_benign_and_unions_crop() {
    let mut r = rng(5);
    let x = uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut r);
    let region = Mask::from_fn(32, 32, |y, x| if (4..12).contains(&y) && (4..12).contains(&x) { 1.0 } else { 0.0 });
    let plan = AttackPlan {
        tamper: TamperKind::FillColor,
        benign: BenignKind::Crop,
        params: imuge_core::attacks::AttackParams {
            crop_keep: 0.5,
            fill: [0.5, 0.5, 0.5],
            ..Default::default()
        },
        seed: 2,
    };
    let g = Graph::inference();
    let out = execute_plan(g.constant(x), &plan, &region, None, Rounding::StraightThrough).unwrap();
    assert_eq!(out.trace, vec![AttackStep::Tamper(TamperKind::FillColor), AttackStep::Benign(BenignKind::Crop)]);
    assert!(region.data().iter().zip(out.mask.data()).all(|(a, b)| b >= a));
    assert!(out.mask.count_ones() > region.count_ones());
}

#[test]
fn skip_plans_leave_the_batch_untouched() {
    let mut r = rng(6);
    let x = uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut r);
    let plans = vec![AttackPlan::identity(); 2];
    let regions = vec![Mask::ones(16, 16); 2];
    let g = Graph::inference();
    let (y, m) = execute_batch(g.constant(x.clone()), &plans, &regions, None, Rounding::StraightThrough).unwrap();
    assert_eq!(y.value(), x);
    assert_eq!(m.sum(), 0.0);
}

#[test]
fn replacement_needs_a_donor() {
    let plan = AttackPlan {
        tamper: TamperKind::ReplaceImage,
        ..AttackPlan::identity()
    };
    let g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
    assert!(execute_plan(x, &plan, &Mask::ones(8, 8), None, Rounding::StraightThrough).is_err());
}

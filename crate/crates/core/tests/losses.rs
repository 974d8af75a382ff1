mod common;

use common::*;
use imuge_core::losses::{
    coefficients, eval_scalar, loss_adv_discriminator, loss_adv_generator, loss_cls, loss_fidelity, loss_rec,
    loss_recovery, loss_total, LossReport, LossWeights, BCE_EPS,
};
use imuge_tensor::gradcheck::check_input_gradient;
use imuge_tensor::Tensor;
use proptest::prelude::*;

fn cls_oracle(m: &Tensor, t: &Tensor) -> f64 {
    let mut s = 0.0;
    for (p, y) in m.data().iter().zip(t.data()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        s -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    s / m.numel() as f64
}

fn recovery_oracle(i: &Tensor, r: &Tensor, m: &Tensor) -> f64 {
    let (c, hw) = (i.shape()[1], i.shape()[2] * i.shape()[3]);
    let (mut all, mut inside, mut mass) = (0.0, 0.0, 0.0);
    for k in 0..i.numel() {
        let d = (i.data()[k] - r.data()[k]).powi(2);
        all += d;
        let mk = m.data()[(k / (c * hw)) * hw + k % hw];
        inside += d * mk;
        mass += mk;
    }
    let base = all / i.numel() as f64;
    if mass == 0.0 {
        base
    } else {
        base + inside / mass
    }
}

#[test]
fn random_instances_match_scalar_loops() {
    let mut r = rng(1);
    for _ in 0..10 {
        let i = uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
        let im = uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
        let ir = uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
        let mg = binary(&[1, 1, 4, 4], 0.4, &mut r);
        let m = uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut r);
        let cls = eval_scalar(|g| loss_cls(g.constant(m.clone()), &mg)).unwrap();
        assert!((cls - cls_oracle(&m, &mg)).abs() <= 1e-9);
        let (lr, lc) = (
            eval_scalar(|g| Ok(loss_rec(g.constant(i.clone()), g.constant(im.clone()), g.constant(ir.clone()), &mg)?.0)).unwrap(),
            eval_scalar(|g| Ok(loss_rec(g.constant(i.clone()), g.constant(im.clone()), g.constant(ir.clone()), &mg)?.1)).unwrap(),
        );
        assert!((lr - recovery_oracle(&i, &ir, &mg)).abs() <= 1e-9);
        let fid: f64 = i.data().iter().zip(im.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 48.0;
        assert!((lc - fid).abs() <= 1e-9);
        let s = uniform(&[1, 1, 4, 4], -1.0, 2.0, &mut r);
        let f = uniform(&[1, 1, 4, 4], -1.0, 2.0, &mut r);
        let gen = eval_scalar(|g| Ok(loss_adv_generator(g.constant(s.clone())))).unwrap();
        let gen_o: f64 = s.data().iter().map(|v| (1.0 - v).powi(2)).sum::<f64>() / 16.0;
        assert!((gen - gen_o).abs() <= 1e-9);
        let disc = eval_scalar(|g| loss_adv_discriminator(g.constant(s.clone()), g.constant(f.clone()))).unwrap();
        let disc_o = 0.5 * f.data().iter().map(|v| v * v).sum::<f64>() / 16.0 + 0.5 * gen_o;
        assert!((disc - disc_o).abs() <= 1e-9);
    }
}

#[test]
fn closed_forms() {
    let i = Tensor::from_fn(&[1, 3, 4, 4], |k| (k as f64 * 0.3).cos() * 0.7);
    let z = Tensor::zeros(&[1, 1, 4, 4]);
    let off = eval_scalar(|g| loss_recovery(g.constant(i.clone()), g.constant(i.map(|v| v - 0.3)), &z)).unwrap();
    assert!((off - 0.09).abs() < 1e-12);
    let ones = Tensor::ones(&[1, 1, 3, 3]);
    let zeros = Tensor::zeros(&[1, 1, 3, 3]);
    assert_eq!(eval_scalar(|g| Ok(loss_adv_generator(g.constant(zeros.clone())))).unwrap(), 1.0);
    assert_eq!(eval_scalar(|g| loss_adv_discriminator(g.constant(zeros.clone()), g.constant(ones.clone()))).unwrap(), 1.0);
    assert_eq!(eval_scalar(|g| loss_fidelity(g.constant(i.clone()), g.constant(i.clone()))).unwrap(), 0.0);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = Tensor::zeros(&[1, 1, 4, 4]);
    let b = Tensor::zeros(&[1, 1, 4, 5]);
    assert!(eval_scalar(|g| loss_cls(g.constant(a.clone()), &b)).is_err());
}

fn part(v: [f64; 5]) -> LossReport {
    LossReport {
        l_cls: v[0],
        l_r: v[1],
        l_c: v[2],
        l_dr: v[3],
        l_dc: v[4],
        l_total: 0.0,
    }
}

proptest! {
    #[test]
    fn total_is_linear_with_the_stated_coefficients(v in prop::array::uniform5(0.0f64..10.0), decoupled: bool) {
        let w = LossWeights::default();
        let expect = if decoupled { 0.0 } else { 0.01 } * v[0] + v[1] + 0.5 * v[2] + 0.005 * (v[3] + 0.5 * v[4]);
        prop_assert!((loss_total(&part(v), &w, decoupled) - expect).abs() <= 1e-9);
        prop_assert_eq!(coefficients(&w, decoupled)[0], if decoupled { 0.0 } else { 0.01 });
    }

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
        let b = uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r);
        let m = binary(&[1, 1, 4, 4], 0.5, &mut r);
        let p = uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut r);
        prop_assert!(eval_scalar(|g| loss_cls(g.constant(p.clone()), &m)).unwrap() >= 0.0);
        prop_assert!(eval_scalar(|g| loss_recovery(g.constant(a.clone()), g.constant(b.clone()), &m)).unwrap() >= 0.0);
    }
}

#[test]
fn loss_gradients_agree_with_finite_differences() {
    let mut r = rng(9);
    let i = uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r);
    let x = uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r);
    let m = binary(&[1, 1, 8, 8], 0.3, &mut r);
    let p = uniform(&[1, 1, 8, 8], 0.05, 0.95, &mut r);
    let idx: Vec<usize> = (0..40).map(|k| (k * 37) % 192).collect();
    let check = |pts: Vec<imuge_tensor::gradcheck::GradCheckPoint>| {
        for pt in pts {
            assert!(pt.rel_error(1e-8) <= 1e-3, "{pt:?}");
        }
    };
    check(check_input_gradient(&x, &idx, 1e-6, |g, v| Ok(loss_recovery(g.constant(i.clone()), v, &m).unwrap())).unwrap());
    check(check_input_gradient(&x, &idx, 1e-6, |g, v| Ok(loss_fidelity(g.constant(i.clone()), v).unwrap())).unwrap());
    let idx: Vec<usize> = (0..40).map(|k| (k * 13) % 64).collect();
    check(check_input_gradient(&p, &idx, 1e-6, |_, v| Ok(loss_cls(v, &m).unwrap())).unwrap());
    check(check_input_gradient(&p, &idx, 1e-6, |_, v| Ok(loss_adv_generator(v))).unwrap());
}

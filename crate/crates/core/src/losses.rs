//! Training objectives. All norms are means over elements so the weights
//! do not depend on resolution.

use imuge_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};

/// Probability clamp inside the logarithms of the BCE.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.005,
            gamma: 0.5,
            theta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma, self.theta].iter().any(|w| !(*w >= 0.0)) {
            return Err(contract_err("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Generator loss parts. `l_total` is the weighted sum actually optimised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_r: f64,
    pub l_c: f64,
    pub l_dr: f64,
    pub l_dc: f64,
    pub l_total: f64,
}

/// Multipliers of `(l_cls, l_r, l_c, l_dr, l_dc)` in the generator total.
/// The classification weight is zero while tasks are decoupled.
pub fn coefficients(w: &LossWeights, decoupled: bool) -> [f64; 5] {
    let alpha = if decoupled { 0.0 } else { w.alpha };
    [alpha, 1.0, w.gamma, w.beta, w.beta * w.theta]
}

fn parts(r: &LossReport) -> [f64; 5] {
    [r.l_cls, r.l_r, r.l_c, r.l_dr, r.l_dc]
}

/// `(l_r + gamma l_c) + alpha l_cls + beta (l_dr + theta l_dc)`.
pub fn loss_total(report: &LossReport, weights: &LossWeights, decoupled: bool) -> f64 {
    coefficients(weights, decoupled)
        .iter()
        .zip(parts(report))
        .filter(|(c, _)| **c != 0.0)
        .map(|(c, p)| c * p)
        .sum()
}

/// Graph counterpart of [`loss_total`]; absent parts count as zero.
pub fn loss_total_var<'g>(
    g: &'g Graph,
    parts: [Option<Var<'g>>; 5],
    weights: &LossWeights,
    decoupled: bool,
) -> Result<Var<'g>> {
    let mut total: Option<Var<'g>> = None;
    for (c, p) in coefficients(weights, decoupled).into_iter().zip(parts) {
        let Some(p) = p else { continue };
        if c == 0.0 {
            continue;
        }
        let term = p.mul_scalar(c);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

fn same_spatial(a: &[usize], m: &Tensor) -> Result<()> {
    let ms = m.shape();
    if a.len() != 4 || ms.len() != 4 || ms[0] != a[0] || ms[2] != a[2] || ms[3] != a[3] || (ms[1] != 1 && ms[1] != a[1]) {
        return Err(shape_err(format!("mask {ms:?} does not match {a:?}")));
    }
    Ok(())
}

/// Mean binary cross-entropy of prediction `m` against target `m_g`.
pub fn loss_cls<'g>(m: Var<'g>, m_g: &Tensor) -> Result<Var<'g>> {
    if m.shape() != m_g.shape() {
        return Err(shape_err(format!("prediction {:?} vs target {:?}", m.shape(), m_g.shape())));
    }
    let g = m.graph();
    let p = m.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let t = g.constant(m_g.clone());
    let pos = p.ln().mul(t)?;
    let neg = p.one_minus().ln().mul(t.one_minus())?;
    Ok(pos.add(neg)?.mean_all().mul_scalar(-1.0))
}

/// Recovery error with extra weight on the tampered region: the mean
/// squared error plus the squared error summed inside `m_g` over the mask
/// mass (the second term vanishes for an empty mask).
pub fn loss_recovery<'g>(original: Var<'g>, recovered: Var<'g>, m_g: &Tensor) -> Result<Var<'g>> {
    let shape = original.shape();
    if recovered.shape() != shape {
        return Err(shape_err("recovered and original images differ in shape"));
    }
    same_spatial(&shape, m_g)?;
    let diff = original.sub(recovered)?.sqr();
    let l = diff.mean_all();
    let mass = m_g.sum() * (shape[1] / m_g.shape()[1]) as f64;
    if mass == 0.0 {
        return Ok(l);
    }
    let masked = diff.mul(original.graph().constant(m_g.clone()))?.sum_all().mul_scalar(1.0 / mass);
    Ok(l.add(masked)?)
}

/// Fidelity of the immunized image, `mean((I - I_M)^2)`.
pub fn loss_fidelity<'g>(original: Var<'g>, immunized: Var<'g>) -> Result<Var<'g>> {
    if immunized.shape() != original.shape() {
        return Err(shape_err("immunized and original images differ in shape"));
    }
    Ok(original.sub(immunized)?.sqr().mean_all())
}

/// `(l_r, l_c)` for same-resolution inputs.
pub fn loss_rec<'g>(original: Var<'g>, immunized: Var<'g>, recovered: Var<'g>, m_g: &Tensor) -> Result<(Var<'g>, Var<'g>)> {
    Ok((loss_recovery(original, recovered, m_g)?, loss_fidelity(original, immunized)?))
}

/// Least-squares generator loss `mean((1 - s)^2)`.
pub fn loss_adv_generator(scores: Var<'_>) -> Var<'_> {
    scores.one_minus().sqr().mean_all()
}

/// Least-squares discriminator loss `mean(fake^2) / 2 + mean((1 - real)^2) / 2`.
pub fn loss_adv_discriminator<'g>(real: Var<'g>, fake: Var<'g>) -> Result<Var<'g>> {
    let f = fake.sqr().mean_all().mul_scalar(0.5);
    let r = real.one_minus().sqr().mean_all().mul_scalar(0.5);
    Ok(f.add(r)?)
}

/// Scalar value of a loss built on an inference graph.
pub fn eval_scalar(f: impl for<'g> FnOnce(&'g Graph) -> Result<Var<'g>>) -> Result<f64> {
    let g = Graph::inference();
    Ok(f(&g)?.to_scalar()?)
}

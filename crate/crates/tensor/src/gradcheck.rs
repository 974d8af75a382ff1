//! Central finite-difference checks against the tape's gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckPoint {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckPoint {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Compare `d f(x) / d x[i]` from the tape with `(f(x + h e_i) - f(x - h e_i)) / 2h`
/// at each index in `indices`. `f` must build a scalar from its input.
pub fn check_input_gradient<F>(x: &Tensor, indices: &[usize], step: f64, f: F) -> Result<Vec<GradCheckPoint>>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let input = g.leaf(x.clone());
    let out = f(&g, input)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::inference();
        let v = g.constant(t);
        f(&g, v)?.to_scalar()
    };
    indices
        .iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
            Ok(GradCheckPoint {
                index: i,
                analytic: analytic.data()[i],
                numeric,
            })
        })
        .collect()
}

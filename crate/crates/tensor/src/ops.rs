//! Differentiable operations on [`Var`].

use crate::error::{invalid, Result, TensorError};
use crate::graph::Var;
use crate::kernels::{self, Conv2dGeom};
use crate::tensor::Tensor;

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut st = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        st[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    st
}

/// Walk every output index of `out` and report the matching flat offsets
/// into two broadcast operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let base_a: usize = (0..rank - 1).map(|d| idx[d] * sa[d]).sum();
        let base_b: usize = (0..rank - 1).map(|d| idx[d] * sb[d]).sum();
        for j in 0..inner {
            f(o + j, base_a + j * ia_step, base_b + j * ib_step);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64 + Sync + Send) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f).expect("same shapes");
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    let (da, db) = (a.data(), b.data());
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
    Tensor::from_parts(out_shape.to_vec(), out)
}

/// Sum `grad` (shaped like the broadcast output) back down to `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape().to_vec();
    let s = broadcast_strides(shape, &out_shape);
    let zeros = vec![0; out_shape.len()];
    let mut acc = vec![0.0; shape.iter().product()];
    let g = grad.data();
    for_each_broadcast(&out_shape, &s, &zeros, |o, i, _| acc[i] += g[o]);
    Tensor::from_parts(shape.to_vec(), acc)
}

fn want(v: &Var<'_>) -> bool {
    v.requires_grad()
}

impl<'g> Var<'g> {
    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(invalid("graph", "operands belong to different graphs"))
        }
    }

    fn unary(self, value: Tensor, grad: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'g> {
        self.graph.record(value, &[self], move |g| vec![Some(grad(g))])
    }

    /// Elementwise sum with same-rank broadcasting.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("add", a.shape(), b.shape())?;
        let out = broadcast_zip(&a, &b, &shape, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let (wa, wb) = (want(&self), want(&other));
        Ok(self.graph.record(out, &[self, other], move |g| {
            vec![wa.then(|| reduce_to(g, &sa)), wb.then(|| reduce_to(g, &sb))]
        }))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("sub", a.shape(), b.shape())?;
        let out = broadcast_zip(&a, &b, &shape, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let (wa, wb) = (want(&self), want(&other));
        Ok(self.graph.record(out, &[self, other], move |g| {
            vec![
                wa.then(|| reduce_to(g, &sa)),
                wb.then(|| reduce_to(&g.scale(-1.0), &sb)),
            ]
        }))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape("mul", a.shape(), b.shape())?;
        let out = broadcast_zip(&a, &b, &shape, |x, y| x * y);
        let (wa, wb) = (want(&self), want(&other));
        Ok(self.graph.record(out, &[self, other], move |g| {
            let ga = wa.then(|| reduce_to(&broadcast_zip(g, &b, g.shape(), |x, y| x * y), a.shape()));
            let gb = wb.then(|| reduce_to(&broadcast_zip(g, &a, g.shape(), |x, y| x * y), b.shape()));
            vec![ga, gb]
        }))
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'g> {
        let v = self.value().map(|x| scale * x + shift);
        self.unary(v, move |g| g.scale(scale))
    }

    pub fn mul_scalar(self, s: f64) -> Var<'g> {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        self.affine(1.0, s)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g> {
        self.affine(-1.0, 1.0)
    }

    pub fn sqr(self) -> Var<'g> {
        let x = self.value();
        let v = x.map(|a| a * a);
        self.unary(v, move |g| g.zip_map(&x, |g, a| 2.0 * a * g).expect("shape"))
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let x = self.value();
        // `+ 0.0` keeps negative zeros out of the activations
        let v = x.map(|a| if a > 0.0 { a } else { slope * a + 0.0 });
        self.unary(v, move |g| {
            g.zip_map(&x, |g, a| if a > 0.0 { g } else { slope * g })
                .expect("shape")
        })
    }

    pub fn tanh(self) -> Var<'g> {
        let y = self.value().map(f64::tanh);
        let yc = y.clone();
        self.unary(y, move |g| g.zip_map(&yc, |g, y| g * (1.0 - y * y)).expect("shape"))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let y = self.value().map(|a| 1.0 / (1.0 + (-a).exp()));
        let yc = y.clone();
        self.unary(y, move |g| g.zip_map(&yc, |g, y| g * y * (1.0 - y)).expect("shape"))
    }

    /// Natural logarithm; the caller keeps inputs positive.
    pub fn ln(self) -> Var<'g> {
        let x = self.value();
        let v = x.map(f64::ln);
        self.unary(v, move |g| g.zip_map(&x, |g, a| g / a).expect("shape"))
    }

    /// Clamp to `[lo, hi]`; the gradient passes only where the input lies
    /// inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        let x = self.value();
        let v = x.map(|a| a.clamp(lo, hi));
        self.unary(v, move |g| {
            g.zip_map(&x, |g, a| if (lo..=hi).contains(&a) { g } else { 0.0 })
                .expect("shape")
        })
    }

    /// Round half away from zero in the forward pass, identity gradient
    /// (straight-through estimator).
    pub fn round_ste(self) -> Var<'g> {
        let v = self.value().map(f64::round);
        self.unary(v, |g| g.clone())
    }

    /// Cubic rounding surrogate `round(x) + (x - round(x))^3`, with the
    /// gradient of the cubic term only.
    pub fn round_cubic(self) -> Var<'g> {
        let x = self.value();
        let v = x.map(|a| {
            let r = a.round();
            r + (a - r).powi(3)
        });
        self.unary(v, move |g| {
            g.zip_map(&x, |g, a| {
                let d = a - a.round();
                g * 3.0 * d * d
            })
            .expect("shape")
        })
    }

    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s = Tensor::scalar(x.sum());
        self.unary(s, move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().numel().max(1) as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let v = x.reshape(shape)?;
        Ok(self.unary(v, move |g| g.reshape(&orig).expect("numel preserved")))
    }

    /// Channel-wise concatenation of `[n, c_i, h, w]` tensors.
    pub fn concat_channels(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = vals[0].dims4()?;
        let mut chans = Vec::with_capacity(vals.len());
        for v in &vals {
            let (vn, vc, vh, vw) = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: vals[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            first.same_graph(&parts[chans.len()])?;
            chans.push(vc);
        }
        let c_total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for b in 0..n {
            for (v, &c) in vals.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let wants: Vec<bool> = parts.iter().map(want).collect();
        let value = Tensor::from_parts(vec![n, c_total, h, w], out);
        Ok(first.graph.record(value, parts, move |g| {
            let gd = g.data();
            let mut offset = 0;
            chans
                .iter()
                .zip(&wants)
                .map(|(&c, &wt)| {
                    let start = offset;
                    offset += c;
                    wt.then(|| {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let base = (b * c_total + start) * hw;
                            d.extend_from_slice(&gd[base..base + c * hw]);
                        }
                        Tensor::from_parts(vec![n, c, h, w], d)
                    })
                })
                .collect()
        }))
    }

    /// Channels `start..start + len` of an `[n, c, h, w]` tensor.
    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if start + len > c {
            return Err(invalid("narrow_channels", format!("{start}+{len} > {c}")));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&x.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let v = Tensor::from_parts(vec![n, len, h, w], out);
        Ok(self.unary(v, move |g| {
            let mut d = vec![0.0; n * c * hw];
            for b in 0..n {
                d[(b * c + start) * hw..(b * c + start + len) * hw]
                    .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
            }
            Tensor::from_parts(vec![n, c, h, w], d)
        }))
    }

    /// 2-D convolution with zero padding. `weight` is `[c_out, c_in, k, k]`.
    pub fn conv2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var<'g>> {
        self.same_graph(&weight)?;
        let x = self.value();
        let wt = weight.value();
        let (n, c_in, h, w) = x.dims4()?;
        let (c_out, wc_in, k, k2) = wt.dims4()?;
        if wc_in != c_in || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        let geom = Conv2dGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            dilation,
        };
        let (ho, wo) = geom
            .out_hw()
            .ok_or_else(|| invalid("conv2d", format!("input {h}x{w} too small for kernel {k}")))?;
        let bias_val = bias.map(|b| b.value());
        if let Some(b) = &bias_val {
            if b.shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![c_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let out = kernels::conv2d_forward(x.data(), n, wt.data(), bias_val.as_ref().map(|b| b.data()), &geom);
        let value = Tensor::from_parts(vec![n, c_out, ho, wo], out);
        let (wx, ww, wb) = (want(&self), want(&weight), bias.as_ref().is_some_and(want));
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = parents.len() == 3;
        Ok(self.graph.record(value, &parents, move |g| {
            let grads = kernels::conv2d_backward(x.data(), n, wt.data(), &geom, g.data(), wx, ww, wb);
            let mut out = vec![
                grads.dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                grads.dweight.map(|d| Tensor::from_parts(wt.shape().to_vec(), d)),
            ];
            if has_bias {
                out.push(grads.dbias.map(|d| Tensor::from_parts(vec![c_out], d)));
            }
            out
        }))
    }

    /// Kernel-2, stride-2 transposed convolution doubling the spatial size.
    /// `weight` is `[c_in, c_out, 2, 2]`.
    pub fn conv_transpose2x2(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        self.same_graph(&weight)?;
        let x = self.value();
        let wt = weight.value();
        let (n, c_in, h, w) = x.dims4()?;
        let (wc_in, c_out, kh, kw) = wt.dims4()?;
        if wc_in != c_in || kh != 2 || kw != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2x2",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        let bias_val = bias.map(|b| b.value());
        let out = kernels::up2_forward(x.data(), n, c_in, h, w, wt.data(), c_out, bias_val.as_ref().map(|b| b.data()));
        let value = Tensor::from_parts(vec![n, c_out, 2 * h, 2 * w], out);
        let (wx, ww, wb) = (want(&self), want(&weight), bias.as_ref().is_some_and(want));
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = parents.len() == 3;
        Ok(self.graph.record(value, &parents, move |g| {
            let grads = kernels::up2_backward(x.data(), n, c_in, h, w, wt.data(), c_out, g.data(), wx, ww, wb);
            let mut out = vec![
                grads.dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                grads.dweight.map(|d| Tensor::from_parts(wt.shape().to_vec(), d)),
            ];
            if has_bias {
                out.push(grads.dbias.map(|d| Tensor::from_parts(vec![c_out], d)));
            }
            out
        }))
    }

    pub fn max_pool2(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("max_pool2", format!("odd spatial size {h}x{w}")));
        }
        let (vals, idx) = kernels::maxpool2_forward(x.data(), n * c, h, w);
        let value = Tensor::from_parts(vec![n, c, h / 2, w / 2], vals);
        Ok(self.unary(value, move |g| {
            Tensor::from_parts(vec![n, c, h, w], kernels::maxpool2_backward(g.data(), &idx, n * c, h, w))
        }))
    }

    /// Mean over non-overlapping `f×f` windows.
    pub fn avg_pool(self, f: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(invalid("avg_pool", format!("{h}x{w} not divisible by {f}")));
        }
        let (ho, wo) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f64;
        let v = kernels::per_plane(x.data(), n * c, h * w, ho * wo, |_, s, d| {
            for y in 0..h {
                for xx in 0..w {
                    d[(y / f) * wo + xx / f] += s[y * w + xx] * inv;
                }
            }
        });
        let value = Tensor::from_parts(vec![n, c, ho, wo], v);
        Ok(self.unary(value, move |g| {
            let d = kernels::per_plane(g.data(), n * c, ho * wo, h * w, |_, s, d| {
                for y in 0..h {
                    for xx in 0..w {
                        d[y * w + xx] = s[(y / f) * wo + xx / f] * inv;
                    }
                }
            });
            Tensor::from_parts(vec![n, c, h, w], d)
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, f: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if f == 0 {
            return Err(invalid("upsample_nearest", "factor 0"));
        }
        if f == 1 {
            return Ok(self);
        }
        let (ho, wo) = (h * f, w * f);
        let v = kernels::per_plane(x.data(), n * c, h * w, ho * wo, |_, s, d| {
            for y in 0..ho {
                for xx in 0..wo {
                    d[y * wo + xx] = s[(y / f) * w + xx / f];
                }
            }
        });
        let value = Tensor::from_parts(vec![n, c, ho, wo], v);
        Ok(self.unary(value, move |g| {
            let d = kernels::per_plane(g.data(), n * c, ho * wo, h * w, |_, s, d| {
                for y in 0..ho {
                    for xx in 0..wo {
                        d[(y / f) * w + xx / f] += s[y * wo + xx];
                    }
                }
            });
            Tensor::from_parts(vec![n, c, h, w], d)
        }))
    }

    /// Keep every `f`-th row and column, starting at the origin.
    pub fn downsample_nearest(self, f: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(invalid("downsample_nearest", format!("{h}x{w} not divisible by {f}")));
        }
        if f == 1 {
            return Ok(self);
        }
        let (ho, wo) = (h / f, w / f);
        let v = kernels::per_plane(x.data(), n * c, h * w, ho * wo, |_, s, d| {
            for y in 0..ho {
                for xx in 0..wo {
                    d[y * wo + xx] = s[y * f * w + xx * f];
                }
            }
        });
        let value = Tensor::from_parts(vec![n, c, ho, wo], v);
        Ok(self.unary(value, move |g| {
            let d = kernels::per_plane(g.data(), n * c, ho * wo, h * w, |_, s, d| {
                for y in 0..ho {
                    for xx in 0..wo {
                        d[y * f * w + xx * f] = s[y * wo + xx];
                    }
                }
            });
            Tensor::from_parts(vec![n, c, h, w], d)
        }))
    }

    /// Per-sample, per-channel normalisation without affine parameters.
    pub fn instance_norm(self, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let (y, inv_std) = kernels::instance_norm_forward(x.data(), n * c, h * w, eps);
        let value = Tensor::from_parts(vec![n, c, h, w], y);
        let yc = value.clone();
        Ok(self.unary(value, move |g| {
            Tensor::from_parts(
                vec![n, c, h, w],
                kernels::instance_norm_backward(yc.data(), &inv_std, g.data(), n * c, h * w),
            )
        }))
    }

    /// Bilinear resize with half-pixel centres and no antialiasing.
    pub fn resize_bilinear(self, ho: usize, wo: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if ho == 0 || wo == 0 {
            return Err(invalid("resize_bilinear", "empty target size"));
        }
        if (ho, wo) == (h, w) {
            return Ok(self);
        }
        let v = kernels::bilinear_forward(x.data(), n * c, h, w, ho, wo);
        let value = Tensor::from_parts(vec![n, c, ho, wo], v);
        Ok(self.unary(value, move |g| {
            Tensor::from_parts(
                vec![n, c, h, w],
                kernels::bilinear_backward(g.data(), n * c, h, w, ho, wo),
            )
        }))
    }

    /// Mirror padding that does not repeat the edge sample.
    pub fn pad_reflect(self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if top >= h.max(1) || bottom >= h.max(1) || left >= w.max(1) || right >= w.max(1) {
            return Err(invalid("pad_reflect", format!("padding too large for {h}x{w}")));
        }
        if top + bottom + left + right == 0 {
            return Ok(self);
        }
        let (ho, wo) = (h + top + bottom, w + left + right);
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
            r as usize
        };
        let ymap: Vec<usize> = (0..ho).map(|y| reflect(y as isize - top as isize, h)).collect();
        let xmap: Vec<usize> = (0..wo).map(|x| reflect(x as isize - left as isize, w)).collect();
        let (ym, xm) = (ymap.clone(), xmap.clone());
        let v = kernels::per_plane(x.data(), n * c, h * w, ho * wo, |_, s, d| {
            for (y, &sy) in ym.iter().enumerate() {
                for (xx, &sx) in xm.iter().enumerate() {
                    d[y * wo + xx] = s[sy * w + sx];
                }
            }
        });
        let value = Tensor::from_parts(vec![n, c, ho, wo], v);
        Ok(self.unary(value, move |g| {
            let d = kernels::per_plane(g.data(), n * c, ho * wo, h * w, |_, s, d| {
                for (y, &sy) in ymap.iter().enumerate() {
                    for (xx, &sx) in xmap.iter().enumerate() {
                        d[sy * w + sx] += s[y * wo + xx];
                    }
                }
            });
            Tensor::from_parts(vec![n, c, h, w], d)
        }))
    }

    /// Spatial window `[y0, y0 + h) × [x0, x0 + w)`.
    pub fn crop(self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if y0 + ch > h || x0 + cw > w {
            return Err(invalid("crop", format!("window exceeds {h}x{w}")));
        }
        if (ch, cw) == (h, w) {
            return Ok(self);
        }
        let v = kernels::per_plane(x.data(), n * c, h * w, ch * cw, |_, s, d| {
            for y in 0..ch {
                d[y * cw..(y + 1) * cw].copy_from_slice(&s[(y0 + y) * w + x0..(y0 + y) * w + x0 + cw]);
            }
        });
        let value = Tensor::from_parts(vec![n, c, ch, cw], v);
        Ok(self.unary(value, move |g| {
            let d = kernels::per_plane(g.data(), n * c, ch * cw, h * w, |_, s, d| {
                for y in 0..ch {
                    d[(y0 + y) * w + x0..(y0 + y) * w + x0 + cw].copy_from_slice(&s[y * cw..(y + 1) * cw]);
                }
            });
            Tensor::from_parts(vec![n, c, h, w], d)
        }))
    }

    /// Circular shift: `out[y, x] = in[(y - dy) mod h, (x - dx) mod w]`.
    pub fn roll(self, dy: isize, dx: isize) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let v = Tensor::from_parts(vec![n, c, h, w], roll_planes(x.data(), n * c, h, w, dy, dx));
        Ok(self.unary(v, move |g| {
            Tensor::from_parts(vec![n, c, h, w], roll_planes(g.data(), n * c, h, w, -dy, -dx))
        }))
    }

    /// Orthonormal 8×8 block DCT (or inverse) on each plane; spatial dims
    /// must be multiples of 8.
    pub fn block_dct8(self, inverse: bool) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(invalid("block_dct8", format!("{h}x{w} not a multiple of 8")));
        }
        let v = Tensor::from_parts(vec![n, c, h, w], kernels::block_dct8(x.data(), n * c, h, w, inverse));
        Ok(self.unary(v, move |g| {
            Tensor::from_parts(vec![n, c, h, w], kernels::block_dct8(g.data(), n * c, h, w, !inverse))
        }))
    }

    /// Per-pixel affine channel map: `out[o] = sum_i m[o][i] * in[i] + offset[o]`.
    pub fn channel_mix(self, matrix: &[Vec<f64>], offset: &[f64]) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let c_out = matrix.len();
        if offset.len() != c_out || matrix.iter().any(|r| r.len() != c) {
            return Err(invalid("channel_mix", "matrix/offset do not match channel count"));
        }
        let hw = h * w;
        let m: Vec<Vec<f64>> = matrix.to_vec();
        let mut out = vec![0.0; n * c_out * hw];
        for b in 0..n {
            for (o, row) in m.iter().enumerate() {
                let dst = &mut out[(b * c_out + o) * hw..(b * c_out + o + 1) * hw];
                dst.fill(offset[o]);
                for (i, &coef) in row.iter().enumerate() {
                    let src = &x.data()[(b * c + i) * hw..(b * c + i + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += coef * s;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c_out, h, w], out);
        Ok(self.unary(value, move |g| {
            let mut d = vec![0.0; n * c * hw];
            for b in 0..n {
                for (o, row) in m.iter().enumerate() {
                    let src = &g.data()[(b * c_out + o) * hw..(b * c_out + o + 1) * hw];
                    for (i, &coef) in row.iter().enumerate() {
                        let dst = &mut d[(b * c + i) * hw..(b * c + i + 1) * hw];
                        for (dv, s) in dst.iter_mut().zip(src) {
                            *dv += coef * s;
                        }
                    }
                }
            }
            Tensor::from_parts(vec![n, c, h, w], d)
        }))
    }
}

fn roll_planes(x: &[f64], planes: usize, h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    kernels::per_plane(x, planes, h * w, h * w, |_, s, d| {
        for y in 0..h {
            let src_y = (y + h - sy) % h;
            for xx in 0..w {
                d[y * w + xx] = s[src_y * w + (xx + w - sx) % w];
            }
        }
    })
}

/// `[a, b, inner]` to `[b, a, inner]`.
fn swap_outer(x: &[f64], a: usize, b: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * inner..(j * a + i + 1) * inner].copy_from_slice(&x[(i * b + j) * inner..(i * b + j + 1) * inner]);
        }
    }
    out
}

impl<'g> Var<'g> {
    /// Items `start..start + len` along the leading (batch) axis.
    pub fn narrow_batch(self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape.first().ok_or_else(|| invalid("narrow_batch", "scalar input"))?;
        if start + len > n {
            return Err(invalid("narrow_batch", format!("{start}+{len} > {n}")));
        }
        let item: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let v = Tensor::from_parts(out_shape, x.data()[start * item..(start + len) * item].to_vec());
        Ok(self.unary(v, move |g| {
            let mut d = vec![0.0; n * item];
            d[start * item..(start + len) * item].copy_from_slice(g.data());
            Tensor::from_parts(shape.clone(), d)
        }))
    }

    /// Concatenation along the leading (batch) axis.
    pub fn concat_batch(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| invalid("concat_batch", "no inputs"))?;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let tail = vals[0].shape().get(1..).ok_or_else(|| invalid("concat_batch", "scalar input"))?.to_vec();
        let mut sizes = Vec::with_capacity(vals.len());
        let mut data = Vec::new();
        for (p, v) in parts.iter().zip(&vals) {
            first.same_graph(p)?;
            if v.shape().get(1..) != Some(&tail[..]) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_batch",
                    lhs: vals[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            sizes.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![sizes.iter().sum()];
        shape.extend_from_slice(&tail);
        let item: usize = tail.iter().product();
        let wants: Vec<bool> = parts.iter().map(want).collect();
        Ok(first.graph.record(Tensor::from_parts(shape, data), parts, move |g| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(&wants)
                .map(|(&n, &wt)| {
                    let start = offset;
                    offset += n;
                    wt.then(|| {
                        let mut s = vec![n];
                        s.extend_from_slice(&tail);
                        Tensor::from_parts(s, g.data()[start * item..(start + n) * item].to_vec())
                    })
                })
                .collect()
        }))
    }

    /// Per-channel normalisation with statistics over batch and space,
    /// without affine parameters or running averages.
    pub fn batch_norm(self, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let xt = swap_outer(x.data(), n, c, hw);
        let (yt, inv_std) = kernels::instance_norm_forward(&xt, c, n * hw, eps);
        let value = Tensor::from_parts(vec![n, c, h, w], swap_outer(&yt, c, n, hw));
        Ok(self.unary(value, move |g| {
            let gt = swap_outer(g.data(), n, c, hw);
            let dx = kernels::instance_norm_backward(&yt, &inv_std, &gt, c, n * hw);
            Tensor::from_parts(vec![n, c, h, w], swap_outer(&dx, c, n, hw))
        }))
    }
}

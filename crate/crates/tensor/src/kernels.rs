//! Raw forward/backward kernels on flat NCHW buffers.
//!
//! Every kernel splits work per batch item (or per plane) and, where a
//! reduction over the batch is needed, sums the per-item partials in index
//! order so the parallel and sequential paths agree bit for bit.

use crate::parallel::map_indexed;

/// `C = A·B + beta·C` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let span = self.dilation * (self.k - 1) + 1;
        let hp = self.h + 2 * self.padding;
        let wp = self.w + 2 * self.padding;
        if hp < span || wp < span || self.stride == 0 {
            return None;
        }
        Some(((hp - span) / self.stride + 1, (wp - span) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

fn im2col(x: &[f64], g: &Conv2dGeom, ho: usize, wo: usize, cols: &mut [f64]) {
    let hw_out = ho * wo;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Conv2dGeom, ho: usize, wo: usize, dx: &mut [f64]) {
    let hw_out = ho * wo;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x` is `[n, c_in, h, w]`, `weight` is
/// `[c_out, c_in, k, k]`; returns `[n, c_out, ho, wo]`.
pub fn conv2d_forward(x: &[f64], n: usize, weight: &[f64], bias: Option<&[f64]>, g: &Conv2dGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw().expect("conv2d geometry checked by caller");
    let hw_out = ho * wo;
    let in_per = g.c_in * g.h * g.w;
    let rows = g.cols_rows();
    let items = map_indexed(n, |b| {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let mut out = vec![0.0; g.c_out * hw_out];
        if let Some(bias) = bias {
            for (co, chunk) in out.chunks_mut(hw_out).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        if g.is_pointwise() {
            gemm(g.c_out, rows, hw_out, weight, rows, 1, xb, hw_out, 1, 1.0, &mut out, hw_out, 1);
        } else {
            let mut cols = vec![0.0; rows * hw_out];
            im2col(xb, g, ho, wo, &mut cols);
            gemm(g.c_out, rows, hw_out, weight, rows, 1, &cols, hw_out, 1, 1.0, &mut out, hw_out, 1);
        }
        out
    });
    items.concat()
}

pub struct Conv2dGrads {
    pub dx: Option<Vec<f64>>,
    pub dweight: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

/// Backward convolution. Each requested gradient is computed only when the
/// corresponding flag is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    g: &Conv2dGeom,
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> Conv2dGrads {
    let (ho, wo) = g.out_hw().expect("conv2d geometry checked by caller");
    let hw_out = ho * wo;
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * hw_out;
    let rows = g.cols_rows();
    let per_item = map_indexed(n, |b| {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let dyb = &dy[b * out_per..(b + 1) * out_per];
        let mut dw = None;
        if want_dw {
            let mut acc = vec![0.0; g.c_out * rows];
            if g.is_pointwise() {
                gemm(g.c_out, hw_out, rows, dyb, hw_out, 1, xb, 1, hw_out, 0.0, &mut acc, rows, 1);
            } else {
                let mut cols = vec![0.0; rows * hw_out];
                im2col(xb, g, ho, wo, &mut cols);
                gemm(g.c_out, hw_out, rows, dyb, hw_out, 1, &cols, 1, hw_out, 0.0, &mut acc, rows, 1);
            }
            dw = Some(acc);
        }
        let mut dx = None;
        if want_dx {
            let mut dxb = vec![0.0; in_per];
            if g.is_pointwise() {
                gemm(rows, g.c_out, hw_out, weight, 1, rows, dyb, hw_out, 1, 0.0, &mut dxb, hw_out, 1);
            } else {
                let mut dcols = vec![0.0; rows * hw_out];
                gemm(rows, g.c_out, hw_out, weight, 1, rows, dyb, hw_out, 1, 0.0, &mut dcols, hw_out, 1);
                col2im(&dcols, g, ho, wo, &mut dxb);
            }
            dx = Some(dxb);
        }
        let db = want_db.then(|| {
            dyb.chunks(hw_out)
                .map(|c| c.iter().sum::<f64>())
                .collect::<Vec<_>>()
        });
        (dx, dw, db)
    });
    let mut dx_all = want_dx.then(|| Vec::with_capacity(n * in_per));
    let mut dw_all: Option<Vec<f64>> = None;
    let mut db_all: Option<Vec<f64>> = None;
    for (dx, dw, db) in per_item {
        if let (Some(all), Some(d)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&d);
        }
        accumulate(&mut dw_all, dw);
        accumulate(&mut db_all, db);
    }
    Conv2dGrads {
        dx: dx_all,
        dweight: dw_all,
        dbias: db_all,
    }
}

fn accumulate(acc: &mut Option<Vec<f64>>, part: Option<Vec<f64>>) {
    match (acc.as_mut(), part) {
        (None, Some(p)) => *acc = Some(p),
        (Some(a), Some(p)) => a.iter_mut().zip(p).for_each(|(a, p)| *a += p),
        _ => {}
    }
}

/// Stride-2, kernel-2 transposed convolution. `weight` is `[c_in, c_out, 2, 2]`.
pub fn up2_forward(x: &[f64], n: usize, c_in: usize, h: usize, w: usize, weight: &[f64], c_out: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let hw = h * w;
    let rows = c_out * 4;
    let items = map_indexed(n, |b| {
        let xb = &x[b * c_in * hw..(b + 1) * c_in * hw];
        let mut y = vec![0.0; rows * hw];
        gemm(rows, c_in, hw, weight, 1, rows, xb, hw, 1, 0.0, &mut y, hw, 1);
        let mut out = vec![0.0; c_out * 4 * hw];
        let w2 = 2 * w;
        for co in 0..c_out {
            let bias_v = bias.map_or(0.0, |bs| bs[co]);
            let plane = &mut out[co * 4 * hw..(co + 1) * 4 * hw];
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                let src = &y[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
                for iy in 0..h {
                    for ix in 0..w {
                        plane[(2 * iy + dy) * w2 + 2 * ix + dx] = src[iy * w + ix] + bias_v;
                    }
                }
            }
        }
        out
    });
    items.concat()
}

#[allow(clippy::too_many_arguments)]
pub fn up2_backward(
    x: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    dout: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> Conv2dGrads {
    let hw = h * w;
    let rows = c_out * 4;
    let w2 = 2 * w;
    let per_item = map_indexed(n, |b| {
        let xb = &x[b * c_in * hw..(b + 1) * c_in * hw];
        let db_src = &dout[b * c_out * 4 * hw..(b + 1) * c_out * 4 * hw];
        let mut gmat = vec![0.0; rows * hw];
        for co in 0..c_out {
            let plane = &db_src[co * 4 * hw..(co + 1) * 4 * hw];
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                let dst = &mut gmat[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
                for iy in 0..h {
                    for ix in 0..w {
                        dst[iy * w + ix] = plane[(2 * iy + dy) * w2 + 2 * ix + dx];
                    }
                }
            }
        }
        let dx = want_dx.then(|| {
            let mut d = vec![0.0; c_in * hw];
            gemm(c_in, rows, hw, weight, rows, 1, &gmat, hw, 1, 0.0, &mut d, hw, 1);
            d
        });
        let dw = want_dw.then(|| {
            let mut d = vec![0.0; c_in * rows];
            // dA[r, ci] = sum_p G[r, p] * X[ci, p], stored at d[ci * rows + r]
            gemm(rows, hw, c_in, &gmat, hw, 1, xb, 1, hw, 0.0, &mut d, 1, rows);
            d
        });
        let db = want_db.then(|| {
            (0..c_out)
                .map(|co| db_src[co * 4 * hw..(co + 1) * 4 * hw].iter().sum::<f64>())
                .collect::<Vec<_>>()
        });
        (dx, dw, db)
    });
    let mut dx_all = want_dx.then(|| Vec::with_capacity(n * c_in * hw));
    let mut dw_all = None;
    let mut db_all = None;
    for (dx, dw, db) in per_item {
        if let (Some(all), Some(d)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&d);
        }
        accumulate(&mut dw_all, dw);
        accumulate(&mut db_all, db);
    }
    Conv2dGrads {
        dx: dx_all,
        dweight: dw_all,
        dbias: db_all,
    }
}

/// Apply `f(plane_index, src_plane, dst_plane)` over `planes` planes.
pub(crate) fn per_plane<F>(src: &[f64], planes: usize, src_len: usize, dst_len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync + Send,
{
    let mut out = vec![0.0; planes * dst_len];
    let chunk = dst_len.max(1);
    crate::parallel::for_each_chunk_mut(&mut out, chunk * plane_group(planes, dst_len), |gi, dst| {
        let group = plane_group(planes, dst_len);
        for (j, d) in dst.chunks_mut(chunk).enumerate() {
            let p = gi * group + j;
            f(p, &src[p * src_len..(p + 1) * src_len], d);
        }
    });
    out
}

/// Number of planes handled per task so tasks stay around `CHUNK` elements.
fn plane_group(planes: usize, plane_len: usize) -> usize {
    (crate::parallel::CHUNK / plane_len.max(1)).clamp(1, planes.max(1))
}

/// 2×2 max pooling; returns the pooled values and the in-plane argmax.
pub fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let results = map_indexed(planes, |p| {
        let src = &x[p * h * w..(p + 1) * h * w];
        let mut vals = Vec::with_capacity(ho * wo);
        let mut idx = Vec::with_capacity(ho * wo);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                vals.push(src[best]);
                idx.push(best as u32);
            }
        }
        (vals, idx)
    });
    let mut vals = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for (v, i) in results {
        vals.extend(v);
        idx.extend(i);
    }
    (vals, idx)
}

pub fn maxpool2_backward(dy: &[f64], argmax: &[u32], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let per_out = (h / 2) * (w / 2);
    per_plane(dy, planes, per_out, h * w, |p, g, dst| {
        let idx = &argmax[p * per_out..(p + 1) * per_out];
        for (gv, &i) in g.iter().zip(idx) {
            dst[i as usize] += gv;
        }
    })
}

/// Per-plane normalisation to zero mean and unit variance. Returns the
/// normalised values and the per-plane inverse standard deviations.
pub fn instance_norm_forward(x: &[f64], planes: usize, plane_len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let inv_std = map_indexed(planes, |p| {
        let s = &x[p * plane_len..(p + 1) * plane_len];
        let mean = s.iter().sum::<f64>() / plane_len as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane_len as f64;
        (mean, 1.0 / (var + eps).sqrt())
    });
    let y = per_plane(x, planes, plane_len, plane_len, |p, s, d| {
        let (mean, istd) = inv_std[p];
        for (o, v) in d.iter_mut().zip(s) {
            *o = (v - mean) * istd;
        }
    });
    (y, inv_std.into_iter().map(|(_, s)| s).collect())
}

pub fn instance_norm_backward(y: &[f64], inv_std: &[f64], dy: &[f64], planes: usize, plane_len: usize) -> Vec<f64> {
    let nf = plane_len as f64;
    per_plane(dy, planes, plane_len, plane_len, |p, g, d| {
        let yp = &y[p * plane_len..(p + 1) * plane_len];
        let mean_g = g.iter().sum::<f64>() / nf;
        let mean_gy = g.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / nf;
        let istd = inv_std[p];
        for ((o, gv), yv) in d.iter_mut().zip(g).zip(yp) {
            *o = istd * (gv - mean_g - yv * mean_gy);
        }
    })
}

/// Two-tap interpolation weights for half-pixel-centred linear resampling
/// from `n_in` to `n_out` samples.
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Separable bilinear resize of `planes` planes from `h×w` to `ho×wo`.
pub fn bilinear_forward(x: &[f64], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    per_plane(x, planes, h * w, ho * wo, |_, src, dst| {
        let mut rows = vec![0.0; h * wo];
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                rows[y * wo + ox] = w0 * s[i0] + w1 * s[i1];
            }
        }
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..wo {
                dst[oy * wo + ox] = w0 * rows[i0 * wo + ox] + w1 * rows[i1 * wo + ox];
            }
        }
    })
}

pub fn bilinear_backward(dy: &[f64], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    per_plane(dy, planes, ho * wo, h * w, |_, g, dst| {
        let mut rows = vec![0.0; h * wo];
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..wo {
                let v = g[oy * wo + ox];
                rows[i0 * wo + ox] += w0 * v;
                rows[i1 * wo + ox] += w1 * v;
            }
        }
        for y in 0..h {
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                let v = rows[y * wo + ox];
                dst[y * w + i0] += w0 * v;
                dst[y * w + i1] += w1 * v;
            }
        }
    })
}

/// Orthonormal 8-point DCT-II basis, `m[u][x]`.
pub fn dct8_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    m
}

/// Blockwise 8×8 2-D DCT (`inverse = false`) or its inverse on every plane.
/// The transform is orthonormal, so the inverse is also the adjoint.
pub fn block_dct8(x: &[f64], planes: usize, h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let m = dct8_matrix();
    per_plane(x, planes, h * w, h * w, |_, src, dst| {
        let mut blk = [[0.0; 8]; 8];
        let mut tmp = [[0.0; 8]; 8];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (i, row) in blk.iter_mut().enumerate() {
                    row.copy_from_slice(&src[(by + i) * w + bx..(by + i) * w + bx + 8]);
                }
                // forward: M·B·Mᵀ; inverse: Mᵀ·B·M
                for i in 0..8 {
                    for j in 0..8 {
                        let mut s = 0.0;
                        for k in 0..8 {
                            let a = if inverse { m[k][i] } else { m[i][k] };
                            s += a * blk[k][j];
                        }
                        tmp[i][j] = s;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let mut s = 0.0;
                        for k in 0..8 {
                            let b = if inverse { m[k][j] } else { m[j][k] };
                            s += tmp[i][k] * b;
                        }
                        dst[(by + i) * w + bx + j] = s;
                    }
                }
            }
        }
    })
}

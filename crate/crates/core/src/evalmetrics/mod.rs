//! Image-quality and localisation metrics, plus the attack-grid harness.
//!
//! Metrics take `[-1, 1]` images and report on the `[0, 1]` scale with
//! peak 1.

mod harness;

pub use harness::*;

use imuge_tensor::Tensor;

use crate::error::{contract_err, shape_err, Result};
use crate::losses::BCE_EPS;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Sum of squared differences and element count, optionally restricted to
/// pixels where the `[n, 1, h, w]` mask is nonzero.
fn squared_error(a: &Tensor, b: &Tensor, mask: Option<&Tensor>) -> Result<(f64, usize)> {
    check_same(a, b)?;
    let (n, c, h, w) = a.dims4()?;
    if let Some(m) = mask {
        if m.shape() != [n, 1, h, w] {
            return Err(shape_err(format!("mask {:?} does not match {:?}", m.shape(), a.shape())));
        }
    }
    let hw = h * w;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if let Some(m) = mask {
            if m.data()[(i / (c * hw)) * hw + i % hw] == 0.0 {
                continue;
            }
        }
        let d = x - y;
        sum += d * d;
        count += 1;
    }
    Ok((sum, count))
}

fn psnr_from(sum: f64, count: usize, peak: f64) -> f64 {
    let mse = sum / count as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10 log10(peak^2 / mse)` on raw values; `+inf` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let (s, n) = squared_error(a, b, None)?;
    Ok(psnr_from(s, n, peak))
}

/// PSNR with the error restricted to masked pixels. `None` when the mask
/// is empty.
pub fn local_psnr(a: &Tensor, b: &Tensor, mask: &Tensor, peak: f64) -> Result<Option<f64>> {
    let (s, n) = squared_error(a, b, Some(mask))?;
    Ok((n > 0).then(|| psnr_from(s, n, peak)))
}

/// Map `[-1, 1]` to `[0, 1]`.
pub fn to_unit(t: &Tensor) -> Tensor {
    t.map(|v| (v + 1.0) * 0.5)
}

/// PSNR of two `[-1, 1]` images on the `[0, 1]` scale.
pub fn image_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    psnr(&to_unit(a), &to_unit(b), 1.0)
}

pub fn image_local_psnr(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Option<f64>> {
    local_psnr(&to_unit(a), &to_unit(b), mask, 1.0)
}

/// Normalised 1-D Gaussian taps of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` of one `[3, h, w]` plane set.
fn luminance(rgb: &[f64], hw: usize) -> Vec<f64> {
    (0..hw).map(|i| 0.299 * rgb[i] + 0.587 * rgb[hw + i] + 0.114 * rgb[2 * hw + i]).collect()
}

/// Mean SSIM of two single-channel `h×w` planes with values in `[0, 1]`,
/// over all window positions fully inside the image.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(shape_err("plane size mismatch"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(contract_err(format!("{h}x{w} image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // separable weighted means of a, b, a^2, b^2, ab
    let filter = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; h * wo];
        for y in 0..h {
            for x in 0..wo {
                rows[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * f(y * w + x + k)).sum();
            }
        }
        let mut out = vec![0.0; ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                out[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * wo + x]).sum();
            }
        }
        out
    };
    let mu_a = filter(&|i| a[i]);
    let mu_b = filter(&|i| b[i]);
    let aa = filter(&|i| a[i] * a[i]);
    let bb = filter(&|i| b[i] * b[i]);
    let ab = filter(&|i| a[i] * b[i]);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ho * wo) as f64)
}

/// Luminance SSIM of two `[n, 3, h, w]` images in `[-1, 1]`, averaged
/// over the batch.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b)?;
    let (n, c, h, w) = a.dims4()?;
    let hw = h * w;
    let (ua, ub) = (to_unit(a), to_unit(b));
    let mut total = 0.0;
    for i in 0..n {
        let pa = &ua.data()[i * c * hw..(i + 1) * c * hw];
        let pb = &ub.data()[i * c * hw..(i + 1) * c * hw];
        let (la, lb) = if c == 3 {
            (luminance(pa, hw), luminance(pb, hw))
        } else if c == 1 {
            (pa.to_vec(), pb.to_vec())
        } else {
            return Err(shape_err(format!("ssim needs 1 or 3 channels, got {c}")));
        };
        total += ssim_plane(&la, &lb, h, w)?;
    }
    Ok(total / n as f64)
}

/// Mean BCE of a soft mask against a binary target, with the same clamp as
/// the training loss.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target)?;
    let n = pred.numel() as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / n)
}

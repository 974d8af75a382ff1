//! Independent scalar oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use imuge_core::appio::{load_dataset, load_image, Dataset, DatasetConfig};
use imuge_core::masks::Mask;
use imuge_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/natural")
}

pub fn fixtures(n: usize) -> Vec<Tensor> {
    (0..n).map(|i| load_image(&fixture_dir().join(format!("img{i:02}.png"))).unwrap()).collect()
}

pub fn fixture_dataset(limit: usize) -> Dataset {
    load_dataset(&DatasetConfig {
        root: fixture_dir(),
        limit,
        ..DatasetConfig::default()
    })
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn binary(shape: &[usize], p: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

/// Per-pixel branch: tampered pixels come from `irr`, the rest from `imm`.
pub fn tamper_oracle(imm: &Tensor, irr: &Tensor, mask: &Tensor) -> Vec<f64> {
    let s = imm.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(imm.numel());
    for i in 0..imm.numel() {
        let (b, p) = (i / (c * h * w), i % (h * w));
        let m = mask.data()[b * h * w + p];
        out.push(if m == 1.0 { irr.data()[i] } else { imm.data()[i] });
    }
    out
}

/// Exhaustive Otsu: every threshold `t` in `0..256`, classes recomputed
/// from the pixel list, between-class variance compared as exact integer
/// fractions. First maximum wins; 1 where the bin exceeds the threshold.
pub fn otsu_oracle(m: &Mask) -> Mask {
    let bins: Vec<u64> = m
        .data()
        .iter()
        .map(|&v| {
            let b = (v.clamp(0.0, 1.0) * 256.0).floor() as u64;
            b.min(255)
        })
        .collect();
    let mut best: Option<(u64, u128, u128)> = None;
    for t in 0..256u64 {
        let (mut n0, mut s0, mut n1, mut s1) = (0u128, 0u128, 0u128, 0u128);
        for &b in &bins {
            if b <= t {
                n0 += 1;
                s0 += b as u128;
            } else {
                n1 += 1;
                s1 += b as u128;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // n0 n1 (s0/n0 - s1/n1)^2 = (n1 s0 - n0 s1)^2 / (n0 n1)
        let d = (n1 * s0).abs_diff(n0 * s1);
        let (num, den) = (d * d, n0 * n1);
        match best {
            Some((_, bn, bd)) if num * bd <= bn * den => {}
            _ => best = Some((t, num, den)),
        }
    }
    let (h, w) = m.dims();
    match best {
        None => Mask::zeros(h, w),
        Some((t, _, _)) => Mask::from_vec(h, w, bins.iter().map(|&b| if b > t { 1.0 } else { 0.0 }).collect()).unwrap(),
    }
}

fn window(k: usize) -> (isize, isize) {
    let a = (k / 2) as isize;
    (-a, k as isize - 1 - a)
}

/// Square-element erosion by a direct 2-D window loop; out-of-image
/// positions are ignored.
pub fn erode_oracle(m: &Mask, k: usize) -> Mask {
    let (h, w) = m.dims();
    let (lo, hi) = window(k);
    Mask::from_fn(h, w, |y, x| {
        let mut all = true;
        for dy in lo..=hi {
            for dx in lo..=hi {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && m.get(yy as usize, xx as usize) == 0.0 {
                    all = false;
                }
            }
        }
        if all { 1.0 } else { 0.0 }
    })
}

/// Dilation by the reflected element.
pub fn dilate_oracle(m: &Mask, k: usize) -> Mask {
    let (h, w) = m.dims();
    let (lo, hi) = window(k);
    Mask::from_fn(h, w, |y, x| {
        let mut any = false;
        for dy in lo..=hi {
            for dx in lo..=hi {
                let (yy, xx) = (y as isize - dy, x as isize - dx);
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && m.get(yy as usize, xx as usize) == 1.0 {
                    any = true;
                }
            }
        }
        if any { 1.0 } else { 0.0 }
    })
}

/// Opening followed by one more dilation.
pub fn refine_oracle(m: &Mask, k: usize) -> Mask {
    dilate_oracle(&dilate_oracle(&erode_oracle(m, k), k), k)
}

pub fn psnr_oracle(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = se / a.len() as f64;
    10.0 * (peak * peak / mse).log10()
}

/// PSNR over pixels whose mask entry is nonzero; `shape` is `[n, c, h, w]`
/// and the mask `[n, 1, h, w]`.
pub fn local_psnr_oracle(a: &[f64], b: &[f64], mask: &[f64], shape: [usize; 4], peak: f64) -> Option<f64> {
    let [n, c, h, w] = shape;
    let (mut se, mut count) = (0.0, 0usize);
    for bi in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if mask[(bi * h + y) * w + x] == 0.0 {
                        continue;
                    }
                    let i = ((bi * c + ci) * h + y) * w + x;
                    se += (a[i] - b[i]) * (a[i] - b[i]);
                    count += 1;
                }
            }
        }
    }
    (count > 0).then(|| 10.0 * (peak * peak / (se / count as f64)).log10())
}

pub const SSIM_H: usize = 32;
pub const SSIM_W: usize = 40;

/// Reference values from `skimage.metrics.structural_similarity` (data
/// range 1, Gaussian weights, sigma 1.5, population covariance); produced
/// by `scripts/ssim_reference.py`.
pub const SSIM_REFERENCE: [(&str, f64); 4] = [
    ("smooth_affine", 0.915616676202752),
    ("inverted_ramp", -0.496170598053563),
    ("texture", 0.977397286714156),
    ("identical", 1.0),
];

/// The image pairs behind [`SSIM_REFERENCE`], row-major `y * w + x`.
pub fn ssim_pair(name: &str) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (SSIM_H, SSIM_W);
    let grid = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        (0..h * w).map(|i| f((i % w) as f64, (i / w) as f64)).collect()
    };
    let t1 = |x: f64, y: f64| 0.5 + 0.5 * (0.37 * x * x + 1.1 * y).sin();
    match name {
        "smooth_affine" => {
            let a = |x: f64, y: f64| 0.5 + 0.4 * (0.3 * x + 0.2 * y).sin();
            (grid(&a), grid(&|x, y| 0.8 * a(x, y) + 0.1 + 0.05 * (1.3 * x - 0.7 * y).cos()))
        }
        "inverted_ramp" => {
            let r = move |x: f64, y: f64| (x + w as f64 * y) / (h * w - 1) as f64;
            (grid(&r), grid(&|x, y| 1.0 - r(x, y)))
        }
        "texture" => (
            grid(&t1),
            grid(&|x, y| 0.5 + 0.5 * (0.37 * x * x + 1.1 * y + 0.3 * (0.9 * y * x / 7.0).cos()).sin()),
        ),
        "identical" => (grid(&t1), grid(&t1)),
        _ => panic!("unknown pair {name}"),
    }
}

//! Tamper masks: sampling, Otsu binarisation, morphological refinement,
//! rectification and the per-level pyramid used by local feature sharing.
//!
//! Polarity is fixed crate-wide: `1` marks a tampered pixel, `0` an intact
//! one. Binary masks are stored as `{0.0, 1.0}` reals.

use std::collections::VecDeque;

use imuge_tensor::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, shape_err, Result};

/// Value written into removed (tampered) pixels by [`rectify`]: mid-gray in
/// the `[-1, 1]` image domain.
pub const RECTIFY_FILL: f64 = 0.0;

/// Default structuring-element size for [`refine_mask`].
pub const REFINE_KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(format!(
                "mask data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    /// Accepts `[h, w]`, `[1, h, w]` or `[1, 1, h, w]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            other => return Err(shape_err(format!("not a single mask: {other:?}"))),
        };
        Self::from_vec(h, w, t.data().to_vec())
    }

    /// Split an `[n, 1, h, w]` tensor into `n` masks.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let (n, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(shape_err(format!("mask batch must have one channel, got {c}")));
        }
        (0..n)
            .map(|i| Self::from_vec(h, w, t.data()[i * h * w..(i + 1) * h * w].to_vec()))
            .collect()
    }

    /// `[1, 1, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone()).expect("consistent size")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Fraction of tampered pixels (the RST of a binary mask).
    pub fn fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len().max(1) as f64
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(shape_err("mask union size mismatch"));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a.max(*b)).collect(),
        })
    }
}

/// Stack masks into an `[n, 1, h, w]` tensor.
pub fn stack_masks(masks: &[Mask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| shape_err("no masks to stack"))?;
    let mut data = Vec::with_capacity(masks.len() * first.data.len());
    for m in masks {
        if m.dims() != first.dims() {
            return Err(shape_err("masks differ in size"));
        }
        data.extend_from_slice(&m.data);
    }
    Ok(Tensor::from_vec(&[masks.len(), 1, first.height, first.width], data)?)
}

/// Interval of area fractions. Half-open `[lo, hi)`; the degenerate
/// `[0, 0]` admits exactly zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        if self.lo == self.hi {
            v == self.lo
        } else {
            v >= self.lo && v < self.hi
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo >= self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionShape {
    Rectangle,
    Ellipse,
}

/// Controls the size and number of sampled tamper regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Total tampered area over image area.
    pub rst: Interval,
    /// Largest single region over image area.
    pub rlt: Interval,
    /// Inclusive bounds on the number of regions.
    pub count: (usize, usize),
    pub shape: RegionShape,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self::training()
    }
}

impl MaskSpec {
    pub fn training() -> Self {
        Self {
            rst: Interval::new(0.05, 0.3),
            rlt: Interval::new(0.03, 0.25),
            count: (1, 4),
            shape: RegionShape::Rectangle,
        }
    }

    /// Tamper sizes of the human-participated field study.
    pub fn field_study() -> Self {
        Self {
            rst: Interval::new(0.1, 0.5),
            rlt: Interval::new(0.1, 0.25),
            count: (1, 4),
            shape: RegionShape::Rectangle,
        }
    }

    pub fn empty() -> Self {
        Self {
            rst: Interval::new(0.0, 0.0),
            rlt: Interval::new(0.0, 0.0),
            count: (1, 1),
            shape: RegionShape::Rectangle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [("rst", self.rst), ("rlt", self.rlt)] {
            let degenerate_zero = iv.lo == 0.0 && iv.hi == 0.0;
            if !(0.0..=1.0).contains(&iv.lo) || !(0.0..=1.0).contains(&iv.hi) || (iv.lo >= iv.hi && !degenerate_zero) {
                return Err(config_err(format!("{name} interval [{}, {}) is invalid", iv.lo, iv.hi)));
            }
        }
        if self.count.0 == 0 || self.count.0 > self.count.1 {
            return Err(config_err(format!("region count range {:?} is invalid", self.count)));
        }
        Ok(())
    }
}

const MAX_MASK_ATTEMPTS: usize = 2000;
const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    /// True when the rectangles overlap or touch (4-neighbourhood).
    fn near(&self, o: &Rect) -> bool {
        let sep_y = self.y + self.h < o.y || o.y + o.h < self.y;
        let sep_x = self.x + self.w < o.x || o.x + o.w < self.x;
        !(sep_y || sep_x)
    }
}

/// Sample a binary tamper mask whose total tampered fraction lies in
/// `spec.rst` and whose largest 4-connected region lies in `spec.rlt`.
/// Every returned mask satisfies both bounds; an infeasible spec fails with
/// a configuration error after a bounded number of attempts.
pub fn sample_tamper_mask(rng: &mut impl Rng, spec: &MaskSpec, h: usize, w: usize) -> Result<Mask> {
    spec.validate()?;
    if spec.rst.hi == 0.0 {
        return Ok(Mask::zeros(h, w));
    }
    let total_px = (h * w) as f64;
    for _ in 0..MAX_MASK_ATTEMPTS {
        let n = rng.random_range(spec.count.0..=spec.count.1);
        let largest = spec.rlt.sample(rng).min(spec.rst.hi);
        let total = if n == 1 {
            largest
        } else {
            let lo = spec.rst.lo.max(largest);
            if lo >= spec.rst.hi {
                continue;
            }
            rng.random_range(lo..spec.rst.hi)
        };
        let mut areas = vec![largest];
        if n > 1 {
            let weights: Vec<f64> = (1..n).map(|_| rng.random_range(0.2..1.0)).collect();
            let sum: f64 = weights.iter().sum();
            let rest = total - largest;
            areas.extend(weights.iter().map(|wt| rest * wt / sum));
            if areas[1..].iter().any(|&a| a > largest || a * total_px < 4.0) {
                continue;
            }
        }
        let Some(rects) = place_regions(rng, &areas, h, w, spec.shape) else {
            continue;
        };
        let mask = rasterize(&rects, h, w, spec.shape);
        if spec.rst.contains(mask.fraction()) && spec.rlt.contains(largest_region_fraction(&mask)) {
            return Ok(mask);
        }
    }
    Err(config_err(format!(
        "could not sample a mask with rst {:?} and rlt {:?} within {MAX_MASK_ATTEMPTS} attempts",
        spec.rst, spec.rlt
    )))
}

fn place_regions(rng: &mut impl Rng, areas: &[f64], h: usize, w: usize, shape: RegionShape) -> Option<Vec<Rect>> {
    let total_px = (h * w) as f64;
    // an inscribed ellipse covers pi/4 of its box
    let box_scale = match shape {
        RegionShape::Rectangle => 1.0,
        RegionShape::Ellipse => 4.0 / std::f64::consts::PI,
    };
    let mut placed: Vec<Rect> = Vec::with_capacity(areas.len());
    for &a in areas {
        let px = (a * total_px * box_scale).max(1.0);
        let aspect = rng.random_range(0.5f64.ln()..2.0f64.ln()).exp();
        let rh = ((px * aspect).sqrt().round() as usize).clamp(1, h);
        let rw = ((px / rh as f64).round() as usize).clamp(1, w);
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let cand = Rect {
                y: rng.random_range(0..=h - rh),
                x: rng.random_range(0..=w - rw),
                h: rh,
                w: rw,
            };
            if placed.iter().all(|p| !p.near(&cand)) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

fn rasterize(rects: &[Rect], h: usize, w: usize, shape: RegionShape) -> Mask {
    let mut m = Mask::zeros(h, w);
    for r in rects {
        let (cy, cx) = (r.y as f64 + r.h as f64 / 2.0, r.x as f64 + r.w as f64 / 2.0);
        let (ry, rx) = (r.h as f64 / 2.0, r.w as f64 / 2.0);
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let inside = match shape {
                    RegionShape::Rectangle => true,
                    RegionShape::Ellipse => {
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        dy * dy + dx * dx <= 1.0
                    }
                };
                if inside {
                    m.set(y, x, 1.0);
                }
            }
        }
    }
    m
}

/// Sizes of the 4-connected regions of nonzero pixels.
pub fn region_sizes(mask: &Mask) -> Vec<usize> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || mask.data[start] == 0.0 {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && mask.data[q] != 0.0 {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }
    sizes
}

/// Largest 4-connected region over image area (the RLT of a binary mask).
pub fn largest_region_fraction(mask: &Mask) -> f64 {
    let largest = region_sizes(mask).into_iter().max().unwrap_or(0);
    largest as f64 / mask.data.len().max(1) as f64
}

pub const OTSU_BINS: usize = 256;

fn otsu_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

/// 256-bin histogram of a soft mask over `[0, 1]`.
pub fn otsu_histogram(mask: &Mask) -> [u64; OTSU_BINS] {
    let mut hist = [0u64; OTSU_BINS];
    for &v in &mask.data {
        hist[otsu_bin(v)] += 1;
    }
    hist
}

/// Between-class variance for the split "bins `0..=t`" versus the rest,
/// from integer class counts and bin-index sums.
pub fn between_class_variance(w0: u64, sum0: u64, w1: u64, sum1: u64) -> f64 {
    let (w0f, w1f) = (w0 as f64, w1 as f64);
    let mu0 = sum0 as f64 / w0f;
    let mu1 = sum1 as f64 / w1f;
    w0f * w1f * (mu0 - mu1) * (mu0 - mu1)
}

/// Otsu's threshold as a histogram bin: pixels in bins `0..=t` form the
/// intact class. `None` when no split leaves both classes nonempty.
pub fn otsu_threshold_bin(mask: &Mask) -> Option<usize> {
    let hist = otsu_histogram(mask);
    let total: u64 = hist.iter().sum();
    let total_sum: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut w0, mut sum0) = (0u64, 0u64);
    let mut best: Option<(usize, (u128, u128))> = None;
    for (t, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c;
        sum0 += t as u64 * c;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let var = variance_fraction(w0, sum0, w1, total_sum - sum0);
        if best.is_none_or(|(_, b)| fraction_gt(var, b)) {
            best = Some((t, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Between-class variance as the exact fraction
/// `(w1 sum0 - w0 sum1)^2 / (w0 w1)`.
fn variance_fraction(w0: u64, sum0: u64, w1: u64, sum1: u64) -> (u128, u128) {
    let d = (u128::from(w1) * u128::from(sum0)).abs_diff(u128::from(w0) * u128::from(sum1));
    (d * d, u128::from(w0) * u128::from(w1))
}

/// `a > b` for fractions, exact unless the cross products overflow.
fn fraction_gt(a: (u128, u128), b: (u128, u128)) -> bool {
    match (a.0.checked_mul(b.1), b.0.checked_mul(a.1)) {
        (Some(l), Some(r)) => l > r,
        _ => a.0 as f64 / a.1 as f64 > b.0 as f64 / b.1 as f64,
    }
}

/// Binarise a soft mask with Otsu's threshold. A mask with no usable split
/// (e.g. constant input) carries no tamper evidence and maps to all zeros.
pub fn binarize_otsu(mask: &Mask) -> Mask {
    let Some(t) = otsu_threshold_bin(mask) else {
        return Mask::zeros(mask.height, mask.width);
    };
    Mask {
        height: mask.height,
        width: mask.width,
        data: mask
            .data
            .iter()
            .map(|&v| if otsu_bin(v) > t { 1.0 } else { 0.0 })
            .collect(),
    }
}

/// Offsets of a `k×k` square structuring element anchored at `k / 2`.
fn element_offsets(k: usize) -> std::ops::RangeInclusive<isize> {
    let a = (k / 2) as isize;
    -a..=(k as isize - 1 - a)
}

/// Binary erosion: a pixel survives when every in-image pixel under the
/// element is set. Pixels outside the image do not erode.
pub fn erode(mask: &Mask, k: usize) -> Mask {
    morph(mask, k, true)
}

/// Binary dilation by the reflected element, so `dilate(erode(m))` is a
/// morphological opening.
pub fn dilate(mask: &Mask, k: usize) -> Mask {
    morph(mask, k, false)
}

fn morph(mask: &Mask, k: usize, erosion: bool) -> Mask {
    let (h, w) = mask.dims();
    let offs = element_offsets(k.max(1));
    let sign = if erosion { 1 } else { -1 };
    // separable: rows then columns
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = if erosion { 1.0f64 } else { 0.0f64 };
                for d in offs.clone() {
                    let (yy, xx) = if along_x {
                        (y as isize, x as isize + sign * d)
                    } else {
                        (y as isize + sign * d, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let v = src[yy as usize * w + xx as usize];
                    acc = if erosion { acc.min(v) } else { acc.max(v) };
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let rows = pass(&mask.data, true);
    Mask {
        height: h,
        width: w,
        data: pass(&rows, false),
    }
}

/// Erosion followed by dilation with the same `k×k` square.
pub fn opening(mask: &Mask, k: usize) -> Mask {
    dilate(&erode(mask, k), k)
}

/// Remove isolated false positives with an opening, then grow the surviving
/// regions by one extra `k×k` dilation.
pub fn refine_mask(mask: &Mask, k: usize) -> Mask {
    dilate(&opening(mask, k), k)
}

/// Otsu binarisation followed by [`refine_mask`] with the default kernel.
pub fn localize(soft: &Mask) -> Mask {
    refine_mask(&binarize_otsu(soft), REFINE_KERNEL)
}

/// Remove the tampered content: tampered pixels become [`RECTIFY_FILL`],
/// all others pass through. `mask` is `[n, 1, h, w]` and binary.
pub fn rectify<'g>(attacked: Var<'g>, mask: &Tensor) -> Result<Var<'g>> {
    let (n, _, h, w) = attacked.dims4()?;
    let (mn, mc, mh, mw) = mask.dims4()?;
    if (mn, mc, mh, mw) != (n, 1, h, w) {
        return Err(shape_err(format!(
            "rectify: mask {:?} does not match image {:?}",
            mask.shape(),
            attacked.shape()
        )));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(contract_err("rectify expects a binary mask"));
    }
    let g = attacked.graph();
    let keep = g.constant(mask.map(|m| 1.0 - m));
    let kept = attacked.mul(keep)?;
    if RECTIFY_FILL == 0.0 {
        return Ok(kept);
    }
    Ok(kept.add(g.constant(mask.map(|m| m * RECTIFY_FILL)))?)
}

/// Nearest-neighbour downsampling by `2^(level-1)`, matching the spatial
/// size of backbone level `level`.
pub fn downsample_mask(mask: &Mask, level: usize) -> Result<Mask> {
    if !(1..=4).contains(&level) {
        return Err(contract_err(format!("mask level {level} outside 1..=4")));
    }
    let f = 1usize << (level - 1);
    let (h, w) = mask.dims();
    if h % f != 0 || w % f != 0 {
        return Err(shape_err(format!("{h}x{w} mask not divisible by {f}")));
    }
    Ok(Mask::from_fn(h / f, w / f, |y, x| mask.get(y * f, x * f)))
}

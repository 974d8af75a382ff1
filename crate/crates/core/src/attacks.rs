//! The attacking layer: malicious tampers composed by mask, followed by one
//! benign distortion. Everything acts on `[n, 3, h, w]` images in `[-1, 1]`
//! and stays differentiable with respect to the image.

use imuge_tensor::{Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, shape_err, Result};
use crate::masks::{stack_masks, Mask};

pub const AWGN_SIGMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperKind {
    ReplaceImage,
    FillColor,
    CloneStamp,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenignKind {
    Awgn,
    Blur,
    Rescale,
    Jpeg,
    Crop,
    Identity,
}

impl BenignKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Awgn => "awgn",
            Self::Blur => "blur",
            Self::Rescale => "rescale",
            Self::Jpeg => "jpeg",
            Self::Crop => "crop",
            Self::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "awgn" => Self::Awgn,
            "blur" => Self::Blur,
            "rescale" | "scale" => Self::Rescale,
            "jpeg" => Self::Jpeg,
            "crop" => Self::Crop,
            "identity" | "none" => Self::Identity,
            other => return Err(contract_err(format!("unknown benign attack '{other}'"))),
        })
    }
}

impl TamperKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "replace" | "replace_image" => Self::ReplaceImage,
            "fill" | "fill_color" => Self::FillColor,
            "clone" | "clone_stamp" => Self::CloneStamp,
            "none" => Self::None,
            other => return Err(contract_err(format!("unknown tamper '{other}'"))),
        })
    }
}

/// Rounding used inside the JPEG simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Exact rounding forward, identity gradient.
    StraightThrough,
    /// `round(x) + (x - round(x))^3`.
    Cubic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub sigma: f64,
    pub kernel: usize,
    pub scale: f64,
    pub quality: u8,
    pub crop_keep: f64,
    pub shift: (isize, isize),
    pub fill: [f64; 3],
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            sigma: AWGN_SIGMA,
            kernel: 3,
            scale: 1.0,
            quality: 90,
            crop_keep: 1.0,
            shift: (0, 0),
            fill: [0.0; 3],
        }
    }
}

/// One tamper mode, one benign distortion and their parameters. Tampering
/// always happens first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub tamper: TamperKind,
    pub benign: BenignKind,
    pub params: AttackParams,
    pub seed: u64,
}

impl AttackPlan {
    pub fn identity() -> Self {
        Self {
            tamper: TamperKind::None,
            benign: BenignKind::Identity,
            params: AttackParams::default(),
            seed: 0,
        }
    }

    pub fn is_skip(&self) -> bool {
        self.tamper == TamperKind::None && self.benign == BenignKind::Identity
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if !(p.sigma >= 0.0) {
            return Err(contract_err("awgn sigma must be nonnegative"));
        }
        if self.benign == BenignKind::Blur && (p.kernel == 0 || p.kernel.is_multiple_of(2)) {
            return Err(contract_err(format!("blur kernel {} must be odd", p.kernel)));
        }
        if self.benign == BenignKind::Rescale && !(p.scale > 0.0) {
            return Err(contract_err(format!("scale ratio {} must be positive", p.scale)));
        }
        if self.benign == BenignKind::Jpeg && !(1..=100).contains(&p.quality) {
            return Err(contract_err(format!("quality {} outside 1..=100", p.quality)));
        }
        if self.benign == BenignKind::Crop && !(p.crop_keep > 0.0 && p.crop_keep <= 1.0) {
            return Err(contract_err(format!("crop keep fraction {} outside (0, 1]", p.crop_keep)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub benign: Vec<BenignKind>,
    pub tampers: Vec<TamperKind>,
    pub p_skip: f64,
    pub quality: (u8, u8),
    pub scale: (f64, f64),
    pub blur_kernels: Vec<usize>,
    pub rounding: Rounding,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            benign: vec![BenignKind::Awgn, BenignKind::Blur, BenignKind::Rescale, BenignKind::Jpeg],
            tampers: vec![TamperKind::ReplaceImage, TamperKind::FillColor, TamperKind::CloneStamp],
            p_skip: 0.2,
            quality: (50, 95),
            scale: (0.5, 2.0),
            blur_kernels: vec![3, 5],
            rounding: Rounding::StraightThrough,
        }
    }
}

/// Draw a plan for an `h×w` image: uniform over enabled kinds, or the
/// skip plan with probability `p_skip`.
pub fn sample_attack_plan(rng: &mut impl Rng, cfg: &AttackConfig, h: usize, w: usize) -> Result<AttackPlan> {
    if cfg.benign.is_empty() || cfg.tampers.is_empty() {
        return Err(config_err("attack config enables no benign kinds or no tampers"));
    }
    if cfg.blur_kernels.is_empty() || cfg.quality.0 > cfg.quality.1 || cfg.scale.0 > cfg.scale.1 {
        return Err(config_err("attack parameter ranges are empty"));
    }
    let skip = rng.random_bool(cfg.p_skip.clamp(0.0, 1.0));
    let benign = *cfg.benign.choose(rng).expect("nonempty");
    let tamper = *cfg.tampers.choose(rng).expect("nonempty");
    let shift_axis = |rng: &mut dyn rand::RngCore, n: usize| -> isize {
        let lo = (n / 8).max(1);
        let hi = (n / 2).max(lo);
        rng.random_range(lo..=hi) as isize
    };
    let params = AttackParams {
        sigma: AWGN_SIGMA,
        kernel: *cfg.blur_kernels.choose(rng).expect("nonempty"),
        scale: if cfg.scale.0 < cfg.scale.1 {
            rng.random_range(cfg.scale.0..=cfg.scale.1)
        } else {
            cfg.scale.0
        },
        quality: rng.random_range(cfg.quality.0..=cfg.quality.1),
        crop_keep: *[0.9, 0.7, 0.5].choose(rng).expect("nonempty"),
        shift: (shift_axis(rng, h), shift_axis(rng, w)),
        fill: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
    };
    let seed = rng.random();
    Ok(if skip {
        AttackPlan {
            tamper: TamperKind::None,
            benign: BenignKind::Identity,
            params,
            seed,
        }
    } else {
        AttackPlan {
            tamper,
            benign,
            params,
            seed,
        }
    })
}

fn check_mask(img: &Var<'_>, m: &Tensor) -> Result<()> {
    let (n, _, h, w) = img.dims4()?;
    if m.shape() != [n, 1, h, w] {
        return Err(shape_err(format!("mask {:?} does not match image {:?}", m.shape(), img.shape())));
    }
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(contract_err("tamper mask must be binary"));
    }
    Ok(())
}

/// `I_A = I_irr * M + I_M * (1 - M)` per pixel; `mask` is `[n, 1, h, w]`.
pub fn apply_tamper<'g>(immunized: Var<'g>, irrelevant: Var<'g>, mask: &Tensor) -> Result<Var<'g>> {
    check_mask(&immunized, mask)?;
    if immunized.shape() != irrelevant.shape() {
        return Err(shape_err("tamper source and immunized image differ in shape"));
    }
    let g = immunized.graph();
    let m = g.constant(mask.clone());
    let keep = g.constant(mask.map(|v| 1.0 - v));
    Ok(irrelevant.mul(m)?.add(immunized.mul(keep)?)?)
}

/// The content pasted into the tampered region. `donor` is an unrelated
/// image of the same shape, needed only for `ReplaceImage`.
pub fn tamper_source<'g>(immunized: Var<'g>, plan: &AttackPlan, donor: Option<&Tensor>) -> Result<Var<'g>> {
    let g = immunized.graph();
    let (n, c, h, w) = immunized.dims4()?;
    match plan.tamper {
        TamperKind::None => Ok(immunized),
        TamperKind::CloneStamp => Ok(immunized.roll(plan.params.shift.0, plan.params.shift.1)?),
        TamperKind::FillColor => {
            let fill = plan.params.fill;
            Ok(g.constant(Tensor::from_fn(&[n, c, h, w], |i| fill[(i / (h * w)) % 3])))
        }
        TamperKind::ReplaceImage => {
            let d = donor.ok_or_else(|| contract_err("image replacement needs a donor image"))?;
            if d.shape() != [n, c, h, w] {
                return Err(shape_err("donor image shape mismatch"));
            }
            Ok(g.constant(d.clone()))
        }
    }
}

/// Depthwise Gaussian blur with `sigma = k / 3` and reflected borders.
pub fn gaussian_blur<'g>(img: Var<'g>, k: usize) -> Result<Var<'g>> {
    if k.is_multiple_of(2) {
        return Err(contract_err(format!("blur kernel {k} must be odd")));
    }
    if k == 1 {
        return Ok(img);
    }
    let (n, c, h, w) = img.dims4()?;
    let sigma = k as f64 / 3.0;
    let r = (k / 2) as f64;
    let taps: Vec<f64> = (0..k).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let kernel = Tensor::from_fn(&[1, 1, k, k], |i| taps[i / k] * taps[i % k] / (total * total));
    let g = img.graph();
    let planes = img.reshape(&[n * c, 1, h, w])?.pad_reflect(k / 2, k / 2, k / 2, k / 2)?;
    let y = planes.conv2d(g.constant(kernel), None, 1, 0, 1)?;
    Ok(y.reshape(&[n, c, h, w])?)
}

/// Bilinear resize to `ratio` of the size and back.
pub fn rescale_roundtrip<'g>(img: Var<'g>, ratio: f64) -> Result<Var<'g>> {
    if !(ratio > 0.0) {
        return Err(contract_err(format!("scale ratio {ratio} must be positive")));
    }
    let (_, _, h, w) = img.dims4()?;
    let hs = ((h as f64 * ratio).round() as usize).max(1);
    let ws = ((w as f64 * ratio).round() as usize).max(1);
    if (hs, ws) == (h, w) {
        return Ok(img);
    }
    Ok(img.resize_bilinear(hs, ws)?.resize_bilinear(h, w)?)
}

/// Zero-mean Gaussian noise of the plan's sigma, seeded by the plan.
pub fn awgn_noise(shape: &[usize], sigma: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    Tensor::from_fn(shape, |_| dist.sample(&mut rng))
}

pub const LUMA_QTABLE: [u8; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

pub const CHROMA_QTABLE: [u8; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quality-scaled quantisation table (libjpeg convention).
pub fn scaled_qtable(base: &[u8; 64], quality: u8) -> [f64; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];
const YCC_TO_RGB: [[f64; 3]; 3] = [[1.0, 0.0, 1.402], [1.0, -0.344136, -0.714136], [1.0, 1.772, 0.0]];

fn round_with<'g>(x: Var<'g>, r: Rounding) -> Var<'g> {
    match r {
        Rounding::StraightThrough => x.round_ste(),
        Rounding::Cubic => x.round_cubic(),
    }
}

/// Differentiable JPEG: colour transform, 8×8 block DCT, quantisation with
/// the quality-scaled standard tables, dequantisation, inverse DCT and
/// 8-bit pixel rounding. Chroma is kept at full resolution. Images whose
/// sides are not multiples of 8 are reflect-padded and cropped back.
pub fn diff_jpeg<'g>(img: Var<'g>, quality: u8, rounding: Rounding) -> Result<Var<'g>> {
    if !(1..=100).contains(&quality) {
        return Err(contract_err(format!("quality {quality} outside 1..=100")));
    }
    let (_, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(shape_err(format!("jpeg needs 3 channels, got {c}")));
    }
    let (hp, wp) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let x = if (hp, wp) != (h, w) {
        img.pad_reflect(0, hp - h, 0, wp - w)?
    } else {
        img
    };
    let g = img.graph();
    let to_ycc: Vec<Vec<f64>> = RGB_TO_YCC.iter().map(|r| r.to_vec()).collect();
    let to_rgb: Vec<Vec<f64>> = YCC_TO_RGB.iter().map(|r| r.to_vec()).collect();
    // pixels in [0, 255]; luma level-shifted, chroma already centred
    let ycc = x.affine(127.5, 127.5).channel_mix(&to_ycc, &[-128.0, 0.0, 0.0])?;
    let coef = ycc.block_dct8(false)?;
    let luma = scaled_qtable(&LUMA_QTABLE, quality);
    let chroma = scaled_qtable(&CHROMA_QTABLE, quality);
    let table = Tensor::from_fn(&[1, 3, hp, wp], |i| {
        let ch = i / (hp * wp);
        let (y, xx) = ((i / wp) % hp, i % wp);
        let t = if ch == 0 { &luma } else { &chroma };
        t[(y % 8) * 8 + xx % 8]
    });
    let quantised = round_with(coef.mul(g.constant(table.map(|q| 1.0 / q)))?, rounding);
    let restored = quantised.mul(g.constant(table))?.block_dct8(true)?;
    let rgb = restored.channel_mix(&to_rgb, &[128.0, 128.0, 128.0])?;
    let pixels = round_with(rgb, rounding).clamp(0.0, 255.0);
    let out = pixels.affine(1.0 / 127.5, -1.0);
    if (hp, wp) != (h, w) {
        Ok(out.crop(0, 0, h, w)?)
    } else {
        Ok(out)
    }
}

/// Window of `keep` of the image area, aspect ratio in `[0.5, 2]`,
/// positioned by `rng`. Returns `(y0, x0, ch, cw)`.
pub fn crop_window(rng: &mut impl Rng, h: usize, w: usize, keep: f64) -> Result<(usize, usize, usize, usize)> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(contract_err(format!("crop keep fraction {keep} outside (0, 1]")));
    }
    if keep == 1.0 {
        return Ok((0, 0, h, w));
    }
    let target = keep * (h * w) as f64;
    let mut best: Option<(f64, usize, usize)> = None;
    for ch in 1..=h {
        let cw = ((target / ch as f64).round() as usize).clamp(1, w);
        let aspect = ch as f64 / cw as f64;
        if !(0.5..=2.0).contains(&aspect) {
            continue;
        }
        let err = ((ch * cw) as f64 - target).abs();
        if best.is_none_or(|(e, _, _)| err < e) {
            best = Some((err, ch, cw));
        }
    }
    let (_, ch, cw) = best.ok_or_else(|| contract_err("no crop window with a moderate aspect ratio"))?;
    Ok((rng.random_range(0..=h - ch), rng.random_range(0..=w - cw), ch, cw))
}

/// Keep a random window of `keep` of the area; everything outside turns
/// mid-gray and is marked tampered in the returned mask.
pub fn crop_attack<'g>(img: Var<'g>, keep: f64, rng: &mut impl Rng) -> Result<(Var<'g>, Mask)> {
    let (n, _, h, w) = img.dims4()?;
    let (y0, x0, ch, cw) = crop_window(rng, h, w, keep)?;
    let outside = Mask::from_fn(h, w, |y, x| {
        if (y0..y0 + ch).contains(&y) && (x0..x0 + cw).contains(&x) {
            0.0
        } else {
            1.0
        }
    });
    if outside.count_ones() == 0 {
        return Ok((img, outside));
    }
    let keep_t = Tensor::from_fn(&[n, 1, h, w], |i| 1.0 - outside.data()[i % (h * w)]);
    let out = img.mul(img.graph().constant(keep_t))?;
    Ok((out, outside))
}

/// One benign distortion; crop is handled by [`execute_plan`] because it
/// also changes the ground-truth mask.
pub fn apply_benign<'g>(img: Var<'g>, plan: &AttackPlan, rounding: Rounding) -> Result<Var<'g>> {
    plan.validate()?;
    let p = &plan.params;
    let out = match plan.benign {
        BenignKind::Identity => return Ok(img),
        BenignKind::Awgn => {
            let noise = awgn_noise(&img.shape(), p.sigma, plan.seed);
            img.add(img.graph().constant(noise))?
        }
        BenignKind::Blur => gaussian_blur(img, p.kernel)?,
        BenignKind::Rescale => rescale_roundtrip(img, p.scale)?,
        BenignKind::Jpeg => diff_jpeg(img, p.quality, rounding)?,
        BenignKind::Crop => crop_attack(img, p.crop_keep, &mut ChaCha8Rng::seed_from_u64(plan.seed))?.0,
    };
    Ok(out.clamp(-1.0, 1.0))
}

/// Steps performed by [`execute_plan`], in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackStep {
    Tamper(TamperKind),
    Benign(BenignKind),
}

pub struct Attacked<'g> {
    pub image: Var<'g>,
    /// Ground truth `[1, 1, h, w]`: the tamper region plus any cropped-out area.
    pub mask: Mask,
    pub trace: Vec<AttackStep>,
}

/// Tamper a single `[1, 3, h, w]` image with `region`, then apply the benign
/// distortion.
pub fn execute_plan<'g>(
    immunized: Var<'g>,
    plan: &AttackPlan,
    region: &Mask,
    donor: Option<&Tensor>,
    rounding: Rounding,
) -> Result<Attacked<'g>> {
    plan.validate()?;
    let (n, _, h, w) = immunized.dims4()?;
    if n != 1 {
        return Err(shape_err("execute_plan works on one image"));
    }
    if region.dims() != (h, w) {
        return Err(shape_err("tamper region size mismatch"));
    }
    let mut trace = Vec::with_capacity(2);
    let (tampered, mut mask) = if plan.tamper == TamperKind::None {
        (immunized, Mask::zeros(h, w))
    } else {
        let src = tamper_source(immunized, plan, donor)?;
        (apply_tamper(immunized, src, &region.to_tensor())?, region.clone())
    };
    trace.push(AttackStep::Tamper(plan.tamper));
    let image = if plan.benign == BenignKind::Crop {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let (img, outside) = crop_attack(tampered, plan.params.crop_keep, &mut rng)?;
        mask = mask.union(&outside)?;
        img
    } else {
        apply_benign(tampered, plan, rounding)?
    };
    trace.push(AttackStep::Benign(plan.benign));
    Ok(Attacked { image, mask, trace })
}

/// Batch version: item `i` uses `plans[i]`, `regions[i]` and, for image
/// replacement, `donors` item `i`. Returns the attacked batch and the
/// `[n, 1, h, w]` ground-truth masks.
pub fn execute_batch<'g>(
    immunized: Var<'g>,
    plans: &[AttackPlan],
    regions: &[Mask],
    donors: Option<&Tensor>,
    rounding: Rounding,
) -> Result<(Var<'g>, Tensor)> {
    let (n, _, _, _) = immunized.dims4()?;
    if plans.len() != n || regions.len() != n {
        return Err(shape_err(format!("{n} images but {} plans and {} masks", plans.len(), regions.len())));
    }
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let donor = donors.map(|d| d.batch_item(i)).transpose()?;
        let out = execute_plan(immunized.narrow_batch(i, 1)?, &plans[i], &regions[i], donor.as_ref(), rounding)?;
        images.push(out.image);
        masks.push(out.mask);
    }
    let image = if n == 1 { images[0] } else { Var::concat_batch(&images)? };
    Ok((image, stack_masks(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use imuge_tensor::Graph;

    fn image(seed: u64, h: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, h], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_plan_is_exact() {
        let g = Graph::inference();
        let x = g.constant(image(1, 16));
        let y = apply_benign(x, &AttackPlan::identity(), Rounding::StraightThrough).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn awgn_statistics() {
        let n = awgn_noise(&[1, 1, 256, 256], AWGN_SIGMA, 7);
        let mean = n.mean();
        let std = (n.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.numel() as f64).sqrt();
        assert!(mean.abs() < 0.005, "{mean}");
        assert!((std - 0.1).abs() < 0.005, "{std}");
    }

    #[test]
    fn tamper_extremes() {
        let g = Graph::inference();
        let a = g.constant(image(2, 8));
        let b = g.constant(image(3, 8));
        let zero = Tensor::zeros(&[1, 1, 8, 8]);
        let one = Tensor::ones(&[1, 1, 8, 8]);
        assert_eq!(apply_tamper(a, b, &zero).unwrap().value(), a.value());
        assert_eq!(apply_tamper(a, b, &one).unwrap().value(), b.value());
        let soft = Tensor::full(&[1, 1, 8, 8], 0.5);
        assert!(matches!(apply_tamper(a, b, &soft), Err(crate::ImugeError::Contract(_))));
    }

    #[test]
    fn skip_probability_one_always_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AttackConfig {
            p_skip: 1.0,
            ..AttackConfig::default()
        };
        for _ in 0..100 {
            assert!(sample_attack_plan(&mut rng, &cfg, 64, 64).unwrap().is_skip());
        }
    }

    #[test]
    fn empty_config_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AttackConfig {
            benign: vec![],
            ..AttackConfig::default()
        };
        assert!(sample_attack_plan(&mut rng, &cfg, 8, 8).is_err());
    }

    #[test]
    fn benign_kinds_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AttackConfig {
            p_skip: 0.0,
            ..AttackConfig::default()
        };
        let mut counts = std::collections::HashMap::new();
        for _ in 0..10_000 {
            *counts.entry(sample_attack_plan(&mut rng, &cfg, 64, 64).unwrap().benign).or_insert(0usize) += 1;
        }
        let chi2: f64 = counts.values().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        assert_eq!(counts.len(), 4);
        for &c in counts.values() {
            assert!((c as f64 / 10_000.0 - 0.25).abs() < 0.02, "{counts:?}");
        }
        // 3 degrees of freedom, 99.9th percentile
        assert!(chi2 < 16.27, "{chi2}");
    }

    #[test]
    fn clone_shift_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = sample_attack_plan(&mut rng, &AttackConfig::default(), 64, 32).unwrap();
            assert!((8..=32).contains(&p.params.shift.0));
            assert!((4..=16).contains(&p.params.shift.1));
            assert!((50..=95).contains(&p.params.quality));
            assert!([3, 5].contains(&p.params.kernel));
            assert!((0.5..=2.0).contains(&p.params.scale));
        }
    }

    #[test]
    fn crop_keeps_area_and_content() {
        let g = Graph::inference();
        let x = g.constant(image(5, 64));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (y, m) = crop_attack(x, 0.5, &mut rng).unwrap();
        assert!((m.count_ones() as i64 - 2048).abs() <= 32, "{}", m.count_ones());
        for (i, (&a, &b)) in x.value().data().iter().zip(y.value().data()).enumerate() {
            if m.data()[i % 4096] == 0.0 {
                assert_eq!(a, b);
            } else {
                assert_eq!(b, 0.0);
            }
        }
        let (full, m1) = crop_attack(x, 1.0, &mut rng).unwrap();
        assert_eq!(full.value(), x.value());
        assert_eq!(m1.count_ones(), 0);
        assert!(crop_attack(x, 1.5, &mut rng).is_err());
    }

    #[test]
    fn executor_tampers_before_benign() {
        let g = Graph::inference();
        let x = g.constant(image(6, 16));
        let plan = AttackPlan {
            tamper: TamperKind::FillColor,
            benign: BenignKind::Blur,
            params: AttackParams {
                kernel: 5,
                ..AttackParams::default()
            },
            seed: 1,
        };
        let region = Mask::from_fn(16, 16, |y, _| (y < 4) as u8 as f64);
        let out = execute_plan(x, &plan, &region, None, Rounding::StraightThrough).unwrap();
        assert_eq!(
            out.trace,
            vec![AttackStep::Tamper(TamperKind::FillColor), AttackStep::Benign(BenignKind::Blur)]
        );
        let manual = gaussian_blur(apply_tamper(x, tamper_source(x, &plan, None).unwrap(), &region.to_tensor()).unwrap(), 5)
            .unwrap()
            .clamp(-1.0, 1.0);
        assert_eq!(out.image.value(), manual.value());
    }

    #[test]
    fn qtable_scaling() {
        assert_eq!(scaled_qtable(&LUMA_QTABLE, 50)[0], 16.0);
        assert_eq!(scaled_qtable(&LUMA_QTABLE, 100).iter().sum::<f64>(), 64.0);
        assert_eq!(scaled_qtable(&LUMA_QTABLE, 80)[0], 6.0);
        assert_eq!(scaled_qtable(&CHROMA_QTABLE, 10)[63], 255.0);
    }
}

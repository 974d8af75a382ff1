//! Four-level U-Net shared by the encoder, verifier and decoder.
//!
//! Level `k` (1-based) runs at `1/2^(k-1)` of the input resolution with
//! `base_width * 2^(k-1)` channels. Each encoding segment is two 3×3
//! conv-norm-activation layers followed by stride-2 pooling; the bottleneck
//! at 1/16 resolution is a stack of dilated convolutions; each decoding
//! segment is a 2×2 stride-2 transposed conv, a skip concatenation and two
//! 3×3 convs. A 1×1 head per level maps features to image space, which is
//! what lets the network run progressively from coarse levels.

use std::collections::BTreeMap;

use imuge_tensor::params::{he_normal, normal};
use imuge_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, shape_err, Result};

pub const LEVELS: usize = 4;
/// Levels whose skip connections are gated by the tamper mask.
pub const SHARED_LEVELS: [usize; 2] = [1, 2];
const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Instance,
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Average,
}

/// Output nonlinearity of the 1×1 heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub dilation_rates: Vec<usize>,
    pub normalization: Normalization,
    pub activation: Activation,
    pub pooling: Pooling,
    pub head: HeadActivation,
    /// Start every head at zero weight and bias.
    pub zero_head: bool,
    /// The last input channel carries the gating mask.
    #[serde(default)]
    pub mask_channel: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            base_width: 32,
            levels: LEVELS,
            dilation_rates: vec![2, 4, 8],
            normalization: Normalization::Instance,
            activation: Activation::Relu,
            pooling: Pooling::Max,
            head: HeadActivation::Tanh,
            zero_head: false,
            mask_channel: false,
        }
    }
}

impl BackboneConfig {
    pub fn new(in_channels: usize, out_channels: usize, base_width: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            base_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != LEVELS {
            return Err(config_err(format!("backbone needs {LEVELS} levels, got {}", self.levels)));
        }
        if self.base_width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err("backbone widths and channel counts must be positive"));
        }
        if self.dilation_rates.contains(&0) {
            return Err(config_err("dilation rates must be positive"));
        }
        Ok(())
    }

    /// Channels of level `k`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }
}

/// Progressive-recovery position: `stage` in `1..=4` uses levels
/// `5 - stage ..= 4`; `fade` blends the newest level in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: usize,
    pub fade: f64,
}

impl Progress {
    pub const FULL: Progress = Progress { stage: 4, fade: 1.0 };

    pub fn entry_level(&self) -> usize {
        LEVELS + 1 - self.stage
    }

    /// Downscale factor of the stage resolution relative to full size.
    pub fn scale_factor(&self) -> usize {
        1 << (LEVELS - self.stage)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct EncSegment {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Clone, Debug)]
struct DecSegment {
    up: Conv,
    conv1: Conv,
    conv2: Conv,
}

/// Intermediate features by level. `encoder[k]` is the level-`k` encoding
/// output before pooling, `upsampled[k]` the transposed-conv output arriving
/// from level `k + 1` (or the bottleneck), `shared[k]` the skip actually
/// concatenated at level `k` and `decoder[k]` the decoding segment output.
#[derive(Debug, Default)]
pub struct FeatureTaps<'g> {
    pub encoder: BTreeMap<usize, Var<'g>>,
    pub upsampled: BTreeMap<usize, Var<'g>>,
    pub shared: BTreeMap<usize, Var<'g>>,
    pub decoder: BTreeMap<usize, Var<'g>>,
}

#[derive(Clone, Debug)]
pub struct BackboneNet {
    config: BackboneConfig,
    group: String,
    enc: Vec<EncSegment>,
    bottleneck: Vec<Conv>,
    dec: Vec<DecSegment>,
    from_rgb: Vec<Option<Conv>>,
    heads: Vec<Conv>,
}

fn conv_param(
    store: &mut ParamStore,
    group: &str,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Conv {
    let w = store.add(group, &format!("{name}.w"), he_normal(&[c_out, c_in, k, k], c_in * k * k, rng));
    let b = bias.then(|| store.add(group, &format!("{name}.b"), Tensor::zeros(&[c_out])));
    Conv { w, b }
}

/// Build a backbone whose parameters live in `store` under `group`.
pub fn build_backbone(
    config: BackboneConfig,
    store: &mut ParamStore,
    group: &str,
    rng: &mut impl Rng,
) -> Result<BackboneNet> {
    config.validate()?;
    let ch = |k| config.channels(k);
    let mut enc = Vec::with_capacity(LEVELS);
    let mut from_rgb = Vec::with_capacity(LEVELS);
    for k in 1..=LEVELS {
        let c_in = if k == 1 { config.in_channels } else { ch(k - 1) };
        // convs feeding a normalisation layer carry no bias
        enc.push(EncSegment {
            conv1: conv_param(store, group, &format!("enc{k}.conv1"), ch(k), c_in, 3, false, rng),
            conv2: conv_param(store, group, &format!("enc{k}.conv2"), ch(k), ch(k), 3, false, rng),
        });
        from_rgb.push((k > 1).then(|| {
            conv_param(store, group, &format!("from_rgb{k}"), c_in, config.in_channels, 1, true, rng)
        }));
    }
    let bottleneck = config
        .dilation_rates
        .iter()
        .enumerate()
        .map(|(i, _)| conv_param(store, group, &format!("mid{}", i + 1), ch(LEVELS), ch(LEVELS), 3, false, rng))
        .collect();
    let mut dec = Vec::with_capacity(LEVELS);
    for k in 1..=LEVELS {
        let c_below = if k == LEVELS { ch(LEVELS) } else { ch(k + 1) };
        let up_w = store.add(group, &format!("dec{k}.up.w"), he_normal(&[c_below, ch(k), 2, 2], c_below, rng));
        dec.push(DecSegment {
            up: Conv { w: up_w, b: None },
            conv1: conv_param(store, group, &format!("dec{k}.conv1"), ch(k), 2 * ch(k), 3, false, rng),
            conv2: conv_param(store, group, &format!("dec{k}.conv2"), ch(k), ch(k), 3, false, rng),
        });
    }
    let heads = (1..=LEVELS)
        .map(|k| {
            let shape = [config.out_channels, ch(k), 1, 1];
            let w = if config.zero_head {
                Tensor::zeros(&shape)
            } else {
                normal(&shape, (1.0 / ch(k) as f64).sqrt(), rng)
            };
            Conv {
                w: store.add(group, &format!("head{k}.w"), w),
                b: Some(store.add(group, &format!("head{k}.b"), Tensor::zeros(&[config.out_channels]))),
            }
        })
        .collect();
    Ok(BackboneNet {
        config,
        group: group.to_string(),
        enc,
        bottleneck,
        dec,
        from_rgb,
        heads,
    })
}

/// Weights of the level-`k` encoding segment: two bias-free 3×3 convs.
pub fn segment_param_count(config: &BackboneConfig, level: usize) -> usize {
    let c_in = if level == 1 { config.in_channels } else { config.channels(level - 1) };
    let c = config.channels(level);
    9 * c_in * c + 9 * c * c
}

impl BackboneNet {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    /// Parameter ids of the level-`k` encoding segment.
    pub fn segment_params(&self, level: usize) -> Vec<ParamId> {
        let s = &self.enc[level - 1];
        [s.conv1, s.conv2].iter().flat_map(|c| std::iter::once(c.w).chain(c.b)).collect()
    }

    /// Parameter ids of every level head.
    pub fn head_params(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|c| std::iter::once(c.w).chain(c.b)).collect()
    }

    fn conv<'g>(&self, g: &'g Graph, store: &ParamStore, c: Conv, x: Var<'g>, pad: usize, dil: usize) -> Result<Var<'g>> {
        let b = c.b.map(|b| g.param(store, b));
        Ok(x.conv2d(g.param(store, c.w), b, 1, pad, dil)?)
    }

    fn norm_act<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let y = match self.config.normalization {
            Normalization::Instance => x.instance_norm(NORM_EPS)?,
            Normalization::Batch => x.batch_norm(NORM_EPS)?,
        };
        Ok(match self.config.activation {
            Activation::Relu => y.relu(),
            Activation::LeakyRelu => y.leaky_relu(LEAKY_SLOPE),
        })
    }

    fn block<'g>(&self, g: &'g Graph, store: &ParamStore, c: Conv, x: Var<'g>, dil: usize) -> Result<Var<'g>> {
        self.norm_act(self.conv(g, store, c, x, dil, dil)?)
    }

    fn pool<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        Ok(match self.config.pooling {
            Pooling::Max => x.max_pool2()?,
            Pooling::Average => x.avg_pool(2)?,
        })
    }

    fn head<'g>(&self, g: &'g Graph, store: &ParamStore, level: usize, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.conv(g, store, self.heads[level - 1], x, 0, 1)?;
        Ok(match self.config.head {
            HeadActivation::Tanh => y.tanh(),
            HeadActivation::Sigmoid => y.sigmoid(),
        })
    }

    fn check_input(&self, x: &Var<'_>, entry: usize, mask: Option<&Tensor>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(shape_err(format!("expected {} input channels, got {c}", self.config.in_channels)));
        }
        let div = 1 << (LEVELS + 1 - entry);
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(shape_err(format!("{h}x{w} input not divisible by {div} at entry level {entry}")));
        }
        if let Some(m) = mask {
            if m.shape() != [n, 1, h, w] {
                return Err(shape_err(format!("mask {:?} does not match input {:?}", m.shape(), x.shape())));
            }
        }
        Ok((n, h, w))
    }

    /// The U-Net body from `entry` level down to the bottleneck and back,
    /// returning level-`entry` decoder features.
    fn body<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        entry: usize,
        mask: Option<&Tensor>,
    ) -> Result<(Var<'g>, FeatureTaps<'g>)> {
        self.check_input(&x, entry, mask)?;
        let mut taps = FeatureTaps::default();
        let mut h = match self.from_rgb[entry - 1] {
            Some(c) => self.conv(g, store, c, x, 0, 1)?,
            None => x,
        };
        for k in entry..=LEVELS {
            let s = &self.enc[k - 1];
            h = self.block(g, store, s.conv1, h, 1)?;
            h = self.block(g, store, s.conv2, h, 1)?;
            taps.encoder.insert(k, h);
            h = self.pool(h)?;
        }
        for (c, &rate) in self.bottleneck.iter().zip(&self.config.dilation_rates) {
            h = self.block(g, store, *c, h, rate)?;
        }
        let mask = mask.map(|m| g.constant(m.clone()));
        for k in (entry..=LEVELS).rev() {
            let s = &self.dec[k - 1];
            let up = self.norm_act(h.conv_transpose2x2(g.param(store, s.up.w), None)?)?;
            taps.upsampled.insert(k, up);
            let enc = taps.encoder[&k];
            let skip = match mask {
                Some(m) if SHARED_LEVELS.contains(&k) => {
                    let md = m.downsample_nearest(1 << (k - entry))?;
                    up.mul(md)?.add(enc.mul(md.one_minus())?)?
                }
                _ => enc,
            };
            taps.shared.insert(k, skip);
            h = Var::concat_channels(&[skip, up])?;
            h = self.block(g, store, s.conv1, h, 1)?;
            h = self.block(g, store, s.conv2, h, 1)?;
            taps.decoder.insert(k, h);
        }
        Ok((h, taps))
    }

    /// Full-resolution pass with plain skip connections.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<(Var<'g>, FeatureTaps<'g>)> {
        let (h, taps) = self.body(g, store, x, 1, None)?;
        Ok((self.head(g, store, 1, h)?, taps))
    }

    /// Full-resolution pass whose level-1 and level-2 skips are gated by a
    /// binary `[n, 1, h, w]` mask: masked positions take the upsampled
    /// decoder features, unmasked ones the encoder features.
    pub fn forward_shared<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        mask: &Tensor,
    ) -> Result<(Var<'g>, FeatureTaps<'g>)> {
        let (h, taps) = self.body(g, store, x, 1, Some(mask))?;
        Ok((self.head(g, store, 1, h)?, taps))
    }

    /// Stage-`s` pass on an input at `1/2^(4-s)` of full resolution. With
    /// `0 < fade < 1` the output blends the new pathway with the 2× nearest
    /// upsampled output of the previous stage run on the 2× average-pooled
    /// input; both endpoints reduce to a single pathway.
    pub fn forward_progressive<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x_low: Var<'g>,
        progress: Progress,
        mask: Option<&Tensor>,
    ) -> Result<Var<'g>> {
        if !(1..=LEVELS).contains(&progress.stage) {
            return Err(shape_err(format!("stage {} outside 1..=4", progress.stage)));
        }
        if !(0.0..=1.0).contains(&progress.fade) {
            return Err(contract_err(format!("fade {} outside [0, 1]", progress.fade)));
        }
        let entry = progress.entry_level();
        let fresh = |g: &'g Graph| -> Result<Var<'g>> {
            let (h, _) = self.body(g, store, x_low, entry, mask)?;
            self.head(g, store, entry, h)
        };
        if progress.stage == 1 || progress.fade == 1.0 {
            return fresh(g);
        }
        self.check_input(&x_low, entry, mask)?;
        let prev_mask = match mask {
            Some(m) => Some(g.constant(m.clone()).downsample_nearest(2)?.value()),
            None => None,
        };
        // a mask channel is rebuilt from the nearest-downsampled mask, as
        // the previous stage was trained on binary masks
        let prev_x = match (&prev_mask, self.config.mask_channel) {
            (Some(m), true) => {
                let c = self.config.in_channels;
                Var::concat_channels(&[x_low.narrow_channels(0, c - 1)?.avg_pool(2)?, g.constant(m.clone())])?
            }
            _ => x_low.avg_pool(2)?,
        };
        let prev = self
            .forward_progressive(
                g,
                store,
                prev_x,
                Progress {
                    stage: progress.stage - 1,
                    fade: 1.0,
                },
                prev_mask.as_ref(),
            )?
            .upsample_nearest(2)?;
        if progress.fade == 0.0 {
            return Ok(prev);
        }
        let new = fresh(g)?;
        Ok(prev.mul_scalar(1.0 - progress.fade).add(new.mul_scalar(progress.fade))?)
    }
}

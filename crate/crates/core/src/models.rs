//! The Imuge networks: encoder E, verifier V, decoder R and the two
//! PatchGAN discriminators D_C (immunized vs original) and D_S (recovered
//! vs original), all holding their weights in one [`ParamStore`].

use imuge_tensor::params::he_normal;
use imuge_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, Activation, BackboneConfig, BackboneNet, HeadActivation, Normalization, Pooling, Progress};
use crate::error::{config_err, shape_err, Result};

pub const ENCODER: &str = "encoder";
pub const VERIFIER: &str = "verifier";
pub const DECODER: &str = "decoder";
pub const DISC_C: &str = "disc_c";
pub const DISC_S: &str = "disc_s";
pub const GROUPS: [&str; 5] = [ENCODER, VERIFIER, DECODER, DISC_C, DISC_S];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_width: usize,
    pub disc_width: usize,
    pub normalization: Normalization,
    pub activation: Activation,
    pub pooling: Pooling,
    pub dilation_rates: Vec<usize>,
    /// Feed the binary mask to the decoder as a fourth input channel.
    pub mask_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            disc_width: 16,
            normalization: Normalization::Instance,
            activation: Activation::Relu,
            pooling: Pooling::Max,
            dilation_rates: vec![2, 4, 8],
            mask_input: false,
        }
    }
}

impl ModelConfig {
    fn backbone(&self, in_channels: usize, out_channels: usize, head: HeadActivation, zero_head: bool) -> BackboneConfig {
        BackboneConfig {
            in_channels,
            out_channels,
            base_width: self.base_width,
            dilation_rates: self.dilation_rates.clone(),
            normalization: self.normalization,
            activation: self.activation,
            pooling: self.pooling,
            head,
            zero_head,
            ..BackboneConfig::default()
        }
    }
}

const DISC_KERNEL: usize = 4;
const DISC_PADDING: usize = 1;
const DISC_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

#[derive(Clone, Debug)]
struct DiscLayer {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    norm: bool,
}

/// Five 4×4 conv layers with strides 2, 2, 2, 1, 1 (a 70×70 receptive
/// field); least-squares scores without a final nonlinearity.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    layers: Vec<DiscLayer>,
}

/// Spatial side of the score map for an input side `n`.
pub fn patch_output_size(n: usize) -> usize {
    DISC_STRIDES
        .iter()
        .fold(n, |s, &st| (s + 2 * DISC_PADDING).saturating_sub(DISC_KERNEL) / st + 1)
}

impl PatchDiscriminator {
    pub fn build(store: &mut ParamStore, group: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if width == 0 {
            return Err(config_err("discriminator width must be positive"));
        }
        let chans = [3, width, 2 * width, 4 * width, 8 * width, 1];
        let layers = DISC_STRIDES
            .iter()
            .enumerate()
            .map(|(i, &stride)| {
                let (ci, co) = (chans[i], chans[i + 1]);
                let norm = i != 0 && i != DISC_STRIDES.len() - 1;
                let w = store.add(
                    group,
                    &format!("conv{}.w", i + 1),
                    he_normal(&[co, ci, DISC_KERNEL, DISC_KERNEL], ci * DISC_KERNEL * DISC_KERNEL, rng),
                );
                let b = (!norm).then(|| store.add(group, &format!("conv{}.b", i + 1), Tensor::zeros(&[co])));
                DiscLayer { w, b, stride, norm }
            })
            .collect();
        Ok(Self { layers })
    }

    /// `[n, 1, s, s]` patch scores.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, img: Var<'g>) -> Result<Var<'g>> {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 || patch_output_size(h.min(w)) < 1 || h < 16 || w < 16 {
            return Err(shape_err(format!("discriminator needs a 3-channel image of at least 16x16, got {:?}", img.shape())));
        }
        let last = self.layers.len() - 1;
        let mut x = img;
        for (i, l) in self.layers.iter().enumerate() {
            let b = l.b.map(|b| g.param(store, b));
            x = x.conv2d(g.param(store, l.w), b, l.stride, DISC_PADDING, 1)?;
            if l.norm {
                x = x.instance_norm(1e-5)?;
            }
            if i != last {
                x = x.leaky_relu(0.2);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Disc {
    /// Immunized vs original.
    C,
    /// Recovered vs original.
    S,
}

#[derive(Clone, Debug)]
pub struct ImugeModel {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub encoder: BackboneNet,
    pub verifier: BackboneNet,
    pub decoder: BackboneNet,
    pub disc_c: PatchDiscriminator,
    pub disc_s: PatchDiscriminator,
}

impl ImugeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // the residual head starts at zero, so immunization starts as the identity
        let encoder = build_backbone(config.backbone(3, 3, HeadActivation::Tanh, true), &mut store, ENCODER, &mut rng)?;
        let verifier = build_backbone(config.backbone(3, 1, HeadActivation::Sigmoid, false), &mut store, VERIFIER, &mut rng)?;
        let dec_in = if config.mask_input { 4 } else { 3 };
        let decoder_cfg = BackboneConfig {
            mask_channel: config.mask_input,
            ..config.backbone(dec_in, 3, HeadActivation::Tanh, false)
        };
        let decoder = build_backbone(decoder_cfg, &mut store, DECODER, &mut rng)?;
        let disc_c = PatchDiscriminator::build(&mut store, DISC_C, config.disc_width, &mut rng)?;
        let disc_s = PatchDiscriminator::build(&mut store, DISC_S, config.disc_width, &mut rng)?;
        Ok(Self {
            store,
            config,
            encoder,
            verifier,
            decoder,
            disc_c,
            disc_s,
        })
    }

    pub fn group_params(&self, group: &str) -> Vec<ParamId> {
        self.store.group_ids(group)
    }

    /// `(I_M, R)` with `I_M = clamp(I + R, -1, 1)`.
    pub fn immunize<'g>(&self, g: &'g Graph, image: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (r, _) = self.encoder.forward(g, &self.store, image)?;
        Ok((image.add(r)?.clamp(-1.0, 1.0), r))
    }

    /// Soft tamper mask in `[0, 1]`, one channel.
    pub fn verify<'g>(&self, g: &'g Graph, attacked: Var<'g>) -> Result<Var<'g>> {
        Ok(self.verifier.forward(g, &self.store, attacked)?.0)
    }

    fn decoder_input<'g>(&self, g: &'g Graph, rectified: Var<'g>, mask: &Tensor) -> Result<Var<'g>> {
        if self.config.mask_input {
            Ok(Var::concat_channels(&[rectified, g.constant(mask.clone())])?)
        } else {
            Ok(rectified)
        }
    }

    /// Recovered image from the rectified image and the binary mask, with
    /// mask-gated feature sharing at the two finest levels.
    pub fn recover<'g>(&self, g: &'g Graph, rectified: Var<'g>, mask: &Tensor) -> Result<Var<'g>> {
        let x = self.decoder_input(g, rectified, mask)?;
        Ok(self.decoder.forward_shared(g, &self.store, x, mask)?.0)
    }

    /// Recovery at a progressive stage; inputs are at stage resolution.
    pub fn recover_progressive<'g>(&self, g: &'g Graph, rectified: Var<'g>, mask: &Tensor, progress: Progress) -> Result<Var<'g>> {
        let x = self.decoder_input(g, rectified, mask)?;
        self.decoder.forward_progressive(g, &self.store, x, progress, Some(mask))
    }

    pub fn discriminate<'g>(&self, g: &'g Graph, which: Disc, image: Var<'g>) -> Result<Var<'g>> {
        match which {
            Disc::C => self.disc_c.forward(g, &self.store, image),
            Disc::S => self.disc_s.forward(g, &self.store, image),
        }
    }
}

//! Run configuration: one flat TOML table of documented keys, hashed into
//! every artifact a run writes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::appio::{DatasetConfig, Split};
use crate::attacks::{AttackConfig, BenignKind, Rounding, TamperKind};
use crate::backbone::{Activation, Normalization, Pooling};
use crate::error::{config_err, ImugeError, Result};
use crate::losses::LossWeights;
use crate::masks::{Interval, MaskSpec, RegionShape};
use crate::models::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seed: u64,

    // data
    pub data_root: PathBuf,
    pub eval_root: PathBuf,
    pub image_size: usize,
    pub train_limit: usize,
    pub eval_limit: usize,

    // schedule and optimisation
    pub epochs_total: usize,
    pub epochs_per_phase: usize,
    pub decoupling_lift_epoch: usize,
    pub fade_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub steps_per_epoch: usize,
    /// Stop after this many steps; 0 runs the whole schedule.
    pub max_steps: u64,
    pub checkpoint_every: usize,
    pub progressive: bool,
    pub convergence_lift: bool,

    // loss weights
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,

    // networks
    pub base_width: usize,
    pub disc_width: usize,
    pub normalization: Normalization,
    pub activation: Activation,
    pub pooling: Pooling,
    pub dilation_rates: Vec<usize>,
    pub mask_input: bool,

    // training attacks
    pub p_skip: f64,
    pub benign_kinds: Vec<BenignKind>,
    pub tamper_kinds: Vec<TamperKind>,
    pub jpeg_quality_min: u8,
    pub jpeg_quality_max: u8,
    pub scale_min: f64,
    pub scale_max: f64,
    pub blur_kernels: Vec<usize>,
    pub rounding: Rounding,

    // tamper masks
    pub rst_min: f64,
    pub rst_max: f64,
    pub rlt_min: f64,
    pub rlt_max: f64,
    pub regions_min: usize,
    pub regions_max: usize,
    pub region_shape: RegionShape,

    // evaluation grid
    pub eval_jpeg_qualities: Vec<u8>,
    pub eval_scales: Vec<f64>,
    pub eval_crops: Vec<f64>,
    pub eval_blur_kernel: usize,
    pub eval_stratified: bool,
    /// Samples per image and cell in stratified mode.
    pub eval_band_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = AttackConfig::default();
        let m = ModelConfig::default();
        let s = MaskSpec::training();
        Self {
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            data_root: PathBuf::from("data/train"),
            eval_root: PathBuf::from("data/eval"),
            image_size: 64,
            train_limit: 2000,
            eval_limit: 200,
            epochs_total: t.epochs_total,
            epochs_per_phase: t.epochs_per_phase,
            decoupling_lift_epoch: t.decoupling_lift_epoch,
            fade_fraction: t.fade_fraction,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.beta1,
            adam_beta2: t.beta2,
            steps_per_epoch: t.steps_per_epoch,
            max_steps: 0,
            checkpoint_every: t.checkpoint_every,
            progressive: t.progressive,
            convergence_lift: t.convergence_lift,
            alpha: t.weights.alpha,
            beta: t.weights.beta,
            gamma: t.weights.gamma,
            theta: t.weights.theta,
            base_width: m.base_width,
            disc_width: m.disc_width,
            normalization: m.normalization,
            activation: m.activation,
            pooling: m.pooling,
            dilation_rates: m.dilation_rates,
            mask_input: m.mask_input,
            p_skip: a.p_skip,
            benign_kinds: a.benign,
            tamper_kinds: a.tampers,
            jpeg_quality_min: a.quality.0,
            jpeg_quality_max: a.quality.1,
            scale_min: a.scale.0,
            scale_max: a.scale.1,
            blur_kernels: a.blur_kernels,
            rounding: a.rounding,
            rst_min: s.rst.lo,
            rst_max: s.rst.hi,
            rlt_min: s.rlt.lo,
            rlt_max: s.rlt.hi,
            regions_min: s.count.0,
            regions_max: s.count.1,
            region_shape: s.shape,
            eval_jpeg_qualities: vec![90, 70, 50],
            eval_scales: vec![1.5, 0.7, 0.5],
            eval_crops: vec![0.9, 0.7, 0.5],
            eval_blur_kernel: 5,
            eval_stratified: false,
            eval_band_samples: 1,
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| ImugeError::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| ImugeError::io(path, e))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs_total: self.epochs_total,
            epochs_per_phase: self.epochs_per_phase,
            decoupling_lift_epoch: self.decoupling_lift_epoch,
            fade_fraction: self.fade_fraction,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                theta: self.theta,
            },
            seed: self.seed,
            steps_per_epoch: self.steps_per_epoch,
            checkpoint_every: self.checkpoint_every,
            progressive: self.progressive,
            convergence_lift: self.convergence_lift,
            attacks: self.attacks(),
        }
    }

    pub fn attacks(&self) -> AttackConfig {
        AttackConfig {
            benign: self.benign_kinds.clone(),
            tampers: self.tamper_kinds.clone(),
            p_skip: self.p_skip,
            quality: (self.jpeg_quality_min, self.jpeg_quality_max),
            scale: (self.scale_min, self.scale_max),
            blur_kernels: self.blur_kernels.clone(),
            rounding: self.rounding,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            base_width: self.base_width,
            disc_width: self.disc_width,
            normalization: self.normalization,
            activation: self.activation,
            pooling: self.pooling,
            dilation_rates: self.dilation_rates.clone(),
            mask_input: self.mask_input,
        }
    }

    pub fn masks(&self) -> MaskSpec {
        MaskSpec {
            rst: Interval::new(self.rst_min, self.rst_max),
            rlt: Interval::new(self.rlt_min, self.rlt_max),
            count: (self.regions_min, self.regions_max),
            shape: self.region_shape,
        }
    }

    pub fn dataset(&self, split: Split) -> DatasetConfig {
        let (root, limit) = match split {
            Split::Train => (self.data_root.clone(), self.train_limit),
            Split::Eval => (self.eval_root.clone(), self.eval_limit),
        };
        DatasetConfig {
            root,
            size: self.image_size,
            split,
            limit,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        self.masks().validate()?;
        self.dataset(Split::Train).validate()?;
        if self.train_limit != 0 && self.train_limit < self.batch_size {
            return Err(config_err("train_limit must be at least batch_size"));
        }
        if self.jpeg_quality_min == 0 || self.jpeg_quality_min > self.jpeg_quality_max || self.jpeg_quality_max > 100 {
            return Err(config_err("jpeg quality range must satisfy 1 <= min <= max <= 100"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(config_err("scale range must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&self.p_skip) {
            return Err(config_err("p_skip must lie in [0, 1]"));
        }
        if self.blur_kernels.iter().chain([&self.eval_blur_kernel]).any(|k| k % 2 == 0) {
            return Err(config_err("blur kernels must be odd"));
        }
        if self.eval_jpeg_qualities.iter().any(|q| !(1..=100).contains(q)) {
            return Err(config_err("eval jpeg qualities must lie in 1..=100"));
        }
        if self.eval_scales.iter().any(|s| !(*s > 0.0)) || self.eval_crops.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return Err(config_err("eval scales must be positive and crops in (0, 1]"));
        }
        if self.eval_band_samples == 0 {
            return Err(config_err("eval_band_samples must be positive"));
        }
        Ok(())
    }
}

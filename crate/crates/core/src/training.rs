//! Training orchestration: the progressive schedule, task decoupling, the
//! alternating generator/discriminator updates, logs and checkpoints.

use std::path::{Path, PathBuf};

use imuge_tensor::{Adam, AdamConfig, AdamSlot, Graph, ParamId, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appio::checkpoint::{Checkpoint, CheckpointMeta};
use crate::appio::Dataset;
use crate::attacks::{execute_batch, sample_attack_plan, AttackConfig, AttackPlan};
use crate::backbone::{Progress, LEVELS};
use crate::error::{config_err, contract_err, ImugeError, Result};
use crate::losses::{
    loss_adv_discriminator, loss_adv_generator, loss_cls, loss_fidelity, loss_recovery, loss_total_var, LossReport, LossWeights,
};
use crate::masks::{localize, rectify, sample_tamper_mask, stack_masks, Mask, MaskSpec};
use crate::models::{Disc, ImugeModel, DECODER, DISC_C, DISC_S, ENCODER, VERIFIER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_total: usize,
    pub epochs_per_phase: usize,
    pub decoupling_lift_epoch: usize,
    /// Fraction of each phase spent fading the new level in.
    pub fade_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Steps per epoch; 0 derives it from the dataset size.
    pub steps_per_epoch: usize,
    /// Periodic checkpoint interval in steps; 0 disables.
    pub checkpoint_every: usize,
    /// Grow the decoder through stages 1-4; off runs stage 4 throughout.
    pub progressive: bool,
    /// Also lift decoupling once the classification loss plateaus.
    pub convergence_lift: bool,
    pub attacks: AttackConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_total: 200,
            epochs_per_phase: 20,
            decoupling_lift_epoch: 100,
            fade_fraction: 0.5,
            batch_size: 8,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            steps_per_epoch: 0,
            checkpoint_every: 1000,
            progressive: true,
            convergence_lift: false,
            attacks: AttackConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_total == 0 || self.batch_size == 0 {
            return Err(config_err("epochs_total and batch_size must be positive"));
        }
        if self.decoupling_lift_epoch > self.epochs_total {
            return Err(config_err("decoupling_lift_epoch exceeds epochs_total"));
        }
        if self.progressive {
            if self.epochs_per_phase == 0 || 3 * self.epochs_per_phase >= self.epochs_total {
                return Err(config_err("need 0 < 3 * epochs_per_phase < epochs_total"));
            }
            if self.decoupling_lift_epoch < 3 * self.epochs_per_phase {
                return Err(config_err("decoupling must not lift before the last progressive stage"));
            }
        }
        if !(0.0..=1.0).contains(&self.fade_fraction) {
            return Err(config_err("fade_fraction must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(config_err("learning rate must be positive"));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub stage: usize,
    pub fade: f64,
    pub decoupled: bool,
    pub epoch: usize,
    pub step: u64,
}

impl PhaseState {
    pub fn progress(&self) -> Progress {
        Progress {
            stage: self.stage,
            fade: self.fade,
        }
    }
}

/// Schedule position at a fractional epoch `epoch + within`, `within` in
/// `[0, 1)`.
fn phase_at(epoch: usize, within: f64, cfg: &TrainConfig) -> PhaseState {
    let (stage, fade) = if cfg.progressive {
        let stage = (1 + epoch / cfg.epochs_per_phase).min(LEVELS);
        let fade = if stage == 1 {
            1.0
        } else {
            let into = (epoch - (stage - 1) * cfg.epochs_per_phase) as f64 + within;
            let span = cfg.fade_fraction * cfg.epochs_per_phase as f64;
            if span == 0.0 {
                1.0
            } else {
                (into / span).min(1.0)
            }
        };
        (stage, fade)
    } else {
        (LEVELS, 1.0)
    };
    PhaseState {
        stage,
        fade,
        decoupled: epoch < cfg.decoupling_lift_epoch,
        epoch,
        step: 0,
    }
}

/// Schedule state at the start of `epoch`; a pure function of its inputs.
pub fn phase_for_epoch(epoch: usize, cfg: &TrainConfig) -> Result<PhaseState> {
    if epoch >= cfg.epochs_total {
        return Err(contract_err(format!("epoch {epoch} outside 0..{}", cfg.epochs_total)));
    }
    Ok(phase_at(epoch, 0.0, cfg))
}

/// Schedule state at a global step, with the fade advancing per step.
pub fn phase_for_step(step: u64, steps_per_epoch: usize, cfg: &TrainConfig) -> Result<PhaseState> {
    let spe = steps_per_epoch.max(1) as u64;
    let epoch = (step / spe) as usize;
    if epoch >= cfg.epochs_total {
        return Err(contract_err(format!("step {step} is past the last epoch")));
    }
    let mut p = phase_at(epoch, (step % spe) as f64 / spe as f64, cfg);
    p.step = step;
    Ok(p)
}

/// Plateau detector for the classification loss: window means over
/// `window` steps; converged once `patience` consecutive windows improve
/// by less than `min_rel`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftTracker {
    pub window: usize,
    pub patience: usize,
    pub min_rel: f64,
    sum: f64,
    count: usize,
    means: Vec<f64>,
    pub lifted: bool,
}

impl Default for LiftTracker {
    fn default() -> Self {
        Self {
            window: 200,
            patience: 5,
            min_rel: 0.01,
            sum: 0.0,
            count: 0,
            means: Vec::new(),
            lifted: false,
        }
    }
}

impl LiftTracker {
    pub fn record(&mut self, l_cls: f64) {
        self.sum += l_cls;
        self.count += 1;
        if self.count == self.window {
            self.means.push(self.sum / self.window as f64);
            self.sum = 0.0;
            self.count = 0;
            if self.converged() {
                self.lifted = true;
            }
        }
    }

    pub fn converged(&self) -> bool {
        let m = &self.means;
        m.len() > self.patience
            && m[m.len() - self.patience - 1..]
                .windows(2)
                .all(|w| (w[0] - w[1]) / w[0].abs().max(f64::MIN_POSITIVE) < self.min_rel)
    }
}

/// A batch with its sampled attack plans, tamper regions and donors.
#[derive(Clone, Debug)]
pub struct StepInput {
    pub images: Tensor,
    pub plans: Vec<AttackPlan>,
    pub regions: Vec<Mask>,
    /// Unrelated images for image-replacement tampers (the batch rolled by one).
    pub donors: Tensor,
}

/// Draw plans and masks for `images` from a stream keyed by `(seed, step)`.
pub fn sample_step_input(images: Tensor, attacks: &AttackConfig, masks: &MaskSpec, seed: u64, step: u64) -> Result<StepInput> {
    let (n, _, h, w) = images.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a77a_c4ed_0001);
    rng.set_stream(step);
    let mut plans = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    for _ in 0..n {
        let plan = sample_attack_plan(&mut rng, attacks, h, w)?;
        let region = sample_tamper_mask(&mut rng, masks, h, w)?;
        regions.push(if plan.is_skip() { Mask::zeros(h, w) } else { region });
        plans.push(plan);
    }
    let donors = Tensor::stack_batch(&(0..n).map(|i| images.batch_item((i + 1) % n)).collect::<std::result::Result<Vec<_>, _>>()?)?;
    Ok(StepInput {
        images,
        plans,
        regions,
        donors,
    })
}

/// Values produced by the decoupled generator update.
#[derive(Clone, Debug)]
pub struct DecoupledPass {
    pub report: LossReport,
    pub immunized: Tensor,
    pub attacked: Tensor,
    pub ground_truth: Tensor,
    /// Original at stage resolution.
    pub original_stage: Tensor,
    pub recovered: Tensor,
    pub scale: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub report: LossReport,
    pub l_disc_c: f64,
    pub l_disc_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub stage: usize,
    pub fade: f64,
    pub decoupled: bool,
    pub l_cls: f64,
    pub l_r: f64,
    pub l_c: f64,
    pub l_dr: f64,
    pub l_dc: f64,
    pub l_total: f64,
    pub l_disc_c: f64,
    pub l_disc_s: f64,
}

impl LogRow {
    pub fn new(phase: &PhaseState, o: &StepOutcome) -> Self {
        let r = o.report;
        Self {
            step: phase.step,
            epoch: phase.epoch,
            stage: phase.stage,
            fade: phase.fade,
            decoupled: phase.decoupled,
            l_cls: r.l_cls,
            l_r: r.l_r,
            l_c: r.l_c,
            l_dr: r.l_dr,
            l_dc: r.l_dc,
            l_total: r.l_total,
            l_disc_c: o.l_disc_c,
            l_disc_s: o.l_disc_s,
        }
    }
}

struct Optimizers {
    generator: Adam,
    verifier: Adam,
    disc_c: Adam,
    disc_s: Adam,
}

const OPTIMIZER_NAMES: [&str; 4] = ["generator", "verifier", "disc_c", "disc_s"];

impl Optimizers {
    fn all(&self) -> [&Adam; 4] {
        [&self.generator, &self.verifier, &self.disc_c, &self.disc_s]
    }

    fn all_mut(&mut self) -> [&mut Adam; 4] {
        [&mut self.generator, &mut self.verifier, &mut self.disc_c, &mut self.disc_s]
    }
}

/// Model plus optimizer state; one instance per run.
pub struct Trainer {
    pub model: ImugeModel,
    pub config: TrainConfig,
    pub masks: MaskSpec,
    pub step: u64,
    pub lift: LiftTracker,
    opts: Optimizers,
}

fn finite(step: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ImugeError::NonFinite {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// Average-pool an image and nearest-sample a mask down to stage size.
fn to_stage<'g>(img: Var<'g>, f: usize) -> Result<Var<'g>> {
    Ok(if f > 1 { img.avg_pool(f)? } else { img })
}

fn mask_to_stage(m: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(m.clone());
    }
    let g = Graph::inference();
    Ok(g.constant(m.clone()).downsample_nearest(f)?.value())
}

impl Trainer {
    pub fn new(model: ImugeModel, config: TrainConfig, masks: MaskSpec) -> Result<Self> {
        config.validate()?;
        masks.validate()?;
        let adam = config.adam();
        let ids = |groups: &[&str]| -> Vec<ParamId> { groups.iter().flat_map(|g| model.group_params(g)).collect() };
        let opts = Optimizers {
            generator: Adam::new(&ids(&[ENCODER, DECODER]), &model.store, adam),
            verifier: Adam::new(&ids(&[VERIFIER]), &model.store, adam),
            disc_c: Adam::new(&ids(&[DISC_C]), &model.store, adam),
            disc_s: Adam::new(&ids(&[DISC_S]), &model.store, adam),
        };
        Ok(Self {
            model,
            config,
            masks,
            step: 0,
            lift: LiftTracker::default(),
            opts,
        })
    }

    pub fn sample_input(&self, images: Tensor, step: u64) -> Result<StepInput> {
        sample_step_input(images, &self.config.attacks, &self.masks, self.config.seed, step)
    }

    /// Discriminator update on (original, immunized) and (original at
    /// stage resolution, recovered) pairs; the generated images enter as
    /// constants. Stage images are nearest-upsampled to full size first.
    fn update_discriminators(&mut self, original: &Tensor, immunized: &Tensor, real_s: &Tensor, recovered: &Tensor, f: usize) -> Result<(f64, f64)> {
        let g = Graph::with_trainable([DISC_C, DISC_S]);
        let up = |t: &Tensor| -> Result<Var<'_>> {
            let v = g.constant(t.clone());
            Ok(if f > 1 { v.upsample_nearest(f)? } else { v })
        };
        let m = &self.model;
        let lc = loss_adv_discriminator(m.discriminate(&g, Disc::C, g.constant(original.clone()))?, m.discriminate(&g, Disc::C, g.constant(immunized.clone()))?)?;
        let ls = loss_adv_discriminator(m.discriminate(&g, Disc::S, up(real_s)?)?, m.discriminate(&g, Disc::S, up(recovered)?)?)?;
        let (vc, vs) = (finite(self.step, "discriminator C loss", lc.to_scalar()?)?, finite(self.step, "discriminator S loss", ls.to_scalar()?)?);
        let grads = g.backward(lc.add(ls)?)?;
        self.opts.disc_c.step(&mut self.model.store, &grads);
        self.opts.disc_s.step(&mut self.model.store, &grads);
        Ok((vc, vs))
    }

    /// Decoupled update (b): encoder and decoder learn with the decoder fed
    /// the ground-truth rectified image and the classification weight
    /// forced to zero. The verifier is not part of the graph.
    pub fn update_generator_decoupled(&mut self, input: &StepInput, phase: &PhaseState) -> Result<DecoupledPass> {
        if !phase.decoupled {
            return Err(contract_err("decoupled update called in a coupled phase"));
        }
        let progress = phase.progress();
        let f = progress.scale_factor();
        let rounding = self.config.attacks.rounding;
        let weights = self.config.weights;
        let g = Graph::with_trainable([ENCODER, DECODER]);
        let m = &self.model;
        let original = g.constant(input.images.clone());
        let (immunized, _) = m.immunize(&g, original)?;
        let (attacked, m_g) = execute_batch(immunized, &input.plans, &input.regions, Some(&input.donors), rounding)?;
        let orig_s = to_stage(original, f)?;
        let m_s = mask_to_stage(&m_g, f)?;
        let rectified = rectify(to_stage(attacked, f)?, &m_s)?;
        let recovered = if phase.stage == LEVELS && phase.fade == 1.0 {
            m.recover(&g, rectified, &m_s)?
        } else {
            m.recover_progressive(&g, rectified, &m_s, progress)?
        };
        let l_r = loss_recovery(orig_s, recovered, &m_s)?;
        let l_c = loss_fidelity(original, immunized)?;
        let rec_up = if f > 1 { recovered.upsample_nearest(f)? } else { recovered };
        let l_dr = loss_adv_generator(m.discriminate(&g, Disc::S, rec_up)?);
        let l_dc = loss_adv_generator(m.discriminate(&g, Disc::C, immunized)?);
        let total = loss_total_var(&g, [None, Some(l_r), Some(l_c), Some(l_dr), Some(l_dc)], &weights, true)?;
        let report = LossReport {
            l_cls: 0.0,
            l_r: l_r.to_scalar()?,
            l_c: l_c.to_scalar()?,
            l_dr: l_dr.to_scalar()?,
            l_dc: l_dc.to_scalar()?,
            l_total: finite(self.step, "generator loss", total.to_scalar()?)?,
        };
        let grads = g.backward(total)?;
        let pass = DecoupledPass {
            report,
            immunized: immunized.value(),
            attacked: attacked.value(),
            ground_truth: m_g,
            original_stage: orig_s.value(),
            recovered: recovered.value(),
            scale: f,
        };
        drop(g);
        self.opts.generator.step(&mut self.model.store, &grads);
        Ok(pass)
    }

    /// Decoupled update (a): the verifier alone learns to predict the
    /// ground-truth mask of the attacked images. Returns the loss.
    pub fn update_verifier(&mut self, attacked: &Tensor, ground_truth: &Tensor) -> Result<f64> {
        let g = Graph::with_trainable([VERIFIER]);
        let pred = self.model.verify(&g, g.constant(attacked.clone()))?;
        let l_cls = loss_cls(pred, ground_truth)?;
        let v = finite(self.step, "classification loss", l_cls.to_scalar()?)?;
        let grads = g.backward(l_cls)?;
        self.opts.verifier.step(&mut self.model.store, &grads);
        Ok(v)
    }

    /// Decoupled step: update (b), then update (a) on the same attacked
    /// images (skipped at stages 1-3, where the verifier is idle), then the
    /// discriminators.
    pub fn step_decoupled(&mut self, input: &StepInput, phase: &PhaseState) -> Result<StepOutcome> {
        let mut pass = self.update_generator_decoupled(input, phase)?;
        if phase.stage == LEVELS {
            pass.report.l_cls = self.update_verifier(&pass.attacked, &pass.ground_truth)?;
            self.lift.record(pass.report.l_cls);
        }
        let (l_disc_c, l_disc_s) =
            self.update_discriminators(&input.images, &pass.immunized, &pass.original_stage, &pass.recovered, pass.scale)?;
        self.step += 1;
        Ok(StepOutcome {
            report: pass.report,
            l_disc_c,
            l_disc_s,
        })
    }

    /// Coupled step: the full pipeline with the decoder fed the image
    /// rectified by the refined predicted mask; every network learns.
    pub fn step_coupled(&mut self, input: &StepInput, phase: &PhaseState) -> Result<StepOutcome> {
        if phase.decoupled {
            return Err(contract_err("step_coupled called in a decoupled phase"));
        }
        if phase.stage != LEVELS {
            return Err(contract_err("coupled training runs at the last stage only"));
        }
        let rounding = self.config.attacks.rounding;
        let weights = self.config.weights;
        let g = Graph::with_trainable([ENCODER, VERIFIER, DECODER]);
        let m = &self.model;
        let original = g.constant(input.images.clone());
        let (immunized, _) = m.immunize(&g, original)?;
        let (attacked, m_g) = execute_batch(immunized, &input.plans, &input.regions, Some(&input.donors), rounding)?;
        let pred = m.verify(&g, attacked)?;
        let refined = stack_masks(&Mask::batch_from_tensor(&pred.value())?.iter().map(localize).collect::<Vec<_>>())?;
        let rectified = rectify(attacked, &refined)?;
        let recovered = m.recover(&g, rectified, &refined)?;
        let l_cls = loss_cls(pred, &m_g)?;
        let l_r = loss_recovery(original, recovered, &m_g)?;
        let l_c = loss_fidelity(original, immunized)?;
        let l_dr = loss_adv_generator(m.discriminate(&g, Disc::S, recovered)?);
        let l_dc = loss_adv_generator(m.discriminate(&g, Disc::C, immunized)?);
        let total = loss_total_var(&g, [Some(l_cls), Some(l_r), Some(l_c), Some(l_dr), Some(l_dc)], &weights, false)?;
        let report = LossReport {
            l_cls: l_cls.to_scalar()?,
            l_r: l_r.to_scalar()?,
            l_c: l_c.to_scalar()?,
            l_dr: l_dr.to_scalar()?,
            l_dc: l_dc.to_scalar()?,
            l_total: finite(self.step, "generator loss", total.to_scalar()?)?,
        };
        let grads = g.backward(total)?;
        let (imm_v, rec_v) = (immunized.value(), recovered.value());
        drop(g);
        self.opts.generator.step(&mut self.model.store, &grads);
        self.opts.verifier.step(&mut self.model.store, &grads);
        let (l_disc_c, l_disc_s) = self.update_discriminators(&input.images, &imm_v, &input.images, &rec_v, 1)?;
        self.step += 1;
        Ok(StepOutcome {
            report,
            l_disc_c,
            l_disc_s,
        })
    }

    /// The effective phase: the schedule, with decoupling also lifted by
    /// a converged classification loss when enabled.
    pub fn phase(&self, steps_per_epoch: usize) -> Result<PhaseState> {
        let mut p = phase_for_step(self.step, steps_per_epoch, &self.config)?;
        if self.config.convergence_lift && self.lift.lifted && p.stage == LEVELS {
            p.decoupled = false;
        }
        Ok(p)
    }

    pub fn train_step(&mut self, input: &StepInput, phase: &PhaseState) -> Result<StepOutcome> {
        if phase.decoupled {
            self.step_decoupled(input, phase)
        } else {
            self.step_coupled(input, phase)
        }
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut tensors = Vec::new();
        for (_, e) in self.model.store.iter() {
            tensors.push((format!("param/{}", e.name), e.value.shape().to_vec(), e.value.data().to_vec()));
        }
        let mut steps = serde_json::Map::new();
        for (name, opt) in OPTIMIZER_NAMES.iter().zip(self.opts.all()) {
            let mut s = Vec::new();
            for slot in opt.state() {
                let pname = &self.model.store.entry(ParamId(slot.param)).name;
                tensors.push((format!("adam/{name}/{pname}/m"), vec![slot.m.len()], slot.m.clone()));
                tensors.push((format!("adam/{name}/{pname}/v"), vec![slot.v.len()], slot.v.clone()));
                s.push(slot.step);
            }
            steps.insert((*name).to_string(), serde_json::json!(s));
        }
        Checkpoint {
            meta: CheckpointMeta {
                config_hash: config_hash.to_string(),
                state: serde_json::json!({
                    "step": self.step,
                    "lift": self.lift,
                    "adam_steps": steps,
                }),
            },
            tensors,
        }
    }

    /// Restore weights (and optimizer and schedule state when present).
    pub fn restore(&mut self, ckpt: &Checkpoint, config_hash: &str) -> Result<()> {
        if !ckpt.meta.config_hash.is_empty() && ckpt.meta.config_hash != config_hash {
            log::warn!(
                "checkpoint config hash {} differs from the current run {}",
                ckpt.meta.config_hash,
                config_hash
            );
        }
        load_weights(&mut self.model, ckpt)?;
        let state = &ckpt.meta.state;
        self.step = state["step"].as_u64().unwrap_or(0);
        if let Some(l) = state.get("lift") {
            self.lift = serde_json::from_value(l.clone()).map_err(|e| ImugeError::Checkpoint(e.to_string()))?;
        }
        let store = &self.model.store;
        for (name, opt) in OPTIMIZER_NAMES.iter().zip(self.opts.all_mut()) {
            let Some(steps) = state["adam_steps"][*name].as_array() else { continue };
            let mut slots = Vec::new();
            for (slot, st) in opt.state().iter().zip(steps) {
                let pname = &store.entry(ParamId(slot.param)).name;
                let get = |k: &str| -> Result<Vec<f64>> {
                    ckpt.get(&format!("adam/{name}/{pname}/{k}"))
                        .map(|(_, d)| d.to_vec())
                        .ok_or_else(|| ImugeError::Checkpoint(format!("missing optimizer state for {pname}")))
                };
                slots.push(AdamSlot {
                    param: slot.param,
                    step: st.as_u64().unwrap_or(0),
                    m: get("m")?,
                    v: get("v")?,
                });
            }
            opt.load_state(slots).map_err(ImugeError::Checkpoint)?;
        }
        Ok(())
    }
}

/// Copy `param/*` arrays from a checkpoint into the model.
pub fn load_weights(model: &mut ImugeModel, ckpt: &Checkpoint) -> Result<()> {
    let ids: Vec<(ParamId, String)> = model.store.iter().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in ids {
        let (shape, data) = ckpt
            .get(&format!("param/{name}"))
            .ok_or_else(|| ImugeError::Checkpoint(format!("missing parameter {name}")))?;
        if shape != model.store.get(id).shape() {
            return Err(ImugeError::Checkpoint(format!("parameter {name} has shape {shape:?}")));
        }
        model.store.set(id, Tensor::from_vec(shape, data.to_vec())?);
    }
    Ok(())
}

/// Dataset order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

pub fn steps_per_epoch(cfg: &TrainConfig, dataset_len: usize) -> usize {
    if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        (dataset_len / cfg.batch_size).max(1)
    }
}

/// Indices of the batch at `step`; wraps around small datasets.
pub fn batch_indices(cfg: &TrainConfig, dataset_len: usize, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(cfg, dataset_len) as u64;
    let epoch = (step / spe) as usize;
    let order = epoch_order(dataset_len, cfg.seed, epoch);
    let start = (step % spe) as usize * cfg.batch_size;
    (0..cfg.batch_size).map(|k| order[(start + k) % dataset_len]).collect()
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub out_dir: PathBuf,
    pub config_hash: String,
    /// Stop after this many total steps (before the schedule ends).
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

fn write_checkpoint(trainer: &Trainer, dir: &Path, name: &str, hash: &str, saved: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    trainer.to_checkpoint(hash).save(&path)?;
    saved.push(path);
    Ok(())
}

/// Run the schedule from `trainer.step` onwards, appending to
/// `train_log.csv` and writing checkpoints at phase boundaries, every
/// `checkpoint_every` steps and at the end.
pub fn train(trainer: &mut Trainer, dataset: &Dataset, run: &TrainRun) -> Result<TrainSummary> {
    if dataset.is_empty() {
        return Err(ImugeError::EmptyDataset("training set".into()));
    }
    std::fs::create_dir_all(&run.out_dir).map_err(|e| ImugeError::io(&run.out_dir, e))?;
    let spe = steps_per_epoch(&trainer.config, dataset.len());
    let end = (trainer.config.epochs_total * spe) as u64;
    let end = run.max_steps.map_or(end, |m| m.min(end));
    let log_path = run.out_dir.join("train_log.csv");
    let fresh = trainer.step == 0 || !log_path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| ImugeError::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let csv_err = |e: csv::Error| ImugeError::io(&log_path, std::io::Error::other(e.to_string()));
    let mut saved = Vec::new();
    let mut last = None;
    while trainer.step < end {
        let phase = trainer.phase(spe)?;
        let idx = batch_indices(&trainer.config, dataset.len(), trainer.step);
        let input = trainer.sample_input(dataset.batch(&idx)?, trainer.step)?;
        let outcome = trainer.train_step(&input, &phase)?;
        let row = LogRow::new(&phase, &outcome);
        log.serialize(&row).map_err(csv_err)?;
        last = Some(row);
        if trainer.step < end {
            let next = trainer.phase(spe)?;
            if next.stage != phase.stage || next.decoupled != phase.decoupled {
                log.flush().map_err(|e| ImugeError::io(&log_path, e))?;
                let name = format!("stage{}-{}-step{}.ckpt", next.stage, if next.decoupled { "decoupled" } else { "coupled" }, trainer.step);
                write_checkpoint(trainer, &run.out_dir, &name, &run.config_hash, &mut saved)?;
            }
        }
        let every = trainer.config.checkpoint_every as u64;
        if every > 0 && trainer.step.is_multiple_of(every) {
            log.flush().map_err(|e| ImugeError::io(&log_path, e))?;
            write_checkpoint(trainer, &run.out_dir, "latest.ckpt", &run.config_hash, &mut saved)?;
        }
    }
    log.flush().map_err(|e| ImugeError::io(&log_path, e))?;
    write_checkpoint(trainer, &run.out_dir, "final.ckpt", &run.config_hash, &mut saved)?;
    Ok(TrainSummary {
        steps: trainer.step,
        last,
        checkpoints: saved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_fixtures() {
        let cfg = TrainConfig::default();
        let p0 = phase_for_epoch(0, &cfg).unwrap();
        assert_eq!((p0.stage, p0.fade, p0.decoupled), (1, 1.0, true));
        let p20 = phase_for_epoch(20, &cfg).unwrap();
        assert_eq!((p20.stage, p20.fade, p20.decoupled), (2, 0.0, true));
        let p30 = phase_for_epoch(30, &cfg).unwrap();
        assert_eq!((p30.stage, p30.fade), (2, 1.0));
        let p100 = phase_for_epoch(100, &cfg).unwrap();
        assert_eq!((p100.stage, p100.decoupled), (4, false));
        assert!(phase_for_epoch(200, &cfg).is_err());
    }

    #[test]
    fn lift_before_last_stage_is_rejected() {
        let cfg = TrainConfig {
            decoupling_lift_epoch: 50,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plateau_detection() {
        let mut t = LiftTracker {
            window: 2,
            ..LiftTracker::default()
        };
        for v in [1.0, 1.0, 0.5, 0.5, 0.25, 0.25] {
            t.record(v);
        }
        assert!(!t.lifted);
        for _ in 0..12 {
            t.record(0.25);
        }
        assert!(t.lifted);
    }

    #[test]
    fn batches_are_a_pure_function_of_step() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert_eq!(batch_indices(&cfg, 16, 5), batch_indices(&cfg, 16, 5));
        let epoch: Vec<usize> = (0..4).flat_map(|s| batch_indices(&cfg, 16, s)).collect();
        let mut sorted = epoch.clone();
        sorted.sort();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
    }
}

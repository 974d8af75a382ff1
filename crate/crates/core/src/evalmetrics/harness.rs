//! Attack-grid evaluation: every held-out image goes through immunize,
//! tamper, one benign distortion, verify, refine, rectify and recover, and
//! the metrics are averaged per grid cell.

use std::fmt::Write as _;
use std::path::Path;

use imuge_tensor::{parallel, Graph, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bce, image_local_psnr, image_psnr, ssim};
use crate::appio::{jpeg_roundtrip, quantize, Dataset, RunConfig};
use crate::attacks::{execute_plan, sample_attack_plan, AttackConfig, AttackParams, AttackPlan, BenignKind, Rounding, TamperKind, AWGN_SIGMA};
use crate::error::{config_err, ImugeError, Result};
use crate::masks::{localize, rectify, sample_tamper_mask, Interval, Mask, MaskSpec};
use crate::models::ImugeModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Cell {
    Jpeg(u8),
    Scale(f64),
    Crop(f64),
    Blur(usize),
    Awgn,
    None,
}

impl Cell {
    pub fn label(&self) -> String {
        match self {
            Cell::Jpeg(q) => format!("jpeg@{q}"),
            Cell::Scale(s) => format!("scale@{s}"),
            Cell::Crop(c) => format!("crop@{c}"),
            Cell::Blur(_) => "blur".into(),
            Cell::Awgn => "awgn".into(),
            Cell::None => "none".into(),
        }
    }
}

/// Tamper-degree band: area fractions of all tampers and of the largest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub rst: f64,
    pub rlt: f64,
}

/// The four tamper-degree bands reported without benign attacks.
pub const TABLE2_BANDS: [Band; 4] = [
    Band { rst: 0.10, rlt: 0.06 },
    Band { rst: 0.25, rlt: 0.06 },
    Band { rst: 0.10, rlt: 0.16 },
    Band { rst: 0.30, rlt: 0.16 },
];

/// Relative half-width of a band's sampling window.
pub const BAND_TOLERANCE: f64 = 0.2;

impl Band {
    pub fn label(&self) -> String {
        format!("rst~{:.0}%/rlt~{:.0}%", self.rst * 100.0, self.rlt * 100.0)
    }

    pub fn spec(&self) -> MaskSpec {
        let win = |v: f64| Interval::new(v * (1.0 - BAND_TOLERANCE), v * (1.0 + BAND_TOLERANCE));
        MaskSpec {
            rst: win(self.rst),
            rlt: win(self.rlt),
            count: (1, 8),
            ..MaskSpec::training()
        }
    }

    /// A single region can never exceed the total tampered area.
    pub fn feasible(&self) -> bool {
        let s = self.spec();
        s.rlt.lo < s.rst.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub jpeg_qualities: Vec<u8>,
    pub scales: Vec<f64>,
    pub crops: Vec<f64>,
    pub blur_kernel: usize,
    pub tampers: Vec<TamperKind>,
    pub masks: MaskSpec,
    pub seed: u64,
    pub stratified: bool,
    pub band_samples: usize,
    pub config_hash: String,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::from_run(&RunConfig::default())
    }
}

impl GridConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        Self {
            jpeg_qualities: run.eval_jpeg_qualities.clone(),
            scales: run.eval_scales.clone(),
            crops: run.eval_crops.clone(),
            blur_kernel: run.eval_blur_kernel,
            tampers: run.tamper_kinds.clone(),
            masks: run.masks(),
            seed: run.seed,
            stratified: run.eval_stratified,
            band_samples: run.eval_band_samples,
            config_hash: run.hash(),
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = self.jpeg_qualities.iter().map(|&q| Cell::Jpeg(q)).collect();
        cells.extend(self.scales.iter().map(|&s| Cell::Scale(s)));
        cells.extend(self.crops.iter().map(|&c| Cell::Crop(c)));
        cells.extend([Cell::Blur(self.blur_kernel), Cell::Awgn, Cell::None]);
        cells
    }
}

/// Every intermediate of one pipeline pass, batch of one.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub immunized: Tensor,
    pub residual: Tensor,
    pub attacked: Tensor,
    pub ground_truth: Mask,
    pub soft: Tensor,
    pub refined: Mask,
    pub rectified: Tensor,
    pub recovered: Tensor,
}

/// Immunize, attack per `plan` (JPEG through the real codec, everything
/// else saved losslessly), then localize and recover. Images are 8-bit
/// quantized wherever a file would be written.
pub fn run_pipeline(model: &ImugeModel, image: &Tensor, plan: &AttackPlan, region: &Mask, donor: Option<&Tensor>) -> Result<PipelineOutput> {
    let g = Graph::inference();
    let (imm, residual) = model.immunize(&g, g.constant(image.clone()))?;
    let immunized = quantize(&imm.value());
    let real_jpeg = plan.benign == BenignKind::Jpeg;
    let staged = if real_jpeg {
        AttackPlan {
            benign: BenignKind::Identity,
            ..plan.clone()
        }
    } else {
        plan.clone()
    };
    let out = execute_plan(g.constant(immunized.clone()), &staged, region, donor, Rounding::StraightThrough)?;
    let attacked = if real_jpeg {
        jpeg_roundtrip(&out.image.value(), plan.params.quality)?
    } else {
        quantize(&out.image.value())
    };
    let a = g.constant(attacked.clone());
    let soft = model.verify(&g, a)?.value();
    let refined = localize(&Mask::from_tensor(&soft)?);
    let rt = refined.to_tensor();
    let rect = rectify(a, &rt)?;
    let recovered = model.recover(&g, rect, &rt)?.value();
    Ok(PipelineOutput {
        immunized,
        residual: residual.value(),
        attacked,
        ground_truth: out.mask,
        soft,
        refined,
        rectified: rect.value(),
        recovered,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub samples: usize,
    pub bce: Option<f64>,
    pub l_psnr: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub config_hash: String,
    pub rows: Vec<CellResult>,
    /// Tamper-degree bands; empty unless stratified mode is on.
    pub bands: Vec<CellResult>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Sample {
    bce: f64,
    l_psnr: Option<f64>,
    psnr: f64,
    ssim: f64,
}

fn measure(image: &Tensor, out: &PipelineOutput) -> Result<Sample> {
    let gt = out.ground_truth.to_tensor();
    Ok(Sample {
        bce: bce(&out.soft, &gt)?,
        l_psnr: image_local_psnr(image, &out.recovered, &gt)?,
        psnr: image_psnr(image, &out.recovered)?,
        ssim: ssim(image, &out.recovered)?,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn aggregate(cell: String, samples: &[Sample], note: &str) -> CellResult {
    CellResult {
        cell,
        samples: samples.len(),
        bce: mean(samples.iter().map(|s| s.bce)),
        l_psnr: mean(samples.iter().filter_map(|s| s.l_psnr)),
        psnr: mean(samples.iter().map(|s| s.psnr)),
        ssim: mean(samples.iter().map(|s| s.ssim)),
        note: note.to_string(),
    }
}

/// Per-image draw shared by every cell: tamper kind, its parameters and
/// the region.
struct ImageDraw {
    tamper: TamperKind,
    params: AttackParams,
    seed: u64,
}

fn draw(rng: &mut ChaCha8Rng, tampers: &[TamperKind], h: usize, w: usize) -> Result<ImageDraw> {
    let tamper = *tampers.choose(rng).ok_or_else(|| config_err("no tamper kinds enabled"))?;
    let axis = |rng: &mut ChaCha8Rng, n: usize| rng.random_range((n / 8).max(1)..=(n / 2).max(1)) as isize;
    let params = AttackParams {
        shift: (axis(rng, h), axis(rng, w)),
        fill: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
        ..AttackParams::default()
    };
    Ok(ImageDraw {
        tamper,
        params,
        seed: rng.random(),
    })
}

fn cell_plan(d: &ImageDraw, cell: Cell) -> AttackPlan {
    let mut params = d.params.clone();
    let (tamper, benign) = match cell {
        Cell::Jpeg(q) => {
            params.quality = q;
            (d.tamper, BenignKind::Jpeg)
        }
        Cell::Scale(s) => {
            params.scale = s;
            (d.tamper, BenignKind::Rescale)
        }
        Cell::Crop(c) => {
            params.crop_keep = c;
            (d.tamper, BenignKind::Crop)
        }
        Cell::Blur(k) => {
            params.kernel = k;
            (d.tamper, BenignKind::Blur)
        }
        Cell::Awgn => {
            params.sigma = AWGN_SIGMA;
            (d.tamper, BenignKind::Awgn)
        }
        Cell::None => (TamperKind::None, BenignKind::Identity),
    };
    AttackPlan {
        tamper,
        benign,
        params,
        seed: d.seed,
    }
}

fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1_0000_0000_0001);
    rng.set_stream(stream);
    rng
}

/// Run the grid (and, in stratified mode, the tamper-degree bands) over
/// every image of `dataset`. Deterministic for a fixed `cfg.seed`.
pub fn evaluate_grid(model: &ImugeModel, dataset: &Dataset, cfg: &GridConfig) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(ImugeError::EmptyDataset("evaluation set".into()));
    }
    cfg.masks.validate()?;
    let n = dataset.len();
    let cells = cfg.cells();
    let per_image = parallel::map_indexed(n, |i| -> Result<Vec<Sample>> {
        let image = &dataset.images[i];
        let donor = &dataset.images[(i + 1) % n];
        let (_, _, h, w) = image.dims4()?;
        let mut rng = image_rng(cfg.seed, i as u64);
        let region = sample_tamper_mask(&mut rng, &cfg.masks, h, w)?;
        let d = draw(&mut rng, &cfg.tampers, h, w)?;
        cells
            .iter()
            .map(|&c| measure(image, &run_pipeline(model, image, &cell_plan(&d, c), &region, Some(donor))?))
            .collect()
    });
    let per_image: Vec<Vec<Sample>> = per_image.into_iter().collect::<Result<_>>()?;
    let rows = cells
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let s: Vec<Sample> = per_image.iter().map(|v| v[k]).collect();
            aggregate(c.label(), &s, if *c == Cell::None { "no tamper" } else { "" })
        })
        .collect();

    let mut bands = Vec::new();
    if cfg.stratified {
        for (b_idx, band) in TABLE2_BANDS.iter().enumerate() {
            if !band.feasible() {
                bands.push(aggregate(band.label(), &[], "infeasible: largest region exceeds total area"));
                continue;
            }
            let spec = band.spec();
            let per = parallel::map_indexed(n * cfg.band_samples, |j| -> Result<Sample> {
                let i = j / cfg.band_samples;
                let image = &dataset.images[i];
                let (_, _, h, w) = image.dims4()?;
                let mut rng = image_rng(cfg.seed, ((b_idx as u64 + 1) << 40) | j as u64);
                let region = sample_tamper_mask(&mut rng, &spec, h, w)?;
                let d = draw(&mut rng, &cfg.tampers, h, w)?;
                let plan = AttackPlan {
                    benign: BenignKind::Identity,
                    ..cell_plan(&d, Cell::Awgn)
                };
                measure(image, &run_pipeline(model, image, &plan, &region, Some(&dataset.images[(i + 1) % n]))?)
            });
            let s: Vec<Sample> = per.into_iter().collect::<Result<_>>()?;
            bands.push(aggregate(band.label(), &s, "no benign attack"));
        }
    }
    Ok(MetricsReport {
        images: n,
        config_hash: cfg.config_hash.clone(),
        rows,
        bands,
    })
}

/// Smoke-scale check on the training distribution: fresh attack plans and
/// tamper masks drawn as in training, `draws` per image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTamperReport {
    pub samples: usize,
    /// Soft-mask BCE against the ground truth.
    pub bce: f64,
    /// Original vs immunized image.
    pub immunized_psnr: f64,
    /// Original vs recovered, inside the ground-truth mask.
    pub recovered_l_psnr: f64,
    /// Original vs rectified, inside the ground-truth mask.
    pub rectified_l_psnr: f64,
}

pub fn evaluate_training_tampers(
    model: &ImugeModel,
    dataset: &Dataset,
    attacks: &AttackConfig,
    masks: &MaskSpec,
    draws: usize,
    seed: u64,
) -> Result<TrainingTamperReport> {
    if dataset.is_empty() {
        return Err(ImugeError::EmptyDataset("evaluation set".into()));
    }
    let n = dataset.len();
    let per = parallel::map_indexed(n * draws, |j| -> Result<(f64, f64, Option<(f64, f64)>)> {
        let i = j / draws.max(1);
        let image = &dataset.images[i];
        let (_, _, h, w) = image.dims4()?;
        let mut rng = image_rng(seed, (1 << 48) | j as u64);
        let plan = sample_attack_plan(&mut rng, attacks, h, w)?;
        let region = sample_tamper_mask(&mut rng, masks, h, w)?;
        let out = run_pipeline(model, image, &plan, &region, Some(&dataset.images[(i + 1) % n]))?;
        let gt = out.ground_truth.to_tensor();
        let local = match (image_local_psnr(image, &out.recovered, &gt)?, image_local_psnr(image, &out.rectified, &gt)?) {
            (Some(r), Some(v)) => Some((r, v)),
            _ => None,
        };
        Ok((bce(&out.soft, &gt)?, image_psnr(image, &out.immunized)?, local))
    });
    let per: Vec<_> = per.into_iter().collect::<Result<_>>()?;
    let locals: Vec<(f64, f64)> = per.iter().filter_map(|p| p.2).collect();
    Ok(TrainingTamperReport {
        samples: per.len(),
        bce: mean(per.iter().map(|p| p.0)).unwrap_or(f64::NAN),
        immunized_psnr: mean(per.iter().map(|p| p.1)).unwrap_or(f64::NAN),
        recovered_l_psnr: mean(locals.iter().map(|l| l.0)).unwrap_or(f64::NAN),
        rectified_l_psnr: mean(locals.iter().map(|l| l.1)).unwrap_or(f64::NAN),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    /// CSV with a `# config_hash=` first line; blank cells are undefined
    /// metrics.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# config_hash={}\ncell,samples,bce,l_psnr,psnr,ssim,note\n", self.config_hash);
        for r in self.rows.iter().chain(&self.bands) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.cell,
                r.samples,
                fmt_opt(r.bce),
                fmt_opt(r.l_psnr),
                fmt_opt(r.psnr),
                fmt_opt(r.ssim),
                r.note
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| config_err(e.to_string()))
    }

    /// Write `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| ImugeError::io(dir, e))?;
        for (name, text) in [("metrics.csv", self.to_csv()), ("metrics.json", self.to_json()?)] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| ImugeError::io(&p, e))?;
        }
        Ok(())
    }

    pub fn row(&self, cell: &str) -> Option<&CellResult> {
        self.rows.iter().chain(&self.bands).find(|r| r.cell == cell)
    }
}

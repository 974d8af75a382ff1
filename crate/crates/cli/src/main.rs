use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imuge_core::appio::{
    load_dataset, load_image, load_mask, resize, save_artifact, save_mask_artifact, Checkpoint, RunConfig, SaveFormat, Split,
};
use imuge_core::attacks::{AttackParams, AttackPlan, BenignKind, TamperKind};
use imuge_core::evalmetrics::{evaluate_grid, image_psnr, GridConfig};
use imuge_core::masks::{localize, rectify, sample_tamper_mask, Mask};
use imuge_core::models::ImugeModel;
use imuge_core::training::{load_weights, train, TrainRun, Trainer};
use imuge_core::ImugeError;
use imuge_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] ImugeError),
    #[error("{0}")]
    Usage(String),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "imuge", version, about = "Image immunization: immunize, attack, localize, recover, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (flat TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Trained weights; without it a freshly initialised model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train all five networks on the configured dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Write immunized images and a normalized residual visualization.
    Immunize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Tamper an image and apply one benign distortion; writes the attacked
    /// image and the ground-truth mask.
    Attack {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        /// awgn, blur, rescale, jpeg, crop or identity.
        #[arg(long, default_value = "identity")]
        kind: String,
        /// replace_image, fill_color, clone_stamp or none.
        #[arg(long, default_value = "clone_stamp")]
        tamper: String,
        /// JPEG quality factor.
        #[arg(long, default_value_t = 90, value_parser = clap::value_parser!(u8).range(1..=100))]
        qf: u8,
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
        #[arg(long, default_value_t = 0.7)]
        keep: f64,
        #[arg(long, default_value_t = 5)]
        kernel: usize,
        /// Source image for replace_image.
        #[arg(long)]
        donor: Option<PathBuf>,
    },
    /// Predict soft and refined tamper masks for attacked images.
    Localize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        input: PathBuf,
    },
    /// Rectify and recover an attacked image.
    Recover {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        input: PathBuf,
        /// Binary mask to use instead of the predicted one.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Original image; reports PSNR against the recovery.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run the attack grid over the evaluation set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Evaluation image folder; overrides the configured one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also report the tamper-degree bands.
        #[arg(long)]
        stratified: bool,
    },
}

struct Run {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
}

fn setup(common: &Common) -> Result<Run> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io { path: out.clone(), source: e })?;
    cfg.save(&out.join("config.toml"))?;
    Ok(Run { hash: cfg.hash(), cfg, out })
}

fn load_model(run: &Run, args: &ModelArgs) -> Result<ImugeModel> {
    let mut model = ImugeModel::new(run.cfg.model(), run.cfg.seed)?;
    match &args.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.meta.config_hash != run.hash {
                log::warn!("checkpoint was written under config {}, running under {}", ckpt.meta.config_hash, run.hash);
            }
            load_weights(&mut model, &ckpt)?;
        }
        None => log::warn!("no --checkpoint given; using untrained weights"),
    }
    Ok(model)
}

/// Load an image, resizing to the configured size when its sides are not
/// multiples of 16.
fn load_input(run: &Run, path: &Path) -> Result<Tensor> {
    let t = load_image(path)?;
    let (_, _, h, w) = t.dims4().map_err(ImugeError::from)?;
    if h % 16 == 0 && w % 16 == 0 {
        return Ok(t);
    }
    let s = run.cfg.image_size;
    log::warn!("{} is {h}x{w}; resizing to {s}x{s}", path.display());
    Ok(resize(&t, s, s)?)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn write_manifest(run: &Run, command: &str, artifacts: &[PathBuf], extra: serde_json::Value) -> Result<()> {
    let path = run.out.join(format!("manifest-{command}.json"));
    let doc = json!({
        "command": command,
        "config_hash": run.hash,
        "artifacts": artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "details": extra,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| CliError::Io { path, source: e })
}

/// Residual stretched to the full range for display.
fn normalized(r: &Tensor) -> Tensor {
    let (lo, hi) = r.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        r.map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0)
    } else {
        r.map(|_| 0.0)
    }
}

fn cmd_train(common: &Common, resume: Option<&Path>, max_steps: Option<u64>) -> Result<()> {
    let run = setup(common)?;
    let model = ImugeModel::new(run.cfg.model(), run.cfg.seed)?;
    let mut trainer = Trainer::new(model, run.cfg.train(), run.cfg.masks())?;
    if let Some(p) = resume {
        trainer.restore(&Checkpoint::load(p)?, &run.hash)?;
        log::info!("resuming at step {}", trainer.step);
    }
    let dataset = load_dataset(&run.cfg.dataset(Split::Train))?;
    let max_steps = max_steps.or((run.cfg.max_steps > 0).then_some(run.cfg.max_steps));
    let summary = train(
        &mut trainer,
        &dataset,
        &TrainRun {
            out_dir: run.out.clone(),
            config_hash: run.hash.clone(),
            max_steps,
        },
    )?;
    println!("trained {} steps; last {:?}", summary.steps, summary.last);
    let mut artifacts = summary.checkpoints.clone();
    artifacts.push(run.out.join("train_log.csv"));
    write_manifest(&run, "train", &artifacts, json!({ "steps": summary.steps }))
}

fn cmd_immunize(common: &Common, margs: &ModelArgs, inputs: &[PathBuf]) -> Result<()> {
    let run = setup(common)?;
    let model = load_model(&run, margs)?;
    let mut artifacts = Vec::new();
    for input in inputs {
        let x = load_input(&run, input)?;
        let g = Graph::inference();
        let (imm, r) = model.immunize(&g, g.constant(x.clone()))?;
        let (imm, r) = (imm.value(), r.value());
        let name = stem(input);
        let (pi, pr) = (run.out.join(format!("{name}.immunized.png")), run.out.join(format!("{name}.residual.png")));
        save_artifact(&pi, &imm, SaveFormat::Png, &run.hash)?;
        save_artifact(&pr, &normalized(&r), SaveFormat::Png, &run.hash)?;
        println!("{}: PSNR(original, immunized) = {:.2} dB", input.display(), image_psnr(&x, &imm)?);
        artifacts.extend([pi, pr]);
    }
    write_manifest(&run, "immunize", &artifacts, json!({}))
}

#[allow(clippy::too_many_arguments)]
fn cmd_attack(
    common: &Common,
    input: &Path,
    kind: &str,
    tamper: &str,
    qf: u8,
    scale: f64,
    keep: f64,
    kernel: usize,
    donor: Option<&Path>,
) -> Result<()> {
    let run = setup(common)?;
    let benign = BenignKind::parse(kind)?;
    let tamper = TamperKind::parse(tamper)?;
    let x = load_input(&run, input)?;
    let (_, _, h, w) = x.dims4().map_err(ImugeError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let region = if tamper == TamperKind::None {
        Mask::zeros(h, w)
    } else {
        sample_tamper_mask(&mut rng, &run.cfg.masks(), h, w)?
    };
    let donor = match (tamper, donor) {
        (TamperKind::ReplaceImage, Some(d)) => Some(resize(&load_image(d)?, h, w)?),
        (TamperKind::ReplaceImage, None) => return Err(CliError::Usage("--tamper replace_image needs --donor".into())),
        _ => None,
    };
    let plan = AttackPlan {
        tamper,
        benign,
        params: AttackParams {
            quality: qf,
            scale,
            crop_keep: keep,
            kernel,
            shift: ((h / 4) as isize, (w / 4) as isize),
            fill: [0.6, -0.4, 0.2],
            ..AttackParams::default()
        },
        seed: run.cfg.seed,
    };
    plan.validate()?;
    let g = Graph::inference();
    let staged = if benign == BenignKind::Jpeg {
        AttackPlan {
            benign: BenignKind::Identity,
            ..plan.clone()
        }
    } else {
        plan.clone()
    };
    let out = imuge_core::attacks::execute_plan(g.constant(x), &staged, &region, donor.as_ref(), run.cfg.rounding)?;
    let (img_path, format) = if benign == BenignKind::Jpeg {
        (run.out.join("attacked.jpg"), SaveFormat::Jpeg { quality: qf })
    } else {
        (run.out.join("attacked.png"), SaveFormat::Png)
    };
    save_artifact(&img_path, &out.image.value(), format, &run.hash)?;
    let mask_path = run.out.join("mask.png");
    save_mask_artifact(&mask_path, &out.mask, &run.hash)?;
    println!("attacked image {} (tampered fraction {:.3})", img_path.display(), out.mask.fraction());
    write_manifest(&run, "attack", &[img_path, mask_path], json!({ "plan": plan }))
}

fn cmd_localize(common: &Common, margs: &ModelArgs, input: &Path) -> Result<()> {
    let run = setup(common)?;
    let model = load_model(&run, margs)?;
    let x = load_input(&run, input)?;
    let g = Graph::inference();
    let soft = Mask::from_tensor(&model.verify(&g, g.constant(x))?.value())?;
    let refined = localize(&soft);
    let (ps, pr) = (run.out.join("soft_mask.png"), run.out.join("refined_mask.png"));
    save_mask_artifact(&ps, &soft, &run.hash)?;
    save_mask_artifact(&pr, &refined, &run.hash)?;
    println!("tampered fraction {:.3}", refined.fraction());
    write_manifest(&run, "localize", &[ps, pr], json!({ "tampered_fraction": refined.fraction() }))
}

fn cmd_recover(common: &Common, margs: &ModelArgs, input: &Path, mask: Option<&Path>, reference: Option<&Path>) -> Result<()> {
    let run = setup(common)?;
    let model = load_model(&run, margs)?;
    let x = load_input(&run, input)?;
    let (_, _, h, w) = x.dims4().map_err(ImugeError::from)?;
    let g = Graph::inference();
    let m = match mask {
        Some(p) => {
            let m = load_mask(p)?;
            if m.dims() != (h, w) {
                return Err(CliError::Usage(format!("mask is {:?}, image is {h}x{w}", m.dims())));
            }
            Mask::from_fn(h, w, |y, x| if m.get(y, x) >= 0.5 { 1.0 } else { 0.0 })
        }
        None => localize(&Mask::from_tensor(&model.verify(&g, g.constant(x.clone()))?.value())?),
    };
    let mt = m.to_tensor();
    let rect = rectify(g.constant(x), &mt)?;
    let rec = model.recover(&g, rect, &mt)?.value();
    let (pv, pr) = (run.out.join("rectified.png"), run.out.join("recovered.png"));
    save_artifact(&pv, &rect.value(), SaveFormat::Png, &run.hash)?;
    save_artifact(&pr, &rec, SaveFormat::Png, &run.hash)?;
    let mut details = json!({ "tampered_fraction": m.fraction() });
    if let Some(r) = reference {
        let orig = load_input(&run, r)?;
        let p = image_psnr(&orig, &rec)?;
        println!("PSNR(reference, recovered) = {p:.2} dB");
        details["psnr"] = json!(p);
    }
    write_manifest(&run, "recover", &[pv, pr], details)
}

fn cmd_evaluate(common: &Common, margs: &ModelArgs, data: Option<&Path>, stratified: bool) -> Result<()> {
    let run = setup(common)?;
    let model = load_model(&run, margs)?;
    let mut dcfg = run.cfg.dataset(Split::Eval);
    if let Some(d) = data {
        dcfg.root = d.to_path_buf();
    }
    let dataset = load_dataset(&dcfg)?;
    let mut grid = GridConfig::from_run(&run.cfg);
    grid.stratified |= stratified;
    let report = evaluate_grid(&model, &dataset, &grid)?;
    report.write(&run.out)?;
    print!("{}", report.to_csv());
    write_manifest(
        &run,
        "evaluate",
        &[run.out.join("metrics.csv"), run.out.join("metrics.json")],
        json!({ "images": report.images }),
    )
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume, max_steps } => cmd_train(&common, resume.as_deref(), max_steps),
        Command::Immunize { common, model, inputs } => cmd_immunize(&common, &model, &inputs),
        Command::Attack {
            common,
            input,
            kind,
            tamper,
            qf,
            scale,
            keep,
            kernel,
            donor,
        } => cmd_attack(&common, &input, &kind, &tamper, qf, scale, keep, kernel, donor.as_deref()),
        Command::Localize { common, model, input } => cmd_localize(&common, &model, &input),
        Command::Recover {
            common,
            model,
            input,
            mask,
            reference,
        } => cmd_recover(&common, &model, &input, mask.as_deref(), reference.as_deref()),
        Command::Evaluate {
            common,
            model,
            data,
            stratified,
        } => cmd_evaluate(&common, &model, data.as_deref(), stratified),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

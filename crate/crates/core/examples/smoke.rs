//! Overfit run on 16 images; prints the smoke metrics as training goes.
//! Env: WIDTH, LR, STEPS (per half), EVERY.

use std::time::Instant;

use imuge_core::appio::{load_dataset, DatasetConfig};
use imuge_core::evalmetrics::evaluate_training_tampers;
use imuge_core::masks::MaskSpec;
use imuge_core::models::{ImugeModel, ModelConfig};
use imuge_core::training::{batch_indices, TrainConfig, Trainer};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let width: usize = env("WIDTH", 16);
    let lr: f64 = env("LR", 2e-4);
    let half: usize = env("STEPS", 500);
    let every: u64 = env("EVERY", 100);
    let ds = load_dataset(&DatasetConfig {
        root: "crates/core/tests/fixtures/natural".into(),
        limit: 16,
        ..DatasetConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs_total: 2,
        decoupling_lift_epoch: 1,
        steps_per_epoch: half,
        progressive: false,
        learning_rate: lr,
        ..TrainConfig::default()
    };
    let model = ImugeModel::new(ModelConfig { base_width: width, ..ModelConfig::default() }, 0).unwrap();
    let mut t = Trainer::new(model, cfg.clone(), MaskSpec::training()).unwrap();
    let start = Instant::now();
    let (mut acc, mut k) = ([0.0; 3], 0.0);
    while t.step < 2 * half as u64 {
        let p = t.phase(half).unwrap();
        let input = t.sample_input(ds.batch(&batch_indices(&cfg, ds.len(), t.step)).unwrap(), t.step).unwrap();
        let o = t.train_step(&input, &p).unwrap();
        acc[0] += o.report.l_cls;
        acc[1] += o.report.l_r;
        acc[2] += o.report.l_c;
        k += 1.0;
        if t.step.is_multiple_of(every) {
            let r = evaluate_training_tampers(&t.model, &ds, &cfg.attacks, &t.masks, 2, 1).unwrap();
            println!(
                "step {} {:.0}s train cls {:.4} r {:.4} c {:.2e} | eval bce {:.4} imm {:.2} rec {:.2} rect {:.2}",
                t.step,
                start.elapsed().as_secs_f64(),
                acc[0] / k,
                acc[1] / k,
                acc[2] / k,
                r.bce,
                r.immunized_psnr,
                r.recovered_l_psnr,
                r.rectified_l_psnr
            );
            acc = [0.0; 3];
            k = 0.0;
        }
    }
}

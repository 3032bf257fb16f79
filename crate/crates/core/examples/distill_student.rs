//! Trains a teacher on generated images, then half-width students with no
//! distillation, output distillation and the pre-ReLU feature method, and
//! compares their errors and agreement with the teacher.
//!
//!     cargo run --release --example distill_student

use margin_distill::data::synth_blobs;
use margin_distill::distill::{DistillConfig, DistillMethod};
use margin_distill::nn::{BlockKind, ModelSpec};
use margin_distill::train::{train_student, train_teacher, TrainConfig};

fn spec(width: usize) -> ModelSpec {
    ModelSpec {
        block_kind: BlockKind::SimpleConvBnRelu,
        blocks_per_group: 1,
        groups: vec![width, 2 * width],
        width_multiplier: 1.0,
        num_classes: 6,
        input_shape: [1, 12, 12],
    }
}

fn main() -> margin_distill::Result<()> {
    let (train, test) = synth_blobs(6, 120, 12, 11)?.train_test_split(180, 11)?;
    let cfg = TrainConfig {
        epochs: 6,
        lr_decay_epochs: vec![3, 5],
        batch_size: 32,
        ..TrainConfig::default()
    };
    let teacher = train_teacher(&spec(16), &train, &test, &cfg, None)?;
    println!(
        "teacher: {:.2}% error",
        teacher.metrics.last().expect("one epoch").test_error_pct
    );

    let mut proposed = DistillConfig::new(DistillMethod::Proposed);
    proposed.alpha = 1e-5;
    let methods = [
        DistillConfig::new(DistillMethod::None),
        DistillConfig::new(DistillMethod::Kd),
        proposed,
    ];
    println!("{:<10} {:>8} {:>10} {:>8}", "student", "error %", "KL(t||s)", "CE");
    for dcfg in &methods {
        let cfg = TrainConfig { seed: 1, ..cfg.clone() };
        let run = train_student(&spec(8), &teacher.model, &train, &test, &cfg, dcfg, None, None)?;
        let last = run.metrics.last().expect("one epoch");
        println!(
            "{:<10} {:>8.2} {:>10.4} {:>8.4}",
            format!("{:?}", dcfg.method),
            last.test_error_pct,
            last.kl_with_teacher.expect("students report KL"),
            last.ce_with_gt
        );
    }
    Ok(())
}

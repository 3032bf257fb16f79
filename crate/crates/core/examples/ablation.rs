//! The four-rung ablation (block-end L2, pre-ReLU position, teacher BN in
//! training mode, margin ReLU with partial L2) on a small generated
//! dataset, driven through the same config type the command line uses.
//!
//!     cargo run --release --example ablation -- [threads]

use margin_distill::cli::{ablate, ablation_matrix, ExperimentConfig};

const CONFIG: &str = include_str!("../configs/synth_smoke.toml");

fn main() -> margin_distill::Result<()> {
    let threads: usize = std::env::args().nth(1).map_or(1, |a| a.parse().expect("threads"));
    let mut cfg = ExperimentConfig::from_toml(CONFIG)?;
    cfg.out_dir = std::env::temp_dir().join("ablation-example");

    for (i, rung) in ablation_matrix(&cfg.distill).iter().enumerate() {
        let d = &rung.distill;
        println!(
            "rung {}: {:<28} {:?} at {:?}, teacher BN {:?}",
            i + 1,
            rung.label,
            d.method,
            d.tap_position,
            d.teacher_bn_mode
        );
    }
    let report = ablate(cfg, threads)?;
    println!();
    print!("{report}");
    println!("rung 4 mean ≤ rung 1 mean: {}", report.full_method_not_worse());
    Ok(())
}

//! Channel margins three ways: the closed form from (μ, σ), the empirical
//! mean of a trained teacher's negative pre-ReLU responses, and the BN
//! parameters of that same teacher.
//!
//!     cargo run --release --example margins

use margin_distill::data::{synth_blobs, BatchPlan, BatchStream, Normalizer};
use margin_distill::distill::{
    margin_closed_form, margin_empirical, margins_from_bn, MarginSpec, TruncatedGaussianParams,
};
use margin_distill::nn::{BlockKind, ModelSpec};
use margin_distill::tensor::BnMode;
use margin_distill::train::{train_teacher, TrainConfig};

fn main() -> margin_distill::Result<()> {
    println!("closed-form margin E[x | x < 0] for x ~ N(mu, sigma^2)");
    print!("{:>6}", "mu");
    for sigma in [0.5, 1.0, 2.0] {
        print!("  sigma={sigma:<4}");
    }
    println!();
    for mu in [-2.0, -1.0, 0.0, 1.0, 2.0, 6.0] {
        print!("{mu:>6}");
        for sigma in [0.5, 1.0, 2.0] {
            let m = margin_closed_form(TruncatedGaussianParams::new(mu, sigma)?)?;
            print!("  {m:>11.6}");
        }
        println!();
    }

    let (train, test) = synth_blobs(4, 150, 12, 3)?.train_test_split(100, 3)?;
    let spec = ModelSpec {
        block_kind: BlockKind::SimpleConvBnRelu,
        blocks_per_group: 1,
        groups: vec![8, 16],
        width_multiplier: 1.0,
        num_classes: 4,
        input_shape: [1, 12, 12],
    };
    let cfg = TrainConfig {
        epochs: 4,
        lr_decay_epochs: vec![2, 3],
        batch_size: 32,
        ..TrainConfig::default()
    };
    let teacher = train_teacher(&spec, &train, &test, &cfg, None)?.model;

    // the BN-based value assumes Gaussian pre-activations, so the two only
    // roughly agree on real features
    let norm = Normalizer::fit(&train)?;
    let stream = BatchStream::new(&train, &norm, &BatchPlan::sequential(100), 0, false)?;
    let empirical = margin_empirical(&teacher, stream.map(|b| b.images), BnMode::Evaluation)?;
    let from_bn = margins_from_bn(&teacher)?;
    for (tap, emp) in &empirical.taps {
        let bn = from_bn.get(tap).expect("same taps");
        println!("\n{tap}: channel  empirical  from BN");
        for (c, (e, b)) in emp.iter().zip(bn).enumerate() {
            println!("{c:>13}  {e:>9.4}  {b:>7.4}");
        }
    }

    let table = from_bn.to_table();
    assert_eq!(MarginSpec::from_table(&table)?, from_bn);
    println!("\nsaved form:\n{}", table.lines().take(4).collect::<Vec<_>>().join("\n"));
    Ok(())
}

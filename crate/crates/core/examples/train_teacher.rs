//! Trains a teacher CNN on the bundled 10k-image MNIST subset, writes its
//! metrics and checkpoint, and reloads the checkpoint.
//!
//!     cargo run --release --example train_teacher -- [epochs] [out_dir]

use margin_distill::data::{load_mnist_dir, Normalizer};
use margin_distill::nn::{checkpoint, BlockKind, Model, ModelSpec};
use margin_distill::train::{evaluate, train_teacher, MetricsWriter, TrainConfig};
use std::path::{Path, PathBuf};

fn main() -> margin_distill::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(4, |a| a.parse().expect("epochs"));
    let out: PathBuf = args.next().map_or_else(|| std::env::temp_dir().join("teacher-example"), PathBuf::from);

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mnist10k");
    let (train, test) = load_mnist_dir(&dir)?;
    println!("{} train / {} test images of {:?}", train.len(), test.len(), train.image_shape());

    let spec = ModelSpec {
        block_kind: BlockKind::SimpleConvBnRelu,
        blocks_per_group: 1,
        groups: vec![16, 32, 64],
        width_multiplier: 1.0,
        num_classes: 10,
        input_shape: [1, 28, 28],
    };
    let cfg = TrainConfig {
        epochs,
        lr_decay_epochs: vec![epochs / 2, epochs * 3 / 4].into_iter().filter(|&e| e > 0).collect(),
        ..TrainConfig::default()
    };
    println!("{} parameters", spec.parameter_count());
    let mut sink = MetricsWriter::create(&out, "teacher")?;
    let run = train_teacher(&spec, &train, &test, &cfg, Some(&mut sink))?;
    let ckpt = out.join("teacher.dfrg");
    checkpoint::save(&run.model, &ckpt)?;

    let mut reloaded = Model::build(&spec, 0)?;
    checkpoint::load_into(&mut reloaded, &ckpt)?;
    let norm = Normalizer::fit(&train)?;
    println!(
        "test error {:.2}% (reloaded: {:.2}%), metrics in {}",
        run.metrics.last().expect("one epoch").test_error_pct,
        evaluate(&reloaded, &test, &norm)?,
        sink.csv_path().display()
    );
    Ok(())
}

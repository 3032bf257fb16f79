//! Dataset plumbing: the bundled MNIST subset, IDX and CIFAR binary
//! round trips, normalization and shuffled batches.
//!
//!     cargo run --release --example datasets

use margin_distill::data::{
    encode_cifar, encode_idx, load_mnist_dir, parse_cifar, parse_idx, synth_blobs, BatchPlan,
    BatchStream, CifarVariant, Dataset, Normalizer, Split,
};
use std::path::Path;

fn main() -> margin_distill::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mnist10k");
    let (train, test) = load_mnist_dir(&dir)?;
    let mut counts = vec![0; train.num_classes()];
    train.labels().iter().for_each(|&l| counts[l] += 1);
    println!("MNIST subset: {} train, {} test, per class {counts:?}", train.len(), test.len());

    let (images, labels) = encode_idx(&test)?;
    assert_eq!(parse_idx(&images, &labels, Split::Test)?, test);
    println!("IDX round trip: {} + {} bytes, identical", images.len(), labels.len());

    // a fake 3-channel 32×32 set exercises the CIFAR-10 record layout
    let pixels = (0..20 * 3 * 32 * 32).map(|i| (i * 7 % 251) as u8).collect();
    let cifar = Dataset::new(pixels, [20, 3, 32, 32], (0..20).map(|i| i % 10).collect(), 10, Split::Train)?;
    let bytes = encode_cifar(&cifar, CifarVariant::Cifar10)?;
    assert_eq!(parse_cifar(&bytes, CifarVariant::Cifar10, Split::Train)?, cifar);
    println!("CIFAR-10 round trip: {} records of {} bytes", cifar.len(), CifarVariant::Cifar10.record_bytes());

    let norm = Normalizer::fit(&train)?;
    println!("normalizer: mean {:.4}, std {:.4}", norm.mean[0], norm.std[0]);
    let plan = BatchPlan {
        batch_size: 128,
        shuffle_seed: 5,
        drop_last: false,
        shuffle: true,
    };
    for epoch in 0..2 {
        let stream = BatchStream::new(&train, &norm, &plan, epoch, false)?;
        let n = stream.num_batches();
        let first = stream.take(1).next().expect("non-empty");
        println!(
            "epoch {epoch}: {n} batches, first batch {:?}, starts with images {:?}",
            first.images.dims(),
            &first.indices[..4]
        );
    }

    let blobs = synth_blobs(3, 4, 6, 0)?;
    println!("synthetic blobs: {:?}, labels {:?}", blobs.dims(), blobs.labels());
    Ok(())
}

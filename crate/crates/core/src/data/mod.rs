//! Datasets: IDX / CIFAR ingestion, synthetic blobs, normalization,
//! augmentation and deterministic batching.

mod batch;
mod formats;

pub use batch::{augment_image, Batch, BatchPlan, BatchStream, Normalizer};
pub use formats::{
    encode_cifar, encode_idx, load_cifar_binary, load_idx, load_mnist_dir, parse_cifar, parse_idx,
    write_idx, CifarVariant, CIFAR_IMAGE_BYTES, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// u8 images in NCHW order with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<u8>,
    dims: [usize; 4],
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    /// CIFAR-100 coarse labels, kept so records re-encode byte for byte.
    pub coarse_labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        dims: [usize; 4],
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Parameter(format!(
                "dataset extents must be positive, got {dims:?}"
            )));
        }
        if images.len() != dims.iter().product::<usize>() {
            return Err(Error::Parameter(format!(
                "{} pixel bytes do not fill {dims:?}",
                images.len()
            )));
        }
        if labels.len() != dims[0] {
            return Err(Error::Parameter(format!(
                "{} labels for {} images",
                labels.len(),
                dims[0]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Parameter(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            dims,
            labels,
            num_classes,
            split,
            coarse_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.dims[0] == 0
    }

    /// `[M, C, H, W]`
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn image_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Widens the class count, e.g. when a test split lacks the top class.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if num_classes < self.num_classes {
            return Err(Error::Parameter(format!(
                "cannot shrink class count {} to {num_classes}",
                self.num_classes
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut dims = self.dims;
        dims[0] = indices.len();
        let mut ds = Dataset::new(images, dims, labels, self.num_classes, split)?;
        ds.coarse_labels = self
            .coarse_labels
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i]).collect());
        Ok(ds)
    }

    /// First `n` images.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }

    /// Seeded shuffle, then the first `test_count` images become the Test
    /// split and the rest the Train split.
    pub fn train_test_split(&self, test_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if test_count == 0 || test_count >= self.len() {
            return Err(Error::Parameter(format!(
                "test count {test_count} must lie in 1..{}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut crate::seeded_rng(seed));
        let test = self.subset(&idx[..test_count], Split::Test)?;
        let train = self.subset(&idx[test_count..], Split::Train)?;
        Ok((train, test))
    }
}

/// Class-conditional Gaussian-texture images (single channel).
///
/// Each class gets a smooth mean pattern built from a few random Gaussian
/// bumps; every sample adds i.i.d. pixel noise and a random brightness
/// offset. Labels cycle through the classes so every prefix is balanced.
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || per_class == 0 || image_size == 0 {
        return Err(Error::Parameter(format!(
            "synth_blobs needs ≥2 classes and positive sizes, got ({num_classes}, {per_class}, {image_size})"
        )));
    }
    let mut rng = crate::seeded_rng(seed);
    let s = image_size as f64;
    let patterns: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut p = vec![0.0; image_size * image_size];
            for _ in 0..3 {
                let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let width = rng.gen_range(0.12..0.3) * s;
                let amp = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                for y in 0..image_size {
                    for x in 0..image_size {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        p[y * image_size + x] += amp * (-d2 / (2.0 * width * width)).exp();
                    }
                }
            }
            p
        })
        .collect();
    let m = num_classes * per_class;
    let mut images = Vec::with_capacity(m * image_size * image_size);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let k = i % num_classes;
        let offset: f64 = 12.0 * rng.sample::<f64, _>(StandardNormal);
        for &p in &patterns[k] {
            let noise: f64 = rng.sample(StandardNormal);
            let v = 128.0 + 70.0 * p + offset + 40.0 * noise;
            images.push(v.round().clamp(0.0, 255.0) as u8);
        }
        labels.push(k);
    }
    Dataset::new(
        images,
        [m, 1, image_size, image_size],
        labels,
        num_classes,
        Split::Train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_blobs_is_deterministic_and_balanced() {
        let a = synth_blobs(4, 100, 12, 7).unwrap();
        let b = synth_blobs(4, 100, 12, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 400);
        for k in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 100);
        }
        assert_ne!(a, synth_blobs(4, 100, 12, 8).unwrap());
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(Dataset::new(vec![0; 4], [1, 1, 2, 2], vec![3], 3, Split::Train).is_err());
        assert!(Dataset::new(vec![0; 3], [1, 1, 2, 2], vec![0], 3, Split::Train).is_err());
    }

    #[test]
    fn split_partitions_indices() {
        let ds = synth_blobs(3, 10, 4, 1).unwrap();
        let (train, test) = ds.train_test_split(6, 2).unwrap();
        assert_eq!((train.len(), test.len()), (24, 6));
        assert_eq!(train.split(), Split::Train);
        assert_eq!(test.split(), Split::Test);
        let mut counts = vec![0; 3];
        for &l in train.labels().iter().chain(test.labels()) {
            counts[l] += 1;
        }
        assert_eq!(counts, vec![10, 10, 10]);
    }
}

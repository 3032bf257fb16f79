//! IDX (MNIST family) and CIFAR binary codecs.

use super::{Dataset, Split};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    /// 1 label byte per record, 10 classes.
    Cifar10,
    /// coarse + fine label bytes per record, 100 fine classes.
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated while reading {what}")))
}

/// Parses an IDX image file and label file already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let magic = be_u32(images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(images, 4, "image count")? as usize;
    let rows = be_u32(images, 8, "row count")? as usize;
    let cols = be_u32(images, 12, "column count")? as usize;
    let need = 16 + n * rows * cols;
    if images.len() < need {
        return Err(Error::format(
            images.len() as u64,
            format!("image file truncated: {n} images of {rows}×{cols} need {need} bytes"),
        ));
    }
    if images.len() > need {
        return Err(Error::format(
            need as u64,
            "trailing bytes after image data",
        ));
    }
    let magic = be_u32(labels, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let m = be_u32(labels, 4, "label count")? as usize;
    if m != n {
        return Err(Error::format(
            4,
            format!("label count {m} differs from image count {n}"),
        ));
    }
    if labels.len() != 8 + n {
        return Err(Error::format(
            labels.len().min(8 + n) as u64,
            format!(
                "label file holds {} bytes of labels, expected {n}",
                labels.len().saturating_sub(8)
            ),
        ));
    }
    let label_vec: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let num_classes = label_vec.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(
        images[16..].to_vec(),
        [n, 1, rows, cols],
        label_vec,
        num_classes,
        split,
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?, split)
}

/// Loads the standard MNIST file pair names from `dir` as (train, test).
/// Both splits report the larger of their class counts.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    let k = train.num_classes().max(test.num_classes());
    Ok((train.with_num_classes(k)?, test.with_num_classes(k)?))
}

/// Encodes a single-channel dataset as (images, labels) IDX byte streams.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [n, c, h, w] = ds.dims();
    if c != 1 {
        return Err(Error::Parameter(format!(
            "IDX images are single-channel, dataset has {c}"
        )));
    }
    let mut images = Vec::with_capacity(16 + ds.images().len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(ds.images());
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in ds.labels() {
        labels.push(
            u8::try_from(l).map_err(|_| Error::Parameter(format!("label {l} exceeds a byte")))?,
        );
    }
    Ok((images, labels))
}

pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// Parses concatenated CIFAR binary records. For CIFAR-100 the fine label
/// (second byte) is kept.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let rec = variant.record_bytes();
    if bytes.is_empty() {
        return Err(Error::format(0, "empty CIFAR file"));
    }
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec * rec;
        return Err(Error::format(
            whole as u64,
            format!(
                "{} bytes is not a multiple of the {rec}-byte record size",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::new();
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        if variant == CifarVariant::Cifar100 {
            coarse.push(r[0]);
        }
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::format(
                (i * rec + variant.label_bytes() - 1) as u64,
                format!(
                    "label {label} out of range for {} classes",
                    variant.num_classes()
                ),
            ));
        }
        labels.push(label);
        images.extend_from_slice(&r[variant.label_bytes()..]);
    }
    let mut ds = Dataset::new(images, [n, 3, 32, 32], labels, variant.num_classes(), split)?;
    if variant == CifarVariant::Cifar100 {
        ds.coarse_labels = Some(coarse);
    }
    Ok(ds)
}

/// Loads and concatenates CIFAR batch files in the given order.
pub fn load_cifar_binary<P: AsRef<Path>>(
    paths: &[P],
    variant: CifarVariant,
    split: Split,
) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Config("CIFAR loader needs at least one file".into()));
    }
    let mut bytes = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let chunk = fs::read(p)?;
        let rec = variant.record_bytes();
        if chunk.len() % rec != 0 {
            return Err(Error::format(
                (chunk.len() / rec * rec) as u64,
                format!(
                    "{}: {} bytes is not a multiple of the {rec}-byte record size",
                    p.display(),
                    chunk.len()
                ),
            ));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar(&bytes, variant, split)
}

/// Encodes a dataset as CIFAR records. CIFAR-100 records use the stored
/// coarse labels, or 0 when the dataset has none.
pub fn encode_cifar(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if ds.dims()[1..] != [3, 32, 32] {
        return Err(Error::Parameter(format!(
            "CIFAR records are 3×32×32, dataset is {:?}",
            ds.dims()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_bytes());
    for (i, &l) in ds.labels().iter().enumerate() {
        if variant == CifarVariant::Cifar100 {
            out.push(ds.coarse_labels.as_ref().map_or(0, |c| c[i]));
        }
        out.push(
            u8::try_from(l).map_err(|_| Error::Parameter(format!("label {l} exceeds a byte")))?,
        );
        out.extend_from_slice(ds.image(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend_from_slice(&[1, 2, 3, 4, 250, 251, 252, 253]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    #[test]
    fn parses_hand_written_idx() {
        let (im, lb) = idx_pair();
        let ds = parse_idx(&im, &lb, Split::Train).unwrap();
        assert_eq!(ds.dims(), [2, 1, 2, 2]);
        assert_eq!(ds.images(), &[1, 2, 3, 4, 250, 251, 252, 253]);
        assert_eq!(ds.labels(), &[7, 3]);
        assert_eq!(ds.num_classes(), 8);
    }

    #[test]
    fn idx_errors_name_offsets() {
        let (im, mut lb) = idx_pair();
        lb[7] = 3; // label count 3 vs 2 images
        let err = parse_idx(&im, &lb, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");

        let (mut im, lb) = idx_pair();
        im[3] = 0x01;
        assert!(matches!(
            parse_idx(&im, &lb, Split::Train),
            Err(Error::Format { offset: 0, .. })
        ));

        let (im, lb) = idx_pair();
        let err = parse_idx(&im[..20], &lb, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 20, .. }), "{err}");
    }

    #[test]
    fn cifar_single_record_keeps_planar_order() {
        let mut rec = vec![6u8];
        rec.extend((0..CIFAR_IMAGE_BYTES).map(|i| (i / 1024) as u8 * 100 + (i % 7) as u8));
        let ds = parse_cifar(&rec, CifarVariant::Cifar10, Split::Test).unwrap();
        assert_eq!(ds.dims(), [1, 3, 32, 32]);
        assert_eq!(ds.labels(), &[6]);
        assert_eq!(ds.image(0)[0], 0);
        assert_eq!(ds.image(0)[1024], 100 + (1024 % 7) as u8);
        assert_eq!(ds.image(0)[2048], 200 + (2048 % 7) as u8);
        assert_eq!(encode_cifar(&ds, CifarVariant::Cifar10).unwrap(), rec);
    }

    #[test]
    fn cifar100_uses_fine_label_and_truncation_errors() {
        let mut rec = vec![3u8, 87];
        rec.extend(std::iter::repeat(9).take(CIFAR_IMAGE_BYTES));
        let ds = parse_cifar(&rec, CifarVariant::Cifar100, Split::Train).unwrap();
        assert_eq!(ds.labels(), &[87]);
        assert_eq!(ds.num_classes(), 100);
        assert_eq!(encode_cifar(&ds, CifarVariant::Cifar100).unwrap(), rec);
        let mut two = rec.clone();
        two.extend_from_slice(&rec[..100]);
        let err = parse_cifar(&two, CifarVariant::Cifar100, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 3074, .. }), "{err}");
    }
}

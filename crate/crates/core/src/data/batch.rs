use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Crop padding used by augmentation.
pub const AUGMENT_PAD: usize = 4;

/// Per-channel standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.split() != Split::Train {
            return Err(Error::Parameter(
                "normalization statistics must come from a Train split".into(),
            ));
        }
        let [n, c, h, w] = train.dims();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += train.image(i)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&p| p as f64)
                    .sum::<f64>();
            }
            let mu = s / count;
            let mut sq = 0.0;
            for i in 0..n {
                sq += train.image(i)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&p| (p as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            // constant channels map to zero instead of dividing by zero
            std[ch] = (sq / count).sqrt().max(1e-12);
        }
        Ok(Normalizer { mean, std })
    }

    /// Standardizes one `[C, H, W]` image into `out`.
    pub fn apply_into(&self, image: &[u8], out: &mut [f64]) {
        let hw = image.len() / self.mean.len();
        for (i, (&p, o)) in image.iter().zip(out.iter_mut()).enumerate() {
            let c = i / hw;
            *o = (p as f64 - self.mean[c]) / self.std[c];
        }
    }

    /// Standardizes a whole dataset into one `[M, C, H, W]` tensor.
    pub fn apply(&self, ds: &Dataset) -> Result<Tensor> {
        let mut data = vec![0.0; ds.images().len()];
        let len = ds.image_len();
        for i in 0..ds.len() {
            self.apply_into(ds.image(i), &mut data[i * len..(i + 1) * len]);
        }
        Tensor::new(&ds.dims(), data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    #[serde(default)]
    pub drop_last: bool,
    #[serde(default = "yes")]
    pub shuffle: bool,
}

fn yes() -> bool {
    true
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size: must be at least 2 for batch-norm statistics, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Sequential, unshuffled plan for evaluation.
    pub fn sequential(batch_size: usize) -> Self {
        BatchPlan {
            batch_size,
            shuffle_seed: 0,
            drop_last: false,
            shuffle: false,
        }
    }
}

pub struct Batch {
    /// Normalized `[B, C, H, W]` images.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Dataset indices of the batch rows.
    pub indices: Vec<usize>,
}

/// Pads with zeros by [`AUGMENT_PAD`], crops at `(dy, dx)` and optionally
/// mirrors horizontally.
pub fn augment_image(
    image: &[u8],
    [c, h, w]: [usize; 3],
    dy: usize,
    dx: usize,
    flip: bool,
) -> Vec<u8> {
    let mut out = vec![0u8; image.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - AUGMENT_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - AUGMENT_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let ox = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + ox] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One epoch of batches. The order is a deterministic function of
/// `(shuffle_seed, epoch)`; a trailing batch of one image (which batch-norm
/// cannot normalize) is folded into the previous batch.
pub struct BatchStream<'a> {
    ds: &'a Dataset,
    norm: &'a Normalizer,
    order: Vec<usize>,
    bounds: Vec<(usize, usize)>,
    next: usize,
    augment: Option<rand_chacha::ChaCha8Rng>,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        ds: &'a Dataset,
        norm: &'a Normalizer,
        plan: &BatchPlan,
        epoch: usize,
        augment: bool,
    ) -> Result<Self> {
        plan.validate()?;
        let seed = epoch_seed(plan.shuffle_seed, epoch);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        if plan.shuffle {
            order.shuffle(&mut crate::seeded_rng(seed));
        }
        let mut bounds = Vec::new();
        let mut start = 0;
        while start < ds.len() {
            let end = (start + plan.batch_size).min(ds.len());
            bounds.push((start, end));
            start = end;
        }
        if let Some(&(s, e)) = bounds.last() {
            if e - s < plan.batch_size {
                if plan.drop_last {
                    bounds.pop();
                } else if e - s == 1 && bounds.len() > 1 {
                    bounds.pop();
                    bounds.last_mut().expect("len > 1").1 = e;
                }
            }
        }
        let augment =
            (augment && ds.split() == Split::Train).then(|| crate::seeded_rng(seed ^ 0xA5A5_5A5A));
        Ok(BatchStream {
            ds,
            norm,
            order,
            bounds,
            next: 0,
            augment,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.bounds.len()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let &(s, e) = self.bounds.get(self.next)?;
        self.next += 1;
        let indices = self.order[s..e].to_vec();
        let len = self.ds.image_len();
        let shape = self.ds.image_shape();
        let mut data = vec![0.0; indices.len() * len];
        for (row, &i) in indices.iter().enumerate() {
            let dst = &mut data[row * len..(row + 1) * len];
            match self.augment.as_mut() {
                Some(rng) => {
                    let dy = rng.gen_range(0..=2 * AUGMENT_PAD);
                    let dx = rng.gen_range(0..=2 * AUGMENT_PAD);
                    let flip = rng.gen_bool(0.5);
                    self.norm
                        .apply_into(&augment_image(self.ds.image(i), shape, dy, dx, flip), dst);
                }
                None => self.norm.apply_into(self.ds.image(i), dst),
            }
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(&shape);
        let images = Tensor::new(&dims, data).expect("batch buffer matches its shape");
        let labels = indices.iter().map(|&i| self.ds.labels()[i]).collect();
        Some(Batch {
            images,
            labels,
            indices,
        })
    }
}

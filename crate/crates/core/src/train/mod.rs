//! SGD training of teachers and distilled students, evaluation, and the
//! teacher–student similarity measures.

mod metrics;
mod run;

pub use metrics::{sig6, MetricsRecord, MetricsWriter, CSV_HEADER};
pub use run::{
    compute_margins, evaluate, predict_logits, similarity_analysis, train_student, train_teacher,
    RunOutput, Similarity,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Missing fields take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs (0-based) at which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Pad-4 random crop and horizontal flip on the training split.
    pub augment: bool,
    /// Record elapsed seconds in metrics (makes them non-reproducible).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            base_lr: 0.1,
            lr_decay_epochs: vec![10, 15],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
            augment: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr", format!("must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            );
        }
        if !(self.weight_decay >= 0.0) {
            return bad(
                "weight_decay",
                format!("must be ≥ 0, got {}", self.weight_decay),
            );
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad(
                "lr_decay_factor",
                format!("must be > 0, got {}", self.lr_decay_factor),
            );
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(
                "lr_decay_epochs",
                format!(
                    "must be strictly increasing, got {:?}",
                    self.lr_decay_epochs
                ),
            );
        }
        if self.batch_size < 2 {
            return bad(
                "batch_size",
                format!("must be at least 2, got {}", self.batch_size),
            );
        }
        Ok(())
    }

    /// `base_lr · factor^(number of decay epochs ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr * self.lr_decay_factor.powi(drops as i32)
    }
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum SGD with one velocity buffer per parameter slot.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::dim(
                "sgd_step",
                format!("parameter {} vs gradient {}", param.shape(), grad.shape()),
            ));
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.is_empty() {
            v.resize(param.numel(), 0.0);
        }
        sgd_step(
            param.data_mut(),
            grad.data(),
            v,
            lr,
            self.momentum,
            self.weight_decay,
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut p, &[0.5, 0.25], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, [1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn velocity_decays_geometrically() {
        let mut p = [0.0];
        let mut v = [1.0];
        for k in 1..=5 {
            sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0);
            assert!((v[0] - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_hand_computed_steps() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut p = [2.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.5], &mut v, lr, mu, wd);
        // v1 = 0.5 + 0.02 = 0.52, p1 = 2 − 0.052
        assert_eq!(v[0], 0.52);
        assert_eq!(p[0], 2.0 - 0.1 * 0.52);
        sgd_step(&mut p, &[-1.0], &mut v, lr, mu, wd);
        let v2 = 0.9 * 0.52 + -1.0 + 0.01 * (2.0 - 0.1 * 0.52);
        assert_eq!(v[0], v2);
        assert_eq!(p[0], 2.0 - 0.1 * 0.52 - 0.1 * v2);
    }

    #[test]
    fn schedule_steps_down() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(9), 0.1);
        assert!((cfg.lr_at(10) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(19) - 0.001).abs() < 1e-15);
        let lrs: Vec<f64> = (0..cfg.epochs).map(|e| cfg.lr_at(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(lrs.windows(2).filter(|w| w[1] < w[0]).count(), 2);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.lr_decay_epochs = vec![5, 5];
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("lr_decay_epochs"));
        cfg.lr_decay_epochs = vec![];
        cfg.momentum = 1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("momentum"));
    }
}

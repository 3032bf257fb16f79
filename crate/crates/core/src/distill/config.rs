use super::margins::MarginSource;
use crate::error::{Error, Result};
use crate::nn::TapPosition;
use crate::tensor::BnMode;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMethod {
    /// Margin-ReLU teacher, 1×1 conv + BN regressor, partial L2.
    Proposed,
    /// Output distillation on softened logits.
    Kd,
    /// Plain L2 between teacher taps and regressed student taps.
    FitnetsL2,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: DistillMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_kd_lambda")]
    pub kd_lambda: f64,
    /// One weight per active tap, shallow to deep. Empty means
    /// [`default_layer_weights`].
    #[serde(default)]
    pub layer_weights: Vec<f64>,
    #[serde(default = "default_bn_mode")]
    pub teacher_bn_mode: BnMode,
    #[serde(default = "default_position")]
    pub tap_position: TapPosition,
    #[serde(default = "default_source")]
    pub margin_source: MarginSource,
    /// Tap names to distill; empty means every tap.
    #[serde(default)]
    pub active_taps: Vec<String>,
    /// Adds the KD term to a feature-distillation loss.
    #[serde(default)]
    pub add_kd: bool,
}

fn default_alpha() -> f64 {
    1e-3
}

fn default_temperature() -> f64 {
    4.0
}

fn default_kd_lambda() -> f64 {
    1.0
}

fn default_bn_mode() -> BnMode {
    BnMode::Training
}

fn default_position() -> TapPosition {
    TapPosition::PreRelu
}

fn default_source() -> MarginSource {
    MarginSource::ClosedForm
}

/// Weight 1 on the deepest tap, halved for each shallower one.
pub fn default_layer_weights(n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.5f64.powi((n - 1 - k) as i32)).collect()
}

impl DistillConfig {
    pub fn new(method: DistillMethod) -> Self {
        DistillConfig {
            method,
            alpha: default_alpha(),
            temperature: default_temperature(),
            kd_lambda: default_kd_lambda(),
            layer_weights: Vec::new(),
            teacher_bn_mode: default_bn_mode(),
            tap_position: default_position(),
            margin_source: default_source(),
            active_taps: Vec::new(),
            add_kd: false,
        }
    }

    pub fn uses_features(&self) -> bool {
        matches!(
            self.method,
            DistillMethod::Proposed | DistillMethod::FitnetsL2
        )
    }

    pub fn uses_teacher(&self) -> bool {
        self.method != DistillMethod::None
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha: must be a finite value ≥ 0, got {}",
                self.alpha
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature: must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.kd_lambda >= 0.0) || !self.kd_lambda.is_finite() {
            return Err(Error::Config(format!(
                "kd_lambda: must be ≥ 0, got {}",
                self.kd_lambda
            )));
        }
        if let Some(w) = self
            .layer_weights
            .iter()
            .find(|w| !(**w > 0.0) || !w.is_finite())
        {
            return Err(Error::Config(format!(
                "layer_weights: every weight must be > 0, got {w}"
            )));
        }
        if self.add_kd && !self.uses_features() {
            return Err(Error::Config(
                "add_kd: only applies to proposed and fitnets_l2".into(),
            ));
        }
        Ok(())
    }

    /// Active tap names (in model order) and their weights.
    pub fn resolve_taps(&self, all_taps: &[String]) -> Result<(Vec<String>, Vec<f64>)> {
        self.validate()?;
        let active: Vec<String> = if self.active_taps.is_empty() {
            all_taps.to_vec()
        } else {
            if let Some(bad) = self.active_taps.iter().find(|t| !all_taps.contains(t)) {
                return Err(Error::Config(format!(
                    "active_taps: unknown tap '{bad}', model has {all_taps:?}"
                )));
            }
            all_taps
                .iter()
                .filter(|t| self.active_taps.contains(t))
                .cloned()
                .collect()
        };
        let weights = if self.layer_weights.is_empty() {
            default_layer_weights(active.len())
        } else if self.layer_weights.len() == active.len() {
            self.layer_weights.clone()
        } else {
            return Err(Error::Config(format!(
                "layer_weights: {} weights for {} active taps",
                self.layer_weights.len(),
                active.len()
            )));
        };
        Ok((active, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_toward_shallow_taps() {
        assert_eq!(default_layer_weights(3), vec![0.25, 0.5, 1.0]);
        assert_eq!(default_layer_weights(1), vec![1.0]);
    }

    #[test]
    fn validation_names_fields() {
        let mut c = DistillConfig::new(DistillMethod::Proposed);
        c.validate().unwrap();
        c.alpha = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("alpha"));
        c.alpha = 0.0;
        c.temperature = 0.0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("temperature"));
        c.temperature = 1.0;
        c.layer_weights = vec![1.0, 0.0];
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("layer_weights"));
    }

    #[test]
    fn tap_subsets() {
        let all: Vec<String> = ["group0", "group1", "group2"].map(String::from).to_vec();
        let mut c = DistillConfig::new(DistillMethod::FitnetsL2);
        c.active_taps = vec!["group2".into(), "group0".into()];
        let (taps, w) = c.resolve_taps(&all).unwrap();
        assert_eq!(taps, ["group0", "group2"]);
        assert_eq!(w, [0.5, 1.0]);
        c.active_taps = vec!["group9".into()];
        assert!(c.resolve_taps(&all).is_err());
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        let ok: DistillConfig =
            toml::from_str("method = \"proposed\"\nalpha = 0.01\nteacher_bn_mode = \"evaluation\"")
                .unwrap();
        assert_eq!(ok.teacher_bn_mode, BnMode::Evaluation);
        assert!(toml::from_str::<DistillConfig>("method = \"kd\"\nalpah = 1.0").is_err());
    }
}

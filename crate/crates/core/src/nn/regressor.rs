use super::model::{NamedTensor, BN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Graph, Tensor, Var};

/// Student transform: 1×1 convolution from student to teacher channels,
/// followed by batch norm in Training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    /// `[conv weight [C_t, C_s, 1, 1], bn gamma [C_t], bn beta [C_t]]`
    params: Vec<NamedTensor>,
}

/// Handles of one regressor application.
pub struct RegressorOutput {
    pub output: Var,
    pub params: Vec<Var>,
}

impl Regressor {
    pub fn new(
        name: &str,
        student_channels: usize,
        teacher_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        if student_channels == 0 || teacher_channels == 0 {
            return Err(Error::Config(format!(
                "regressor {name}: channel counts must be positive ({student_channels} → {teacher_channels})"
            )));
        }
        let mut rng = crate::seeded_rng(seed);
        let std = (2.0 / student_channels as f64).sqrt();
        let weight = Tensor::randn(&[teacher_channels, student_channels, 1, 1], std, &mut rng)?;
        Ok(Self::from_parts(
            name,
            weight,
            Tensor::ones(&[teacher_channels])?,
        ))
    }

    /// Identity 1×1 map with unit BN scale; `channels` in and out.
    pub fn identity(name: &str, channels: usize) -> Result<Self> {
        let mut w = Tensor::zeros(&[channels, channels, 1, 1])?;
        for c in 0..channels {
            w.data_mut()[c * channels + c] = 1.0;
        }
        Ok(Self::from_parts(name, w, Tensor::ones(&[channels])?))
    }

    fn from_parts(name: &str, weight: Tensor, gamma: Tensor) -> Self {
        let beta = Tensor::zeros(gamma.dims()).expect("nonempty");
        Regressor {
            params: vec![
                NamedTensor {
                    name: format!("{name}.conv.weight"),
                    value: weight,
                },
                NamedTensor {
                    name: format!("{name}.bn.gamma"),
                    value: gamma,
                },
                NamedTensor {
                    name: format!("{name}.bn.beta"),
                    value: beta,
                },
            ],
        }
    }

    pub fn student_channels(&self) -> usize {
        self.params[0].value.dims()[1]
    }

    pub fn teacher_channels(&self) -> usize {
        self.params[0].value.dims()[0]
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    /// Applies the regressor to a student tap. BN always normalizes by the
    /// batch statistics.
    pub fn forward(&self, g: &mut Graph, input: Var, trainable: bool) -> Result<RegressorOutput> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let c = self.teacher_channels();
        let h = g.conv2d(input, vars[0], None, 1, 0)?;
        let (zeros, ones) = (vec![0.0; c], vec![1.0; c]);
        let (out, _) =
            g.batch_norm(h, vars[1], vars[2], &zeros, &ones, BnMode::Training, BN_EPS)?;
        Ok(RegressorOutput {
            output: out,
            params: vars,
        })
    }
}

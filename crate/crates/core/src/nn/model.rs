use super::spec::{BlockKind, BlockSpec, FeatureTap, ModelSpec, TapPosition, KERNEL};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, BnMode, Graph, Tensor, Var};
use rand::Rng;
use std::collections::BTreeMap;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// A named tensor owned by a model: a trainable parameter or a buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug)]
enum Block {
    Simple {
        conv: Conv,
        bn: Bn,
    },
    Residual {
        conv1: Conv,
        bn1: Bn,
        conv2: Conv,
        bn2: Bn,
        shortcut: Option<(Conv, Bn)>,
    },
}

/// How a forward pass treats batch norm and parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub bn_mode: BnMode,
    /// Blend Training-mode batch statistics into the running buffers.
    pub update_running_stats: bool,
    /// Register parameters as trainable leaves (otherwise constants).
    pub trainable: bool,
}

impl ForwardOptions {
    /// Student / ordinary training step.
    pub fn train() -> Self {
        ForwardOptions {
            bn_mode: BnMode::Training,
            update_running_stats: true,
            trainable: true,
        }
    }

    /// Frozen pass in the given BN mode: no gradients, no statistics update.
    pub fn frozen(bn_mode: BnMode) -> Self {
        ForwardOptions {
            bn_mode,
            update_running_stats: false,
            trainable: false,
        }
    }
}

/// Graph handles produced by [`Model::forward`].
pub struct ForwardOutput {
    pub logits: Var,
    /// Pre-ReLU tap per group, shallow to deep.
    pub pre_relu: Vec<Var>,
    /// Post-ReLU (block end) tap per group.
    pub block_end: Vec<Var>,
    /// Leaf handle of every parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
}

impl ForwardOutput {
    pub fn taps(&self, position: TapPosition) -> &[Var] {
        match position {
            TapPosition::PreRelu => &self.pre_relu,
            TapPosition::BlockEnd => &self.block_end,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    groups: Vec<Vec<Block>>,
    head_weight: usize,
    head_bias: usize,
}

struct Builder<'r, R: Rng> {
    rng: &'r mut R,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

impl<R: Rng> Builder<'_, R> {
    fn param(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(NamedTensor { name, value });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, value: Tensor) -> usize {
        self.buffers.push(NamedTensor { name, value });
        self.buffers.len() - 1
    }

    /// He-initialized convolution without bias.
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Conv> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::randn(&[cout, cin, k, k], std, self.rng)?;
        Ok(Conv {
            weight: self.param(format!("{name}.weight"), w),
            stride,
            padding: k / 2,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Bn> {
        Ok(Bn {
            gamma: self.param(format!("{name}.gamma"), Tensor::ones(&[c])?),
            beta: self.param(format!("{name}.beta"), Tensor::zeros(&[c])?),
            running_mean: self.buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])?),
            running_var: self.buffer(format!("{name}.running_var"), Tensor::ones(&[c])?),
        })
    }

    fn block(&mut self, prefix: &str, b: &BlockSpec) -> Result<Block> {
        let (i, o, s) = (b.in_channels, b.out_channels, b.stride);
        Ok(match b.kind {
            BlockKind::SimpleConvBnRelu => Block::Simple {
                conv: self.conv(&format!("{prefix}.conv"), i, o, KERNEL, s)?,
                bn: self.bn(&format!("{prefix}.bn"), o)?,
            },
            BlockKind::ResidualBasic => {
                let conv1 = self.conv(&format!("{prefix}.conv1"), i, o, KERNEL, s)?;
                let bn1 = self.bn(&format!("{prefix}.bn1"), o)?;
                let conv2 = self.conv(&format!("{prefix}.conv2"), o, o, KERNEL, 1)?;
                let bn2 = self.bn(&format!("{prefix}.bn2"), o)?;
                let shortcut = if b.has_projection() {
                    Some((
                        self.conv(&format!("{prefix}.shortcut.conv"), i, o, 1, s)?,
                        self.bn(&format!("{prefix}.shortcut.bn"), o)?,
                    ))
                } else {
                    None
                };
                Block::Residual {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                }
            }
        })
    }
}

/// Registers parameters in a graph and runs layers; collects BN statistics.
struct Pass<'m> {
    model: &'m Model,
    vars: Vec<Var>,
    opts: ForwardOptions,
    stats: Vec<(Bn, BatchStats)>,
}

impl Pass<'_> {
    fn conv(&self, g: &mut Graph, x: Var, c: Conv) -> Result<Var> {
        g.conv2d(x, self.vars[c.weight], None, c.stride, c.padding)
    }

    fn bn(&mut self, g: &mut Graph, x: Var, b: Bn) -> Result<Var> {
        let m = self.model;
        let (y, stats) = g.batch_norm(
            x,
            self.vars[b.gamma],
            self.vars[b.beta],
            m.buffers[b.running_mean].value.data(),
            m.buffers[b.running_var].value.data(),
            self.opts.bn_mode,
            BN_EPS,
        )?;
        if let Some(s) = stats {
            self.stats.push((b, s));
        }
        Ok(y)
    }

    /// Returns (pre-ReLU, post-ReLU).
    fn block(&mut self, g: &mut Graph, x: Var, block: &Block) -> Result<(Var, Var)> {
        let pre = match *block {
            Block::Simple { conv, bn } => {
                let h = self.conv(g, x, conv)?;
                self.bn(g, h, bn)?
            }
            Block::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let h = self.conv(g, x, conv1)?;
                let h = self.bn(g, h, bn1)?;
                let h = g.relu(h)?;
                let h = self.conv(g, h, conv2)?;
                let h = self.bn(g, h, bn2)?;
                let sc = match shortcut {
                    Some((c, b)) => {
                        let s = self.conv(g, x, c)?;
                        self.bn(g, s, b)?
                    }
                    None => x,
                };
                g.add(h, sc)?
            }
        };
        Ok((pre, g.relu(pre)?))
    }
}

impl Model {
    /// Builds a model with He-normal convolutions, unit/zero BN affine
    /// parameters and an `N(0, 1/F)` classifier, all drawn from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = crate::seeded_rng(seed);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let mut groups = Vec::new();
        for (gi, blocks) in spec.block_specs().iter().enumerate() {
            let group = blocks
                .iter()
                .enumerate()
                .map(|(bi, bs)| b.block(&format!("group{gi}.block{bi}"), bs))
                .collect::<Result<Vec<_>>>()?;
            groups.push(group);
        }
        let features = *spec.group_widths().last().expect("validated");
        let w = Tensor::randn(
            &[spec.num_classes, features],
            (1.0 / features as f64).sqrt(),
            b.rng,
        )?;
        let head_weight = b.param("head.weight".into(), w);
        let head_bias = b.param("head.bias".into(), Tensor::zeros(&[spec.num_classes])?);
        let model = Model {
            spec: spec.clone(),
            params: b.params,
            buffers: b.buffers,
            groups,
            head_weight,
            head_bias,
        };
        log::debug!(
            "built model {:?} ×{} with {} parameters",
            spec.groups,
            spec.width_multiplier,
            model.parameter_count()
        );
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    /// BN running statistics.
    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.buffers
    }

    /// Sum of trainable parameter element counts.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn taps(&self, position: TapPosition) -> Vec<FeatureTap> {
        self.spec.tap_positions(position)
    }

    /// Shape of each group's tap for a batch of `n` images.
    pub fn tap_shapes(&self, n: usize) -> Vec<[usize; 4]> {
        self.spec
            .group_widths()
            .iter()
            .zip(self.spec.group_spatial())
            .map(|(&c, (h, w))| [n, c, h, w])
            .collect()
    }

    /// Records a forward pass into `g`.
    ///
    /// With `update_running_stats`, Training-mode batch statistics are
    /// blended into the running buffers after the pass; otherwise the
    /// buffers are left untouched.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        input: Var,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (out, stats) = self.record(g, input, opts)?;
        if opts.update_running_stats {
            for (bn, s) in stats {
                blend(&mut self.buffers[bn.running_mean].value, &s.mean);
                blend(&mut self.buffers[bn.running_var].value, &s.var_unbiased);
            }
        }
        Ok(out)
    }

    /// Forward pass that never touches the running buffers.
    pub fn forward_frozen(
        &self,
        g: &mut Graph,
        input: Var,
        bn_mode: BnMode,
    ) -> Result<ForwardOutput> {
        Ok(self.record(g, input, ForwardOptions::frozen(bn_mode))?.0)
    }

    fn record(
        &self,
        g: &mut Graph,
        input: Var,
        opts: ForwardOptions,
    ) -> Result<(ForwardOutput, Vec<(Bn, BatchStats)>)> {
        let x = g.value(input);
        let expect = self.spec.input_shape;
        if x.dims().len() != 4 || x.dims()[1..] != expect {
            return Err(Error::dim(
                "forward",
                format!(
                    "input {} does not match [N, {}, {}, {}]",
                    x.shape(),
                    expect[0],
                    expect[1],
                    expect[2]
                ),
            ));
        }
        let vars = self
            .params
            .iter()
            .map(|p| {
                if opts.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut pass = Pass {
            model: self,
            vars,
            opts,
            stats: Vec::new(),
        };
        let mut x = input;
        let mut pre_relu = Vec::with_capacity(self.groups.len());
        let mut block_end = Vec::with_capacity(self.groups.len());
        for (gi, group) in self.groups.iter().enumerate() {
            if gi > 0 {
                x = g.max_pool2d(x, 2, 2)?;
            }
            let mut pre = x;
            for block in group {
                let (p, post) = pass.block(g, x, block)?;
                pre = p;
                x = post;
            }
            pre_relu.push(pre);
            block_end.push(x);
        }
        let pooled = g.global_avg_pool(x)?;
        let logits = g.linear(
            pooled,
            pass.vars[self.head_weight],
            pass.vars[self.head_bias],
        )?;
        let out = ForwardOutput {
            logits,
            pre_relu,
            block_end,
            params: pass.vars,
        };
        Ok((out, pass.stats))
    }

    /// Logits and named taps as plain tensors; running statistics frozen.
    pub fn forward_with_taps(
        &self,
        input: &Tensor,
        bn_mode: BnMode,
        position: TapPosition,
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let x = g.constant(input.clone())?;
        let out = self.forward_frozen(&mut g, x, bn_mode)?;
        let taps = self
            .taps(position)
            .into_iter()
            .zip(out.taps(position))
            .map(|(t, &v)| (t.name, g.value(v).clone()))
            .collect();
        Ok((g.value(out.logits).clone(), taps))
    }

    /// Logits of a frozen pass.
    pub fn logits(&self, input: &Tensor, bn_mode: BnMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone())?;
        let out = self.forward_frozen(&mut g, x, bn_mode)?;
        Ok(g.value(out.logits).clone())
    }

    /// Replaces parameters and buffers by name. Every entry of the model must
    /// be present with a matching shape.
    pub fn load_state(&mut self, records: Vec<NamedTensor>) -> Result<()> {
        let mut by_name: BTreeMap<String, Tensor> =
            records.into_iter().map(|r| (r.name, r.value)).collect();
        for slot in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let v = by_name
                .remove(&slot.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor '{}'", slot.name)))?;
            if v.shape() != slot.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor '{}' has shape {}, model expects {}",
                    slot.name,
                    v.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = v;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Config(format!(
                "checkpoint has unknown tensor '{extra}'"
            )));
        }
        Ok(())
    }

    /// Parameters followed by buffers, the checkpoint record order.
    pub fn state(&self) -> impl Iterator<Item = &NamedTensor> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// The affine parameters `(beta, gamma)` of the BN layer that produces the
    /// pre-ReLU tap of `group`, when that tap is a plain BN output.
    pub fn tap_bn_affine(&self, group: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        match self.groups.get(group)?.last()? {
            Block::Simple { bn, .. } => Some((
                self.params[bn.beta].value.data().to_vec(),
                self.params[bn.gamma].value.data().to_vec(),
            )),
            Block::Residual { .. } => None,
        }
    }

    /// Mutable access to the named parameter.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }
}

fn blend(running: &mut Tensor, batch: &[f64]) {
    for (r, b) in running.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

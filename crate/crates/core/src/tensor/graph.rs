use super::kernels::{col2im_add, conv_output_size, gemm, im2col_into, ConvGeom, MatRef};
use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-normalization statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize by the statistics of the current batch.
    Training,
    /// Normalize by the running statistics.
    Evaluation,
}

/// Per-channel statistics of one Training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the value blended into running statistics.
    pub var_unbiased: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
    },
    Relu(Var),
    ClampMin {
        input: Var,
        margins: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    KlSoftened {
        student: Var,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
        temperature: f64,
    },
    MaskedSqError {
        pred: Var,
        target: Vec<f64>,
        active: Vec<bool>,
    },
}

struct Node {
    name: &'static str,
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

thread_local! {
    static BACKWARD_FAULT: std::cell::Cell<Option<&'static str>> = const { std::cell::Cell::new(None) };
}

/// Test fixture: scales the upstream gradient of every node recorded by the
/// named op by 1.5 during backward, on the calling thread only. `None`
/// restores correct behaviour.
#[doc(hidden)]
pub fn inject_backward_fault(op: Option<&'static str>) {
    BACKWARD_FAULT.with(|f| f.set(op));
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is also a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kink_distance: f64,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf. Leaves the sweep never reached hold
    /// zeros; non-leaf or constant handles return `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.entries.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.entries.get_mut(v.0).and_then(Option::take)
    }
}

fn nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.dims() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(
            op,
            format!("expected [N,C,H,W], got {}", t.shape()),
        )),
    }
}

fn softmax_rows(logits: &[f64], rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v * scale - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

fn log_softmax_rows(logits: &[f64], rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
        let lse = max
            + row
                .iter()
                .map(|&v| (v * scale - max).exp())
                .sum::<f64>()
                .ln();
        for (d, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *d = v * scale - lse;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kink_distance: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance of any recorded input to a non-differentiable point
    /// (ReLU zero, clamp margin, max-pool tie, partial-L2 switch).
    pub fn kink_distance(&self) -> f64 {
        self.kink_distance
    }

    fn note_kink(&mut self, d: f64) {
        if d < self.kink_distance {
            self.kink_distance = d;
        }
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            name: "leaf",
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            name,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(ta.shape().clone(), data);
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().clone(), t.data().iter().map(|x| x * k).collect());
        self.push("scale", out, Op::Scale(a, k), &[a])
    }

    /// Sum of all elements, accumulated sequentially in buffer order.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (ta.dims(), tb.dims()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => {
                return Err(Error::dim(
                    "matmul",
                    format!(
                        "expected rank-2 operands, got {} and {}",
                        ta.shape(),
                        tb.shape()
                    ),
                ))
            }
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            0.0,
            &mut out,
        );
        let out = Tensor::new(&[m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Cross-correlation with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let (n, c, h, wd) = nchw("conv2d", x)?;
        let (co, ci, kh, kw) = nchw("conv2d", w)?;
        if ci != c {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c} channels, weight expects {ci}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).dims() != [co] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {} should be [{co}]", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            padding,
            out_h: conv_output_size(h, kh, stride, padding)?,
            out_w: conv_output_size(wd, kw, stride, padding)?,
        };
        let (krows, ohw) = (geom.col_rows(), geom.col_cols());
        let in_len = c * h * wd;
        let mut out = vec![0.0; n * co * ohw];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; krows * ohw]
        };
        let wmat = MatRef::new(w.data(), co, krows);
        for s in 0..n {
            let image = &x.data()[s * in_len..(s + 1) * in_len];
            let colm = if geom.is_pointwise() {
                MatRef::new(image, krows, ohw)
            } else {
                im2col_into(image, &geom, &mut cols);
                MatRef::new(&cols, krows, ohw)
            };
            gemm(wmat, colm, 0.0, &mut out[s * co * ohw..(s + 1) * co * ohw]);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, plane) in out.chunks_mut(ohw).enumerate() {
                let bc = bv[i % co];
                plane.iter_mut().for_each(|v| *v += bc);
            }
        }
        let out = Tensor::new(&[n, co, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// Per-channel batch normalization over N, H, W.
    ///
    /// In Training mode the batch statistics are returned so the caller can
    /// blend them into its running buffers; this op never mutates them.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!(
                "batch-norm epsilon must be > 0, got {eps}"
            )));
        }
        let x = self.value(input);
        let (n, c, h, w) = nchw("batch_norm", x)?;
        for (name, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} has {len} entries, expected {c}"),
                ));
            }
        }
        let hw = h * w;
        let count = n * hw;
        if mode == BnMode::Training && count < 2 {
            return Err(Error::dim(
                "batch_norm",
                format!("Training mode needs at least 2 values per channel, got {count}"),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut stats = None;
        match mode {
            BnMode::Training => {
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        sum += xd[base..base + hw].iter().sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        sq += xd[base..base + hw]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    means[ch] = mean;
                    vars[ch] = sq / (count - 1) as f64;
                    inv_std[ch] = 1.0 / (var + eps).sqrt();
                }
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            xhat[i] = (xd[i] - means[ch]) * inv_std[ch];
                            out[i] = g[ch] * xhat[i] + b[ch];
                        }
                    }
                }
                stats = Some(BatchStats {
                    mean: means,
                    var_unbiased: vars,
                });
            }
            BnMode::Evaluation => {
                for ch in 0..c {
                    inv_std[ch] = 1.0 / (running_var[ch] + eps).sqrt();
                }
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            xhat[i] = (xd[i] - running_mean[ch]) * inv_std[ch];
                            out[i] = g[ch] * xhat[i] + b[ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(x.dims(), out)?;
        let v = self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[input, gamma, beta],
        )?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let kink = x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let out = Tensor::from_parts(
            x.shape().clone(),
            x.data().iter().map(|&v| v.max(0.0)).collect(),
        );
        self.note_kink(kink);
        self.push("relu", out, Op::Relu(input), &[input])
    }

    /// `max(x, m_c)` with one margin per channel of an `[N,C,H,W]` input.
    pub fn clamp_min_per_channel(&mut self, input: Var, margins: &[f64]) -> Result<Var> {
        let x = self.value(input);
        let (_, c, h, w) = nchw("clamp_min_per_channel", x)?;
        if margins.len() != c {
            return Err(Error::dim(
                "clamp_min_per_channel",
                format!("{} margins for {c} channels", margins.len()),
            ));
        }
        if margins.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite {
                op: "clamp_min_per_channel",
            });
        }
        let hw = h * w;
        let mut kink = f64::INFINITY;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let m = margins[(i / hw) % c];
                kink = kink.min((v - m).abs());
                v.max(m)
            })
            .collect();
        let out = Tensor::from_parts(x.shape().clone(), data);
        self.note_kink(kink);
        self.push(
            "clamp_min_per_channel",
            out,
            Op::ClampMin {
                input,
                margins: margins.to_vec(),
            },
            &[input],
        )
    }

    fn pool_geometry(
        &self,
        op: &'static str,
        x: &Tensor,
        window: usize,
        stride: usize,
    ) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = nchw(op, x)?;
        if window == 0 {
            return Err(Error::dim(op, "window must be positive"));
        }
        let oh = conv_output_size(h, window, stride, 0).map_err(|_| {
            Error::dim(
                op,
                format!("window {window} / stride {stride} does not tile height {h}"),
            )
        })?;
        let ow = conv_output_size(w, window, stride, 0).map_err(|_| {
            Error::dim(
                op,
                format!("window {window} / stride {stride} does not tile width {w}"),
            )
        })?;
        Ok((n, c, h, w, oh, ow))
    }

    /// Max pooling; the gradient goes to the first maximal element of each window.
    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w, oh, ow) = self.pool_geometry("max_pool2d", x, window, stride)?;
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let mut kink = f64::INFINITY;
        if window == 2 && stride == 2 {
            for plane in 0..n * c {
                let base = plane * h * w;
                for i in 0..oh {
                    let r0 = base + 2 * i * w;
                    let r1 = r0 + w;
                    for j in 0..ow {
                        let cand = [r0 + 2 * j, r0 + 2 * j + 1, r1 + 2 * j, r1 + 2 * j + 1];
                        let mut best = cand[0];
                        for &idx in &cand[1..] {
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        let second = cand
                            .iter()
                            .filter(|&&idx| idx != best)
                            .map(|&idx| xd[idx])
                            .fold(f64::NEG_INFINITY, f64::max);
                        kink = kink.min(xd[best] - second);
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
        } else {
            for plane in 0..n * c {
                let base = plane * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = base + i * stride * w + j * stride;
                        let mut second = f64::NEG_INFINITY;
                        for di in 0..window {
                            for dj in 0..window {
                                let idx = base + (i * stride + di) * w + j * stride + dj;
                                if idx == best {
                                    continue;
                                }
                                if xd[idx] > xd[best] {
                                    second = xd[best];
                                    best = idx;
                                } else if xd[idx] > second {
                                    second = xd[idx];
                                }
                            }
                        }
                        if window > 1 {
                            kink = kink.min(xd[best] - second);
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        self.note_kink(kink);
        self.push("max_pool2d", out, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w, oh, ow) = self.pool_geometry("avg_pool2d", x, window, stride)?;
        let xd = x.data();
        let area = (window * window) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..window {
                        let row = base + (i * stride + di) * w + j * stride;
                        s += xd[row..row + window].iter().sum::<f64>();
                    }
                    out.push(s / area);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        self.push(
            "avg_pool2d",
            out,
            Op::AvgPool {
                input,
                window,
                stride,
            },
            &[input],
        )
    }

    /// Mean over H and W: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = nchw("global_avg_pool", x)?;
        let hw = h * w;
        let out: Vec<f64> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(input), &[input])
    }

    /// `x·Wᵀ + b` for `x: [N,F]`, `W: [K,F]`, `b: [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, f, k) = match (x.dims(), w.dims(), b.dims()) {
            (&[n, f], &[k, f2], &[k2]) if f == f2 && k == k2 => (n, f, k),
            _ => {
                return Err(Error::dim(
                    "linear",
                    format!(
                        "input {}, weight {}, bias {}",
                        x.shape(),
                        w.shape(),
                        b.shape()
                    ),
                ))
            }
        };
        let mut out = vec![0.0; n * k];
        gemm(
            MatRef::new(x.data(), n, f),
            MatRef::new(w.data(), k, f).t(),
            0.0,
            &mut out,
        );
        for row in out.chunks_mut(k) {
            row.iter_mut().zip(b.data()).for_each(|(o, bb)| *o += bb);
        }
        let out = Tensor::new(&[n, k], out)?;
        self.push(
            "linear",
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = match *t.dims() {
            [n, k] => (n, k),
            _ => {
                return Err(Error::dim(
                    "softmax_cross_entropy",
                    format!("logits {}", t.shape()),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Parameter(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let logp = log_softmax_rows(t.data(), n, k, 1.0);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &l)| logp[r * k + l])
            .sum::<f64>()
            / n as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean over the batch of `KL(softmax(t/τ) ‖ softmax(s/τ))`. The teacher
    /// logits are a constant; only the student receives gradient.
    pub fn kl_divergence_softened(
        &mut self,
        teacher_logits: &Tensor,
        student: Var,
        temperature: f64,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        let s = self.value(student);
        if s.shape() != teacher_logits.shape() || s.dims().len() != 2 {
            return Err(Error::dim(
                "kl_divergence_softened",
                format!(
                    "teacher {} vs student {}",
                    teacher_logits.shape(),
                    s.shape()
                ),
            ));
        }
        let (n, k) = (s.dims()[0], s.dims()[1]);
        let inv_t = 1.0 / temperature;
        let logp = log_softmax_rows(teacher_logits.data(), n, k, inv_t);
        let logq = log_softmax_rows(s.data(), n, k, inv_t);
        let mut kl = 0.0;
        for (lp, lq) in logp.iter().zip(&logq) {
            let p = lp.exp();
            if p > 0.0 {
                kl += p * (lp - lq);
            }
        }
        kl /= n as f64;
        let teacher_probs = softmax_rows(teacher_logits.data(), n, k, inv_t);
        let student_probs = logq.iter().map(|v| v.exp()).collect();
        self.push(
            "kl_divergence_softened",
            Tensor::scalar(kl),
            Op::KlSoftened {
                student,
                teacher_probs,
                student_probs,
                temperature,
            },
            &[student],
        )
    }

    /// `Σ_i active_i · (pred_i − target_i)²` with a constant target.
    ///
    /// `kink_hint` is the caller's distance to the nearest point where the
    /// active set switches; it only feeds [`Graph::kink_distance`].
    pub fn masked_sq_error(
        &mut self,
        pred: Var,
        target: &Tensor,
        active: Vec<bool>,
        kink_hint: f64,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || active.len() != p.numel() {
            return Err(Error::dim(
                "masked_sq_error",
                format!("prediction {} vs target {}", p.shape(), target.shape()),
            ));
        }
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|((s, t), _)| (t - s) * (t - s))
            .sum::<f64>();
        self.note_kink(kink_hint);
        self.push(
            "masked_sq_error",
            Tensor::scalar(loss),
            Op::MaskedSqError {
                pred,
                target: target.data().to_vec(),
                active,
            },
            &[pred],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let fault = BACKWARD_FAULT.with(|f| f.get());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if fault == Some(node.name) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backward_node(node, &g, &mut grads);
        }
        let entries = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::from_parts(node.value.shape().clone(), data))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Adds into the gradient buffer of `v` if it is trainable.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g)
            }),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let k = g[0] / nodes[a.0].value.numel() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += k));
            }
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
                let gm = MatRef::new(g, m, n);
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |d| {
                    gemm(gm, MatRef::new(tb.data(), k, n).t(), 1.0, d)
                });
                acc(*b, &mut |d| {
                    gemm(MatRef::new(ta.data(), m, k).t(), gm, 1.0, d)
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => self.conv2d_backward(*input, *weight, *bias, geom, g, &mut acc),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let dims = nodes[input.0].value.dims();
                let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
                let count = (n * hw) as f64;
                let gv = nodes[gamma.0].value.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |d| {
                    d.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s)
                });
                acc(*beta, &mut |d| {
                    d.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s)
                });
                acc(*input, &mut |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            match mode {
                                BnMode::Training => {
                                    let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                                    for i in base..base + hw {
                                        d[i] += k * (g[i] - mg - xhat[i] * mgx);
                                    }
                                }
                                BnMode::Evaluation => {
                                    for i in base..base + hw {
                                        d[i] += k * g[i];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::ClampMin { input, margins } => {
                let x = &nodes[input.0].value;
                let (c, hw) = (x.dims()[1], x.dims()[2] * x.dims()[3]);
                let xd = x.data();
                acc(*input, &mut |d| {
                    for i in 0..d.len() {
                        if xd[i] >= margins[(i / hw) % c] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |d| {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }),
            Op::AvgPool {
                input,
                window,
                stride,
            } => {
                let dims = nodes[input.0].value.dims();
                let (planes, h, w) = (dims[0] * dims[1], dims[2], dims[3]);
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let area = (window * window) as f64;
                acc(*input, &mut |d| {
                    for p in 0..planes {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = g[(p * oh + i) * ow + j] / area;
                                for di in 0..*window {
                                    let row = p * h * w + (i * stride + di) * w + j * stride;
                                    d[row..row + window].iter_mut().for_each(|v| *v += gv);
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let dims = nodes[a.0].value.dims();
                let hw = dims[2] * dims[3];
                acc(*a, &mut |d| {
                    for (plane, &gv) in d.chunks_mut(hw).zip(g) {
                        let k = gv / hw as f64;
                        plane.iter_mut().for_each(|v| *v += k);
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (&nodes[input.0].value, &nodes[weight.0].value);
                let (n, f, k) = (x.dims()[0], x.dims()[1], w.dims()[0]);
                let gm = MatRef::new(g, n, k);
                acc(*input, &mut |d| {
                    gemm(gm, MatRef::new(w.data(), k, f), 1.0, d)
                });
                acc(*weight, &mut |d| {
                    gemm(gm.t(), MatRef::new(x.data(), n, f), 1.0, d)
                });
                acc(*bias, &mut |d| {
                    for row in g.chunks(k) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |d| {
                    for r in 0..n {
                        for j in 0..k {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            d[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::KlSoftened {
                student,
                teacher_probs,
                student_probs,
                temperature,
            } => {
                let n = nodes[student.0].value.dims()[0];
                let scale = g[0] / (temperature * n as f64);
                acc(*student, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += scale * (student_probs[i] - teacher_probs[i]);
                    }
                });
            }
            Op::MaskedSqError {
                pred,
                target,
                active,
            } => {
                let s = nodes[pred.0].value.data();
                acc(*pred, &mut |d| {
                    for i in 0..d.len() {
                        if active[i] {
                            d[i] += g[0] * 2.0 * (s[i] - target[i]);
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        g: &[f64],
        acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let (x, w) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
        let n = x.dims()[0];
        let co = w.dims()[0];
        let (krows, ohw) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.channels * geom.height * geom.width;
        let out_len = co * ohw;
        if let Some(b) = bias {
            acc(b, &mut |d| {
                for (i, plane) in g.chunks(ohw).enumerate() {
                    d[i % co] += plane.iter().sum::<f64>();
                }
            });
        }
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; krows * ohw]
        };
        acc(weight, &mut |d| {
            for s in 0..n {
                let image = &x.data()[s * in_len..(s + 1) * in_len];
                let colm = if geom.is_pointwise() {
                    MatRef::new(image, krows, ohw)
                } else {
                    im2col_into(image, geom, &mut cols);
                    MatRef::new(&cols, krows, ohw)
                };
                let gs = MatRef::new(&g[s * out_len..(s + 1) * out_len], co, ohw);
                gemm(gs, colm.t(), 1.0, d);
            }
        });
        let wt = MatRef::new(w.data(), co, krows).t();
        acc(input, &mut |d| {
            for s in 0..n {
                let gs = MatRef::new(&g[s * out_len..(s + 1) * out_len], co, ohw);
                let dst = &mut d[s * in_len..(s + 1) * in_len];
                if geom.is_pointwise() {
                    gemm(wt, gs, 1.0, dst);
                } else {
                    gemm(wt, gs, 0.0, &mut cols);
                    col2im_add(&cols, geom, dst);
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = g.constant(t(&[2, 2], &[3., 4., 5., 6.])).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 4., 5., 6.]);
        let a = g.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let b = g.constant(t(&[2, 1], &[3., 4.])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
        assert!(matches!(g.matmul(a, a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv2d_identity_and_ones() {
        let mut g = Graph::new();
        let x = g
            .constant(t(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]))
            .unwrap();
        let w = g.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.])).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap()).unwrap();
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap()).unwrap();
        let y = g.conv2d(ones, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        assert!(g.conv2d(ones, k, None, 2, 0).is_ok());
        let x4 = g.constant(Tensor::ones(&[1, 1, 4, 4]).unwrap()).unwrap();
        assert!(g.conv2d(x4, k, None, 2, 0).is_err());
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1., 0., 2.])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0., 2.]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0., 0., 1.]);
        assert_eq!(g.kink_distance(), 0.0);
    }

    #[test]
    fn clamp_min_piecewise_and_tie_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 1, 4], &[-1.0, -0.2, 3.0, -0.5])).unwrap();
        let y = g.clamp_min_per_channel(x, &[-0.5]).unwrap();
        assert_eq!(g.value(y).data(), &[-0.5, -0.2, 3.0, -0.5]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0., 1., 1., 1.]);
        assert!(g.clamp_min_per_channel(x, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 4]).unwrap()).unwrap();
        let ce = g.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((g.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        let l = g.constant(t(&[1, 3], &[0., 1000., 0.])).unwrap();
        let ce = g.softmax_cross_entropy(l, &[1]).unwrap();
        assert!(g.value(ce).item().unwrap() < 1e-300);
        assert!(matches!(
            g.softmax_cross_entropy(l, &[3]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn kl_two_class_value() {
        let mut g = Graph::new();
        let teacher = t(&[1, 2], &[2f64.ln(), 0.0]);
        let s = g.param(t(&[1, 2], &[0.0, 2f64.ln()])).unwrap();
        let kl = g.kl_divergence_softened(&teacher, s, 1.0).unwrap();
        // direct summation: p = (2/3, 1/3), q = (1/3, 2/3)
        let direct = (2.0 / 3.0) * ((2.0 / 3.0) / (1.0 / 3.0f64)).ln()
            + (1.0 / 3.0) * ((1.0 / 3.0) / (2.0 / 3.0f64)).ln();
        assert!((g.value(kl).item().unwrap() - direct).abs() < 1e-15);
        assert!((direct - 2f64.ln() / 3.0).abs() < 1e-15);
        let tc = g.constant(teacher.clone()).unwrap();
        let same = g.kl_divergence_softened(&teacher, tc, 1.0).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
        let hot = g.kl_divergence_softened(&teacher, s, 1e6).unwrap();
        assert!(g.value(hot).item().unwrap() < 1e-12);
    }

    #[test]
    fn pooling_basics() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        let m = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[4.]);
        let c = g
            .constant(Tensor::full(&[2, 3, 4, 4], 1.5).unwrap())
            .unwrap();
        let a = g.avg_pool2d(c, 2, 2).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 1.5));
        let tie = g.param(t(&[1, 1, 2, 2], &[5., 5., 5., 1.])).unwrap();
        let m = g.max_pool2d(tie, 2, 2).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(tie).unwrap().data(), &[1., 0., 0., 0.]);
        assert!(g.max_pool2d(x, 3, 1).is_err());
    }

    #[test]
    fn linear_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let w = g
            .constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]))
            .unwrap();
        let b = g.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn elementwise_identities() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.5, -2.0, 7.0])).unwrap();
        let z = g.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let y = g.scale(x, 1.0).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.constant(Tensor::zeros(&[2]).unwrap()).unwrap();
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1., -2., 3., 0.5])).unwrap();
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.; 4]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(
            g.backward(s).unwrap().get(x).unwrap().data(),
            &[2., -4., 6., 1.]
        );
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreached_leaves_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.])).unwrap();
        let unused = g.param(t(&[3], &[1., 2., 3.])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.; 3]);
        assert!(grads.get(s).is_none());
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        for mode in [BnMode::Training, BnMode::Evaluation] {
            let mut g = Graph::new();
            let x = g
                .constant(t(&[2, 2, 1, 2], &[1., 5., -2., 3., 0.5, 9., 4., -1.]))
                .unwrap();
            let gamma = g.param(Tensor::zeros(&[2]).unwrap()).unwrap();
            let beta = g.param(t(&[2], &[0.25, -3.0])).unwrap();
            let (y, _) = g
                .batch_norm(x, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], mode, 1e-5)
                .unwrap();
            let expect = [0.25, 0.25, -3., -3., 0.25, 0.25, -3., -3.];
            assert_eq!(g.value(y).data(), &expect);
        }
    }

    #[test]
    fn batch_norm_training_needs_two_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap()).unwrap();
        let gamma = g.param(Tensor::ones(&[1]).unwrap()).unwrap();
        let beta = g.param(Tensor::zeros(&[1]).unwrap()).unwrap();
        assert!(g
            .batch_norm(x, gamma, beta, &[0.0], &[1.0], BnMode::Training, 1e-5)
            .is_err());
        assert!(g
            .batch_norm(x, gamma, beta, &[0.0], &[1.0], BnMode::Evaluation, 1e-5)
            .is_ok());
        assert!(g
            .batch_norm(x, gamma, beta, &[0.0], &[1.0], BnMode::Evaluation, 0.0)
            .is_err());
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        assert!(matches!(
            g.constant(t(&[1], &[f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
        let x = g.constant(t(&[1], &[1e300])).unwrap();
        assert!(matches!(g.mul(x, x), Err(Error::NonFinite { op: "mul" })));
    }
}

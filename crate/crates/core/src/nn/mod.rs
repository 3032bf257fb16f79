//! Layer blocks, teacher/student CNN builders, pre-ReLU feature taps and the
//! 1×1-conv + BN regressor.
//!
//! A group is a run of blocks at one spatial size. Its pre-ReLU tap is the
//! output of the last block before the ReLU that closes it (after the
//! residual merge for residual blocks); the block-end tap is that ReLU's
//! output, i.e. exactly what the next layer consumes.

pub mod checkpoint;
mod model;
mod regressor;
mod spec;

pub use model::{ForwardOptions, ForwardOutput, Model, NamedTensor, BN_EPS, BN_MOMENTUM};
pub use regressor::{Regressor, RegressorOutput};
pub use spec::{BlockKind, BlockSpec, FeatureTap, ModelSpec, TapPosition, KERNEL};

use crate::error::Result;

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    Model::build(spec, seed)
}

pub fn tap_positions(spec: &ModelSpec, position: TapPosition) -> Vec<FeatureTap> {
    spec.tap_positions(position)
}

pub fn build_regressor(
    name: &str,
    student_channels: usize,
    teacher_channels: usize,
    seed: u64,
) -> Result<Regressor> {
    Regressor::new(name, student_channels, teacher_channels, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BnMode, Graph, Tensor};

    fn spec(kind: BlockKind) -> ModelSpec {
        ModelSpec {
            block_kind: kind,
            blocks_per_group: 2,
            groups: vec![4, 6, 8],
            width_multiplier: 1.0,
            num_classes: 5,
            input_shape: [1, 12, 12],
        }
    }

    fn batch(n: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, 1, 12, 12], 1.0, &mut crate::seeded_rng(seed)).unwrap()
    }

    #[test]
    fn three_groups_three_taps() {
        let s = ModelSpec {
            block_kind: BlockKind::SimpleConvBnRelu,
            blocks_per_group: 2,
            groups: vec![8, 16, 32],
            width_multiplier: 1.0,
            num_classes: 10,
            input_shape: [1, 28, 28],
        };
        let m = build_model(&s, 1).unwrap();
        let taps = m.taps(TapPosition::PreRelu);
        assert_eq!(taps.len(), 3);
        assert_eq!(
            taps.iter().map(|t| t.channels).collect::<Vec<_>>(),
            [8, 16, 32]
        );
        assert_eq!(
            m.tap_shapes(2),
            vec![[2, 8, 28, 28], [2, 16, 14, 14], [2, 32, 7, 7]]
        );
    }

    #[test]
    fn parameter_count_matches_spec_walk() {
        for kind in [BlockKind::SimpleConvBnRelu, BlockKind::ResidualBasic] {
            let s = spec(kind);
            let m = build_model(&s, 3).unwrap();
            assert_eq!(m.parameter_count(), s.parameter_count());
        }
    }

    #[test]
    fn same_seed_same_parameters_and_logits() {
        let s = spec(BlockKind::ResidualBasic);
        let a = build_model(&s, 42).unwrap();
        let b = build_model(&s, 42).unwrap();
        assert_eq!(a.params(), b.params());
        let x = batch(3, 9);
        assert_eq!(
            a.logits(&x, BnMode::Training).unwrap(),
            b.logits(&x, BnMode::Training).unwrap()
        );
        let c = build_model(&s, 43).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn block_end_is_relu_of_pre_relu() {
        for kind in [BlockKind::SimpleConvBnRelu, BlockKind::ResidualBasic] {
            let m = build_model(&spec(kind), 5).unwrap();
            let x = batch(4, 1);
            let (_, pre) = m
                .forward_with_taps(&x, BnMode::Training, TapPosition::PreRelu)
                .unwrap();
            let (_, end) = m
                .forward_with_taps(&x, BnMode::Training, TapPosition::BlockEnd)
                .unwrap();
            for (name, p) in &pre {
                let relu: Vec<f64> = p.data().iter().map(|v| v.max(0.0)).collect();
                assert_eq!(relu.as_slice(), end[name].data(), "{kind:?} {name}");
            }
        }
    }

    #[test]
    fn frozen_forward_keeps_running_stats() {
        let mut m = build_model(&spec(BlockKind::SimpleConvBnRelu), 2).unwrap();
        let before = m.buffers().to_vec();
        let x = batch(4, 2);
        m.forward_with_taps(&x, BnMode::Training, TapPosition::PreRelu)
            .unwrap();
        assert_eq!(m.buffers(), before.as_slice());
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        m.forward(&mut g, xv, ForwardOptions::train()).unwrap();
        assert_ne!(m.buffers(), before.as_slice());
    }

    #[test]
    fn bn_mode_changes_taps_when_stats_differ() {
        let m = build_model(&spec(BlockKind::SimpleConvBnRelu), 2).unwrap();
        // running stats are (0, 1); a shifted, scaled batch has very different statistics
        let mut x = batch(4, 3);
        x.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 5.0);
        let (_, t) = m
            .forward_with_taps(&x, BnMode::Training, TapPosition::PreRelu)
            .unwrap();
        let (_, e) = m
            .forward_with_taps(&x, BnMode::Evaluation, TapPosition::PreRelu)
            .unwrap();
        for (name, tv) in &t {
            assert!(tv.max_abs_diff(&e[name]).unwrap() > 1e-3, "{name}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let m = build_model(&spec(BlockKind::SimpleConvBnRelu), 2).unwrap();
        let x = Tensor::zeros(&[2, 1, 10, 10]).unwrap();
        assert!(m.logits(&x, BnMode::Evaluation).is_err());
    }

    #[test]
    fn regressor_shapes() {
        let r = build_regressor("r", 16, 32, 0).unwrap();
        for hw in [3, 5] {
            let mut g = Graph::new();
            let x = g
                .constant(Tensor::randn(&[2, 16, hw, hw], 1.0, &mut crate::seeded_rng(1)).unwrap())
                .unwrap();
            let out = r.forward(&mut g, x, true).unwrap();
            assert_eq!(g.value(out.output).dims(), &[2, 32, hw, hw]);
        }
        assert!(build_regressor("r", 0, 3, 0).is_err());
    }

    #[test]
    fn identity_regressor_on_normalized_batch() {
        let r = Regressor::identity("r", 3).unwrap();
        let mut x = Tensor::randn(&[4, 3, 5, 5], 1.0, &mut crate::seeded_rng(7)).unwrap();
        // normalize each channel to zero mean and unit (biased) variance
        let hw = 25;
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..hw).map(move |i| (n, i)))
                .map(|(n, i)| x.data()[(n * 3 + c) * hw + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for n in 0..4 {
                for i in 0..hw {
                    let v = &mut x.data_mut()[(n * 3 + c) * hw + i];
                    *v = (*v - mean) / var.sqrt();
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let out = r.forward(&mut g, xv, false).unwrap();
        let diff = g.value(out.output).max_abs_diff(&x).unwrap();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn width_multiplier_roughly_quadruples_conv_params() {
        let base = spec(BlockKind::SimpleConvBnRelu);
        let wide = ModelSpec {
            width_multiplier: 2.0,
            ..base.clone()
        };
        assert_eq!(wide.group_widths(), vec![8, 12, 16]);
        let conv = |s: &ModelSpec| -> usize {
            s.block_specs()
                .iter()
                .flatten()
                .map(|b| b.in_channels * b.out_channels * KERNEL * KERNEL)
                .sum()
        };
        let ratio = conv(&wide) as f64 / conv(&base) as f64;
        // every conv but the first (fixed input channels) scales by exactly 4
        let first = |s: &ModelSpec| {
            s.block_specs()[0][0].in_channels * s.block_specs()[0][0].out_channels * 9
        };
        assert_eq!(conv(&wide) - first(&wide), 4 * (conv(&base) - first(&base)));
        assert!(ratio > 3.5 && ratio < 4.0, "{ratio}");
        let m = build_model(&wide, 0).unwrap();
        assert_eq!(m.parameter_count(), wide.parameter_count());
    }
}

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Kernel size of every spatial convolution in the built models.
pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// conv3×3 → BN → ReLU
    SimpleConvBnRelu,
    /// conv3×3 → BN → ReLU → conv3×3 → BN, plus shortcut, then ReLU
    ResidualBasic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn has_projection(&self) -> bool {
        self.kind == BlockKind::ResidualBasic
            && (self.in_channels != self.out_channels || self.stride != 1)
    }

    /// Trainable parameter count of this block.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
        let bn = |c: usize| 2 * c;
        let (i, o) = (self.in_channels, self.out_channels);
        match self.kind {
            BlockKind::SimpleConvBnRelu => conv(i, o, KERNEL) + bn(o),
            BlockKind::ResidualBasic => {
                let main = conv(i, o, KERNEL) + bn(o) + conv(o, o, KERNEL) + bn(o);
                let proj = if self.has_projection() {
                    conv(i, o, 1) + bn(o)
                } else {
                    0
                };
                main + proj
            }
        }
    }
}

/// Where a feature tap sits relative to the ReLU that ends a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPosition {
    PreRelu,
    BlockEnd,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureTap {
    pub name: String,
    pub group_index: usize,
    pub channels: usize,
    pub position: TapPosition,
}

/// Parameterized CNN: groups of blocks at decreasing spatial size, global
/// average pooling and a linear classifier.
///
/// Group `g > 0` starts with a 2×2 max-pool that halves height and width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub block_kind: BlockKind,
    pub blocks_per_group: usize,
    /// Base channel width of each group.
    pub groups: Vec<usize>,
    #[serde(default = "one")]
    pub width_multiplier: f64,
    pub num_classes: usize,
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.groups.is_empty() {
            return bad("groups", "must list at least one group".into());
        }
        if self.groups.contains(&0) {
            return bad("groups", "widths must be positive".into());
        }
        if self.blocks_per_group == 0 {
            return bad("blocks_per_group", "must be at least 1".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return bad(
                "width_multiplier",
                format!("must be positive, got {}", self.width_multiplier),
            );
        }
        if self.num_classes < 2 {
            return bad(
                "num_classes",
                format!("need at least 2 classes, got {}", self.num_classes),
            );
        }
        if self.input_shape.contains(&0) {
            return bad("input_shape", "extents must be positive".into());
        }
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for g in 1..self.groups.len() {
            if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                return bad(
                    "input_shape",
                    format!("group {g} halves a {h}×{w} map, which needs even extents"),
                );
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Channel width of each group after the width multiplier.
    pub fn group_widths(&self) -> Vec<usize> {
        self.groups
            .iter()
            .map(|&c| ((c as f64 * self.width_multiplier).round() as usize).max(1))
            .collect()
    }

    /// `(H, W)` of the feature maps inside each group.
    pub fn group_spatial(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        (0..self.groups.len())
            .map(|g| {
                if g > 0 {
                    h /= 2;
                    w /= 2;
                }
                (h, w)
            })
            .collect()
    }

    /// Block layout per group.
    pub fn block_specs(&self) -> Vec<Vec<BlockSpec>> {
        let widths = self.group_widths();
        let mut in_c = self.input_shape[0];
        widths
            .iter()
            .map(|&w| {
                (0..self.blocks_per_group)
                    .map(|_| {
                        let b = BlockSpec {
                            kind: self.block_kind,
                            in_channels: in_c,
                            out_channels: w,
                            stride: 1,
                        };
                        in_c = w;
                        b
                    })
                    .collect()
            })
            .collect()
    }

    /// Trainable parameter count derived from the spec alone.
    pub fn parameter_count(&self) -> usize {
        let blocks: usize = self
            .block_specs()
            .iter()
            .flatten()
            .map(BlockSpec::parameter_count)
            .sum();
        let last = *self
            .group_widths()
            .last()
            .expect("validated spec has groups");
        blocks + last * self.num_classes + self.num_classes
    }

    /// One tap per group, shallow to deep.
    pub fn tap_positions(&self, position: TapPosition) -> Vec<FeatureTap> {
        self.group_widths()
            .into_iter()
            .enumerate()
            .map(|(g, channels)| FeatureTap {
                name: format!("group{g}"),
                group_index: g,
                channels,
                position,
            })
            .collect()
    }
}

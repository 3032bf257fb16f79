//! Channel margins, the margin-ReLU teacher transform, partial L2 and the
//! distillation losses built on them.

mod config;
mod losses;
mod margins;

pub use config::{default_layer_weights, DistillConfig, DistillMethod};
pub use losses::{
    fitnets_l2_loss, kd_loss, kd_term, l2_sum, margin_relu, partial_l2, partial_l2_mask,
    proposed_distill_loss, total_loss, DistillLoss, TapPair,
};
pub use margins::{
    accumulate_margins, margin_closed_form, margin_empirical, margins_from_bn, normal_cdf,
    normal_pdf, MarginAccumulator, MarginSource, MarginSpec, TruncatedGaussianParams,
    MILLS_THRESHOLD,
};

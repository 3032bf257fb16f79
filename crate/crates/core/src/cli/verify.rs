//! Self-checks: finite-difference gradients for every differentiable
//! operation, and the closed-form margin against Monte Carlo.

use crate::distill::{margin_closed_form, TruncatedGaussianParams};
use crate::error::Result;
use crate::tensor::{grad_check, BnMode, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;

pub const GRAD_PERTURBATION: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_POINTS: usize = 20;

/// Kink-adjacent draws are discarded; this bounds the redraws per op.
const MAX_DRAWS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct OpGradResult {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub points: usize,
    pub skipped: usize,
}

impl OpGradResult {
    pub fn passed(&self) -> bool {
        self.points == GRAD_POINTS && self.max_rel_error < GRAD_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub ops: Vec<OpGradResult>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpGradResult::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.ops.iter().filter(|r| !r.passed()).map(|r| r.op).collect()
    }
}

impl fmt::Display for GradientReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26} {:>13} {:>7} {:>8}  result", "op", "max rel err", "points", "skipped")?;
        for r in &self.ops {
            writeln!(
                f,
                "{:<26} {:>13.3e} {:>7} {:>8}  {}",
                r.op,
                r.max_rel_error,
                r.points,
                r.skipped,
                if r.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One differentiable operation: its input shapes and a builder that ends
/// in a scalar.
struct Case {
    op: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Builder,
}

fn case(op: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.value(y).dims(), 1.0, &mut crate::seeded_rng(seed))?;
    let r = g.constant(r)?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn cases() -> Vec<Case> {
    let x4: &[usize] = &[2, 2, 4, 4];
    vec![
        case("add", &[&[3, 4], &[3, 4]], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 1)
        }),
        case("sub", &[&[3, 4], &[3, 4]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 2)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            g.sum(y)
        }),
        case("scale", &[&[3, 4]], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            project(g, y, 3)
        }),
        case("sum", &[&[3, 4]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        }),
        case("mean", &[&[3, 4]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }),
        case("reshape", &[&[3, 4]], |g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            project(g, y, 4)
        }),
        case("matmul", &[&[3, 4], &[4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 5)
        }),
        case("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(g, y, 6)
        }),
        case("conv2d_strided", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            project(g, y, 7)
        }),
        case("batch_norm_training", &[x4, &[2], &[2]], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &[0.0; 2], &[1.0; 2], BnMode::Training, 1e-5)?;
            project(g, y, 8)
        }),
        case("batch_norm_evaluation", &[x4, &[2], &[2]], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &[0.2, -0.1], &[0.8, 1.3], BnMode::Evaluation, 1e-5)?;
            project(g, y, 9)
        }),
        case("relu", &[x4], |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, 10)
        }),
        case("clamp_min_per_channel", &[x4], |g, v| {
            let y = g.clamp_min_per_channel(v[0], &[-0.4, -0.9])?;
            project(g, y, 11)
        }),
        case("max_pool2d", &[x4], |g, v| {
            let y = g.max_pool2d(v[0], 2, 2)?;
            project(g, y, 12)
        }),
        case("avg_pool2d", &[x4], |g, v| {
            let y = g.avg_pool2d(v[0], 2, 2)?;
            project(g, y, 13)
        }),
        case("global_avg_pool", &[x4], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, 14)
        }),
        case("linear", &[&[3, 4], &[2, 4], &[2]], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, 15)
        }),
        case("softmax_cross_entropy", &[&[4, 5]], |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1, 4])),
        case("kl_divergence_softened", &[&[4, 5]], |g, v| {
            let teacher = Tensor::randn(&[4, 5], 1.5, &mut crate::seeded_rng(16))?;
            g.kl_divergence_softened(&teacher, v[0], 4.0)
        }),
        case("masked_sq_error", &[x4], |g, v| {
            let target = Tensor::randn(g.value(v[0]).dims(), 1.0, &mut crate::seeded_rng(17))?;
            crate::distill::partial_l2(g, &target, v[0])
        }),
    ]
}

/// Operation names covered by [`verify_gradients`].
pub fn gradient_ops() -> Vec<&'static str> {
    cases().iter().map(|c| c.op).collect()
}

/// Checks every op at [`GRAD_POINTS`] seeded random points with respect to
/// each of its inputs. Points within the kink exclusion are redrawn.
pub fn verify_gradients(seed: u64) -> Result<GradientReport> {
    let mut ops = Vec::new();
    for (k, c) in cases().iter().enumerate() {
        let mut rng = crate::seeded_rng(seed.wrapping_mul(1000).wrapping_add(k as u64));
        let mut res = OpGradResult {
            op: c.op,
            max_rel_error: 0.0,
            points: 0,
            skipped: 0,
        };
        let mut draws = 0;
        while res.points < GRAD_POINTS && draws < MAX_DRAWS {
            draws += 1;
            let inputs: Vec<Tensor> = c
                .shapes
                .iter()
                .map(|s| Tensor::randn(s, 1.0, &mut rng))
                .collect::<Result<_>>()?;
            let mut worst: f64 = 0.0;
            let mut near_kink = false;
            for wrt in 0..inputs.len() {
                let r = grad_check(
                    |g, x| {
                        let vars = inputs
                            .iter()
                            .enumerate()
                            .map(|(i, t)| if i == wrt { Ok(x) } else { g.constant(t.clone()) })
                            .collect::<Result<Vec<_>>>()?;
                        (c.build)(g, &vars)
                    },
                    &inputs[wrt],
                    GRAD_PERTURBATION,
                )?;
                near_kink |= r.near_kink();
                worst = worst.max(r.max_rel_error);
            }
            if near_kink {
                res.skipped += 1;
            } else {
                res.points += 1;
                res.max_rel_error = res.max_rel_error.max(worst);
            }
        }
        ops.push(res);
    }
    Ok(GradientReport { ops })
}

pub const MARGIN_MEANS: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
pub const MARGIN_STDS: [f64; 3] = [0.5, 1.0, 2.0];
/// Width of the acceptance band in Monte Carlo standard errors.
pub const MARGIN_BAND: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MarginCheck {
    pub mu: f64,
    pub sigma: f64,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub standard_error: f64,
    /// Number of negative samples behind the Monte Carlo mean.
    pub negatives: usize,
}

impl MarginCheck {
    pub fn passed(&self) -> bool {
        self.negatives >= 2
            && (self.closed_form - self.monte_carlo).abs() < MARGIN_BAND * self.standard_error
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginReport {
    pub checks: Vec<MarginCheck>,
    pub samples: usize,
}

impl MarginReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(MarginCheck::passed)
    }
}

impl fmt::Display for MarginReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>5} {:>5} {:>14} {:>14} {:>11} {:>9}  result",
            "mu", "sigma", "closed form", "monte carlo", "std err", "negatives"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:>5} {:>5} {:>14.9} {:>14.9} {:>11.3e} {:>9}  {}",
                c.mu,
                c.sigma,
                c.closed_form,
                c.monte_carlo,
                c.standard_error,
                c.negatives,
                if c.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares the closed-form margin with the sample mean of the negative
/// draws out of `samples` draws from `N(μ, σ²)`, for every grid point.
pub fn verify_margins(seed: u64, samples: usize) -> Result<MarginReport> {
    let mut checks = Vec::new();
    for (i, &mu) in MARGIN_MEANS.iter().enumerate() {
        for (j, &sigma) in MARGIN_STDS.iter().enumerate() {
            let params = TruncatedGaussianParams::new(mu, sigma)?;
            let mut rng = crate::seeded_rng(seed ^ ((i * MARGIN_STDS.len() + j) as u64) << 32);
            let (mut n, mut sum, mut sum_sq) = (0usize, 0.0, 0.0);
            for _ in 0..samples {
                let x = mu + sigma * rng.sample::<f64, _>(StandardNormal);
                if x < 0.0 {
                    n += 1;
                    sum += x;
                    sum_sq += x * x;
                }
            }
            let (mean, se) = if n >= 2 {
                let mean = sum / n as f64;
                let var = (sum_sq - n as f64 * mean * mean) / (n - 1) as f64;
                (mean, (var.max(0.0) / n as f64).sqrt())
            } else {
                (f64::NAN, f64::NAN)
            };
            checks.push(MarginCheck {
                mu,
                sigma,
                closed_form: margin_closed_form(params)?,
                monte_carlo: mean,
                standard_error: se,
                negatives: n,
            });
        }
    }
    Ok(MarginReport { checks, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_margin_run_is_deterministic() {
        let a = verify_margins(1, 20_000).unwrap();
        assert_eq!(a, verify_margins(1, 20_000).unwrap());
        assert_eq!(a.checks.len(), 15);
    }

    #[test]
    fn every_case_builds() {
        for c in cases() {
            let mut g = Graph::new();
            let vars: Vec<Var> = c
                .shapes
                .iter()
                .map(|s| g.param(Tensor::ones(s).unwrap()).unwrap())
                .collect();
            let y = (c.build)(&mut g, &vars).unwrap();
            assert_eq!(g.value(y).numel(), 1, "{}", c.op);
        }
    }
}

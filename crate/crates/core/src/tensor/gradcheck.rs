use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Points closer than this to a kink are not valid gradient-check points.
pub const KINK_EXCLUSION: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of |analytic − central| / max(|analytic|, |central|, 1e-8)
    pub max_rel_error: f64,
    /// Element index where `max_rel_error` was attained.
    pub worst_index: usize,
    /// Distance of the evaluation point to the nearest recorded kink.
    pub kink_distance: f64,
}

impl GradCheckReport {
    /// True when the point lies within [`KINK_EXCLUSION`] of a kink, in which
    /// case the error figure carries no meaning.
    pub fn near_kink(&self) -> bool {
        self.kink_distance < KINK_EXCLUSION
    }
}

/// Compares the analytic gradient of a scalar function against central
/// finite differences at `point`.
///
/// `f` receives a fresh graph and a handle to the point and must return a
/// scalar node.
pub fn grad_check<F>(f: F, point: &Tensor, perturbation: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(perturbation > 0.0) {
        return Err(Error::Parameter(format!(
            "perturbation must be > 0, got {perturbation}"
        )));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone())?;
    let out = f(&mut g, x)?;
    let analytic = g.backward(out)?.take(x).expect("point is a trainable leaf");
    let kink_distance = g.kink_distance();

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p)?;
        let out = f(&mut g, x)?;
        g.value(out).item()
    };

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += perturbation;
        let mut minus = point.clone();
        minus.data_mut()[i] -= perturbation;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * perturbation);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        kink_distance,
    })
}

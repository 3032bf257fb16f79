use super::margins::MarginSpec;
use crate::error::{Error, Result};
use crate::nn::Regressor;
use crate::tensor::{Graph, Tensor, Var};

/// `max(x, m_c)` per channel. The result is a target: it is computed
/// outside any caller graph and carries no gradient.
pub fn margin_relu(features: &Tensor, margins: &[f64]) -> Result<Tensor> {
    let dims = features.shape().dims();
    if dims.len() != 4 || dims[1] != margins.len() {
        return Err(Error::dim(
            "margin_relu",
            format!(
                "{} margins for features of shape {}",
                margins.len(),
                features.shape()
            ),
        ));
    }
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite { op: "margin_relu" });
    }
    let hw = dims[2] * dims[3];
    let mut out = features.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        let m = margins[i % margins.len()];
        plane.iter_mut().for_each(|v| *v = v.max(m));
    }
    Ok(out)
}

/// True where an element contributes: everywhere except `S ≤ T ≤ 0`.
pub fn partial_l2_mask(target: &[f64], prediction: &[f64]) -> Vec<bool> {
    target
        .iter()
        .zip(prediction)
        .map(|(&t, &s)| !(s <= t && t <= 0.0))
        .collect()
}

/// Sum over all elements of `(T − S)²`, skipping elements with `S ≤ T ≤ 0`.
pub fn partial_l2(g: &mut Graph, target: &Tensor, prediction: Var) -> Result<Var> {
    let s = g.value(prediction);
    if s.shape() != target.shape() {
        return Err(Error::dim(
            "partial_l2",
            format!("target {} vs prediction {}", target.shape(), s.shape()),
        ));
    }
    let active = partial_l2_mask(target.data(), s.data());
    let kink = target
        .data()
        .iter()
        .zip(s.data())
        .filter(|(&t, _)| t <= 0.0)
        .map(|(t, s)| (s - t).abs())
        .fold(f64::INFINITY, f64::min);
    g.masked_sq_error(prediction, target, active, kink)
}

/// Plain summed squared error against a constant target.
pub fn l2_sum(g: &mut Graph, target: &Tensor, prediction: Var) -> Result<Var> {
    let n = g.value(prediction).numel();
    g.masked_sq_error(prediction, target, vec![true; n], f64::INFINITY)
}

/// One distillation tap: the teacher's feature map and the student's.
pub struct TapPair<'a> {
    pub name: &'a str,
    pub teacher: &'a Tensor,
    pub student: Var,
}

/// A distillation loss and the leaf handles of the regressors it used, in
/// tap order.
pub struct DistillLoss {
    pub loss: Var,
    pub regressor_params: Vec<Vec<Var>>,
}

fn check_taps(taps: &[TapPair<'_>], regressors: &[Regressor], layer_weights: &[f64]) -> Result<()> {
    if taps.is_empty() {
        return Err(Error::Config(
            "active_taps: no distillation taps selected".into(),
        ));
    }
    if regressors.len() != taps.len() {
        return Err(Error::Config(format!(
            "{} regressors for {} taps",
            regressors.len(),
            taps.len()
        )));
    }
    if layer_weights.len() != taps.len() {
        return Err(Error::Config(format!(
            "layer_weights: {} weights for {} taps",
            layer_weights.len(),
            taps.len()
        )));
    }
    Ok(())
}

fn weighted_sum(
    g: &mut Graph,
    taps: &[TapPair<'_>],
    regressors: &[Regressor],
    layer_weights: &[f64],
    trainable: bool,
    mut term: impl FnMut(&mut Graph, &TapPair<'_>, Var) -> Result<Var>,
) -> Result<DistillLoss> {
    check_taps(taps, regressors, layer_weights)?;
    let mut total: Option<Var> = None;
    let mut regressor_params = Vec::with_capacity(taps.len());
    for ((tap, reg), &w) in taps.iter().zip(regressors).zip(layer_weights) {
        let out = reg.forward(g, tap.student, trainable)?;
        if g.value(out.output).shape() != tap.teacher.shape() {
            return Err(Error::Config(format!(
                "tap {}: regressed student {} does not match teacher {}",
                tap.name,
                g.value(out.output).shape(),
                tap.teacher.shape()
            )));
        }
        let d = term(g, tap, out.output)?;
        let d = g.scale(d, w)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
        regressor_params.push(out.params);
    }
    Ok(DistillLoss {
        loss: total.expect("at least one tap"),
        regressor_params,
    })
}

/// `Σ_k w_k · d_p(σ_m(F_t,k), r_k(F_s,k))`.
pub fn proposed_distill_loss(
    g: &mut Graph,
    taps: &[TapPair<'_>],
    regressors: &[Regressor],
    margins: &MarginSpec,
    layer_weights: &[f64],
    trainable: bool,
) -> Result<DistillLoss> {
    weighted_sum(
        g,
        taps,
        regressors,
        layer_weights,
        trainable,
        |g, tap, pred| {
            let m = margins
                .get(tap.name)
                .ok_or_else(|| Error::Config(format!("no margins for tap {}", tap.name)))?;
            let target = margin_relu(tap.teacher, m)?;
            partial_l2(g, &target, pred)
        },
    )
}

/// `Σ_k w_k · ‖F_t,k − r_k(F_s,k)‖²` with no teacher transform.
pub fn fitnets_l2_loss(
    g: &mut Graph,
    taps: &[TapPair<'_>],
    regressors: &[Regressor],
    layer_weights: &[f64],
    trainable: bool,
) -> Result<DistillLoss> {
    weighted_sum(
        g,
        taps,
        regressors,
        layer_weights,
        trainable,
        |g, tap, pred| l2_sum(g, tap.teacher, pred),
    )
}

/// `task + alpha · distill`.
pub fn total_loss(g: &mut Graph, task: Var, distill: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Parameter(format!("alpha must be ≥ 0, got {alpha}")));
    }
    let d = g.scale(distill, alpha)?;
    g.add(task, d)
}

/// Output distillation: `CE(student, labels) + λ·τ²·KL(p_t^τ ‖ p_s^τ)`.
pub fn kd_loss(
    g: &mut Graph,
    teacher_logits: &Tensor,
    student_logits: Var,
    labels: &[usize],
    temperature: f64,
    lambda: f64,
) -> Result<Var> {
    let ce = g.softmax_cross_entropy(student_logits, labels)?;
    let kl = kd_term(g, teacher_logits, student_logits, temperature)?;
    total_loss(g, ce, kl, lambda)
}

/// `τ²·KL(p_t^τ ‖ p_s^τ)`, the distillation half of [`kd_loss`].
pub fn kd_term(
    g: &mut Graph,
    teacher_logits: &Tensor,
    student_logits: Var,
    temperature: f64,
) -> Result<Var> {
    let kl = g.kl_divergence_softened(teacher_logits, student_logits, temperature)?;
    g.scale(kl, temperature * temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::MarginSource;
    use crate::tensor::grad_check;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    fn pl2(target: &[f64], pred: &[f64]) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(t(pred)).unwrap();
        let l = partial_l2(&mut g, &t(target), s).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn partial_l2_cases() {
        assert_eq!(pl2(&[1.0], &[0.5]), 0.25);
        assert_eq!(pl2(&[-0.3], &[-0.5]), 0.0);
        assert!((pl2(&[-0.3], &[0.2]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_target_skips_lower_student() {
        // S ≤ T ≤ 0 with T = 0: read literally, the element is skipped
        assert_eq!(pl2(&[0.0], &[-0.1]), 0.0);
        assert!((pl2(&[0.0], &[0.1]) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn margin_relu_cases() {
        let x = Tensor::new(&[1, 1, 1, 3], vec![-2.0, -0.1, 0.5]).unwrap();
        assert_eq!(margin_relu(&x, &[-0.4]).unwrap().data(), &[-0.4, -0.1, 0.5]);
        assert_eq!(margin_relu(&x, &[0.0]).unwrap().data(), &[0.0, 0.0, 0.5]);
        assert!(margin_relu(&x, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gradient_dead_zone() {
        let mut g = Graph::new();
        let s = g.param(t(&[-0.5, 0.2, -0.1, 1.0])).unwrap();
        let l = partial_l2(&mut g, &t(&[-0.3, -0.3, 0.0, 0.5]), s).unwrap();
        let grad = g.backward(l).unwrap().take(s).unwrap();
        let expect = [0.0, 2.0 * (0.2 + 0.3), 0.0, 2.0 * (1.0 - 0.5)];
        for (a, b) in grad.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", grad.data());
        }
    }

    #[test]
    fn total_and_kd() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0)).unwrap();
        let b = g.constant(Tensor::scalar(2.0)).unwrap();
        let l = total_loss(&mut g, a, b, 1e-3).unwrap();
        assert!((g.value(l).item().unwrap() - 1.002).abs() < 1e-15);
        let z = total_loss(&mut g, a, b, 0.0).unwrap();
        assert_eq!(g.value(z).item().unwrap(), 1.0);
        assert!(total_loss(&mut g, a, b, -1.0).is_err());

        let logits = Tensor::new(&[2, 3], vec![0.1, 2.0, -1.0, 0.3, 0.3, 0.9]).unwrap();
        let s = g.constant(logits.clone()).unwrap();
        let kd = kd_loss(&mut g, &logits, s, &[1, 2], 4.0, 1.0).unwrap();
        let ce = g.softmax_cross_entropy(s, &[1, 2]).unwrap();
        assert!((g.value(kd).item().unwrap() - g.value(ce).item().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kd_gradient_check() {
        let teacher = Tensor::new(&[2, 3], vec![1.0, -0.5, 0.2, 0.0, 2.0, -1.0]).unwrap();
        let point = Tensor::new(&[2, 3], vec![0.3, 0.1, -0.4, 1.1, -0.2, 0.5]).unwrap();
        let r = grad_check(
            |g, x| kd_loss(g, &teacher, x, &[0, 1], 4.0, 0.7),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn weights_scale_linearly_and_identity_fixed_point() {
        let teacher = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut crate::seeded_rng(3)).unwrap();
        let margins = MarginSpec::new(
            MarginSource::Empirical,
            vec![("group0".into(), vec![-0.5, -0.2])],
        )
        .unwrap();
        let reg = vec![Regressor::identity("r0", 2).unwrap()];
        let loss_at = |student: &Tensor, w: f64| {
            let mut g = Graph::new();
            let s = g.constant(student.clone()).unwrap();
            let taps = [TapPair {
                name: "group0",
                teacher: &teacher,
                student: s,
            }];
            let out = proposed_distill_loss(&mut g, &taps, &reg, &margins, &[w], false).unwrap();
            g.value(out.loss).item().unwrap()
        };
        let student = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut crate::seeded_rng(4)).unwrap();
        let full = loss_at(&student, 1.0);
        assert!(full > 0.0);
        assert_eq!(loss_at(&student, 0.5), 0.5 * full);
    }
}

use super::metrics::{MetricsRecord, MetricsWriter};
use super::{Sgd, TrainConfig};
use crate::data::{BatchPlan, BatchStream, Dataset, Normalizer};
use crate::distill::{
    fitnets_l2_loss, kd_term, margin_empirical, margins_from_bn, proposed_distill_loss, total_loss,
    DistillConfig, DistillMethod, MarginSource, MarginSpec, TapPair,
};
use crate::error::{Error, Result};
use crate::nn::{ForwardOptions, Model, ModelSpec, Regressor};
use crate::tensor::{BnMode, Graph, Tensor, Var};
use std::time::Instant;

/// A trained model with its per-epoch metrics. Regressors are present for
/// feature-distillation runs.
pub struct RunOutput {
    pub model: Model,
    pub regressors: Vec<Regressor>,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    /// Mean `KL(softmax(teacher) ‖ softmax(student))` at temperature 1.
    pub kl: f64,
    /// Mean cross-entropy of the student against the labels.
    pub ce: f64,
}

const EVAL_BATCH: usize = 250;

/// Evaluation-mode logits `[M, K]` for every image of `ds`, in order.
pub fn predict_logits(model: &Model, ds: &Dataset, norm: &Normalizer) -> Result<Tensor> {
    let k = model.spec().num_classes;
    let mut out = Vec::with_capacity(ds.len() * k);
    for batch in BatchStream::new(ds, norm, &BatchPlan::sequential(EVAL_BATCH), 0, false)? {
        out.extend_from_slice(model.logits(&batch.images, BnMode::Evaluation)?.data());
    }
    Tensor::new(&[ds.len(), k], out)
}

fn error_pct(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.dims()[1];
    let wrong = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0;
            pred != l
        })
        .count();
    100.0 * wrong as f64 / labels.len() as f64
}

/// Test error in percent, BN in Evaluation mode, no augmentation.
pub fn evaluate(model: &Model, ds: &Dataset, norm: &Normalizer) -> Result<f64> {
    Ok(error_pct(&predict_logits(model, ds, norm)?, ds.labels()))
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(logits.clone())?;
    let ce = g.softmax_cross_entropy(s, labels)?;
    g.value(ce).item()
}

fn similarity_from_logits(
    teacher: &Tensor,
    student: &Tensor,
    labels: &[usize],
) -> Result<Similarity> {
    let mut g = Graph::new();
    let s = g.constant(student.clone())?;
    let kl = g.kl_divergence_softened(teacher, s, 1.0)?;
    Ok(Similarity {
        kl: g.value(kl).item()?,
        ce: cross_entropy(student, labels)?,
    })
}

/// KL divergence with the teacher and cross-entropy with the labels, both
/// averaged over `ds`.
pub fn similarity_analysis(
    teacher: &Model,
    student: &Model,
    ds: &Dataset,
    norm: &Normalizer,
) -> Result<Similarity> {
    let t = predict_logits(teacher, ds, norm)?;
    let s = predict_logits(student, ds, norm)?;
    similarity_from_logits(&t, &s, ds.labels())
}

/// Margins for the teacher's pre-ReLU taps: closed form from BN parameters,
/// or one sequential pass over the training split.
pub fn compute_margins(
    teacher: &Model,
    train: &Dataset,
    norm: &Normalizer,
    dcfg: &DistillConfig,
    batch_size: usize,
) -> Result<MarginSpec> {
    match dcfg.margin_source {
        MarginSource::ClosedForm => margins_from_bn(teacher),
        MarginSource::Empirical => {
            let stream =
                BatchStream::new(train, norm, &BatchPlan::sequential(batch_size), 0, false)?;
            margin_empirical(teacher, stream.map(|b| b.images), dcfg.teacher_bn_mode)
        }
    }
}

/// Trains `spec` on the task loss alone.
pub fn train_teacher(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    sink: Option<&mut MetricsWriter>,
) -> Result<RunOutput> {
    run(spec, None, train, test, cfg, sink)
}

/// Trains a student under `dcfg`. The teacher is only read. Proposed runs
/// compute margins first unless `margins` is given.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    spec: &ModelSpec,
    teacher: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    dcfg: &DistillConfig,
    margins: Option<&MarginSpec>,
    sink: Option<&mut MetricsWriter>,
) -> Result<RunOutput> {
    run(
        spec,
        Some(Teacher {
            model: teacher,
            dcfg,
            margins,
        }),
        train,
        test,
        cfg,
        sink,
    )
}

struct Teacher<'a> {
    model: &'a Model,
    dcfg: &'a DistillConfig,
    margins: Option<&'a MarginSpec>,
}

/// Feature-distillation state: active tap indices, weights, regressors.
struct FeaturePlan {
    taps: Vec<(usize, String)>,
    weights: Vec<f64>,
    regressors: Vec<Regressor>,
    margins: Option<MarginSpec>,
}

fn feature_plan(
    student: &Model,
    t: &Teacher<'_>,
    train: &Dataset,
    norm: &Normalizer,
    cfg: &TrainConfig,
) -> Result<Option<FeaturePlan>> {
    if !t.dcfg.uses_features() {
        return Ok(None);
    }
    let s_taps = student.taps(t.dcfg.tap_position);
    let t_taps = t.model.taps(t.dcfg.tap_position);
    if s_taps.len() != t_taps.len() {
        return Err(Error::Config(format!(
            "student has {} taps, teacher has {}",
            s_taps.len(),
            t_taps.len()
        )));
    }
    let (s_shapes, t_shapes) = (student.tap_shapes(1), t.model.tap_shapes(1));
    let names: Vec<String> = s_taps.iter().map(|tp| tp.name.clone()).collect();
    let (active, weights) = t.dcfg.resolve_taps(&names)?;
    let mut taps = Vec::new();
    let mut regressors = Vec::new();
    for name in active {
        let i = names
            .iter()
            .position(|n| *n == name)
            .expect("resolved from names");
        if s_shapes[i][2..] != t_shapes[i][2..] {
            return Err(Error::Config(format!(
                "tap {name}: student spatial size {:?} differs from teacher {:?}",
                &s_shapes[i][2..],
                &t_shapes[i][2..]
            )));
        }
        regressors.push(Regressor::new(
            &format!("regressor.{name}"),
            s_taps[i].channels,
            t_taps[i].channels,
            cfg.seed.wrapping_add(0x5EED_0000 + i as u64),
        )?);
        taps.push((i, name));
    }
    let margins = match (t.dcfg.method, t.margins) {
        (DistillMethod::Proposed, Some(m)) => Some(m.clone()),
        (DistillMethod::Proposed, None) => Some(compute_margins(
            t.model,
            train,
            norm,
            t.dcfg,
            cfg.batch_size,
        )?),
        _ => None,
    };
    if let Some(m) = &margins {
        for (_, name) in &taps {
            if m.get(name).is_none() {
                return Err(Error::Config(format!("margins lack tap {name}")));
            }
        }
    }
    Ok(Some(FeaturePlan {
        taps,
        weights,
        regressors,
        margins,
    }))
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            msg: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

fn run(
    spec: &ModelSpec,
    teacher: Option<Teacher<'_>>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut sink: Option<&mut MetricsWriter>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(t) = &teacher {
        t.dcfg.validate()?;
        if t.model.spec().input_shape != spec.input_shape
            || t.model.spec().num_classes != spec.num_classes
        {
            return Err(Error::Config(
                "teacher and student disagree on input shape or class count".into(),
            ));
        }
    }
    let started = Instant::now();
    let mut model = Model::build(spec, cfg.seed)?;
    let norm = Normalizer::fit(train)?;
    // an undistilled student still reports its divergence from the teacher
    let teacher_test_logits = match &teacher {
        Some(t) => Some(predict_logits(t.model, test, &norm)?),
        None => None,
    };
    let teacher = teacher.filter(|t| t.dcfg.uses_teacher());
    let mut plan = match &teacher {
        Some(t) => feature_plan(&model, t, train, &norm, cfg)?,
        None => None,
    };
    let batch_plan = BatchPlan {
        batch_size: cfg.batch_size,
        shuffle_seed: cfg.seed,
        drop_last: false,
        shuffle: true,
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut step = 0usize;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut task_sum, mut distill_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in BatchStream::new(train, &norm, &batch_plan, epoch, cfg.augment)? {
            let (task, distill) = train_step(
                &mut model,
                teacher.as_ref(),
                plan.as_mut(),
                &batch,
                &mut opt,
                lr,
            )
            .map_err(|e| diverged(step, e))?;
            task_sum += task;
            distill_sum += distill;
            batches += 1;
            step += 1;
        }
        let logits = predict_logits(&model, test, &norm)?;
        let ce = cross_entropy(&logits, test.labels())?;
        let kl = match &teacher_test_logits {
            Some(t) => Some(similarity_from_logits(t, &logits, test.labels())?.kl),
            None => None,
        };
        let rec = MetricsRecord {
            epoch,
            train_task_loss: task_sum / batches as f64,
            train_distill_loss: distill_sum / batches as f64,
            test_error_pct: error_pct(&logits, test.labels()),
            kl_with_teacher: kl,
            ce_with_gt: ce,
            wall_seconds: if cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {epoch}: lr {lr:.4} task {:.4} distill {:.4} test error {:.2}%",
            rec.train_task_loss,
            rec.train_distill_loss,
            rec.test_error_pct
        );
        if let Some(w) = sink.as_deref_mut() {
            w.write(&rec)?;
        }
        metrics.push(rec);
    }
    Ok(RunOutput {
        model,
        regressors: plan.map(|p| p.regressors).unwrap_or_default(),
        metrics,
    })
}

/// One SGD step; returns the task and unweighted distillation losses.
fn train_step(
    model: &mut Model,
    teacher: Option<&Teacher<'_>>,
    plan: Option<&mut FeaturePlan>,
    batch: &crate::data::Batch,
    opt: &mut Sgd,
    lr: f64,
) -> Result<(f64, f64)> {
    // teacher pass: constants only, running statistics untouched
    let mut tg = Graph::new();
    let teacher_out = match teacher {
        Some(t) => {
            let x = tg.constant(batch.images.clone())?;
            Some((
                t,
                t.model.forward_frozen(&mut tg, x, t.dcfg.teacher_bn_mode)?,
            ))
        }
        None => None,
    };

    let mut g = Graph::new();
    let x = g.constant(batch.images.clone())?;
    let out = model.forward(&mut g, x, ForwardOptions::train())?;
    let task = g.softmax_cross_entropy(out.logits, &batch.labels)?;

    let mut loss = task;
    let mut distill_value = 0.0;
    let mut regressor_vars: Vec<Vec<Var>> = Vec::new();
    if let Some((t, tout)) = &teacher_out {
        let dcfg = t.dcfg;
        let teacher_logits = tg.value(tout.logits);
        match dcfg.method {
            DistillMethod::Kd => {
                let d = kd_term(&mut g, teacher_logits, out.logits, dcfg.temperature)?;
                distill_value = g.value(d).item()?;
                loss = total_loss(&mut g, task, d, dcfg.kd_lambda)?;
            }
            DistillMethod::Proposed | DistillMethod::FitnetsL2 => {
                let plan = plan.as_deref().expect("feature methods carry a plan");
                let t_taps = tout.taps(dcfg.tap_position);
                let s_taps = out.taps(dcfg.tap_position);
                let pairs: Vec<TapPair<'_>> = plan
                    .taps
                    .iter()
                    .map(|(i, name)| TapPair {
                        name,
                        teacher: tg.value(t_taps[*i]),
                        student: s_taps[*i],
                    })
                    .collect();
                let d = if dcfg.method == DistillMethod::Proposed {
                    let margins = plan.margins.as_ref().expect("proposed runs carry margins");
                    proposed_distill_loss(
                        &mut g,
                        &pairs,
                        &plan.regressors,
                        margins,
                        &plan.weights,
                        true,
                    )?
                } else {
                    fitnets_l2_loss(&mut g, &pairs, &plan.regressors, &plan.weights, true)?
                };
                distill_value = g.value(d.loss).item()?;
                loss = total_loss(&mut g, task, d.loss, dcfg.alpha)?;
                if dcfg.add_kd {
                    let kd = kd_term(&mut g, teacher_logits, out.logits, dcfg.temperature)?;
                    loss = total_loss(&mut g, loss, kd, dcfg.kd_lambda)?;
                }
                regressor_vars = d.regressor_params;
            }
            DistillMethod::None => {}
        }
    }
    let task_value = g.value(task).item()?;

    let mut grads = g.backward(loss)?;
    let mut updates: Vec<(usize, Tensor)> = Vec::new();
    for (slot, &v) in out.params.iter().enumerate() {
        updates.push((slot, grads.take(v).expect("trainable parameter")));
    }
    let n_model = out.params.len();
    let mut slot = n_model;
    for vars in &regressor_vars {
        for &v in vars {
            updates.push((slot, grads.take(v).expect("trainable regressor parameter")));
            slot += 1;
        }
    }
    if updates.iter().any(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite { op: "backward" });
    }
    let mut updates = updates.into_iter();
    for (p, (s, grad)) in model.params_mut().iter_mut().zip(updates.by_ref()) {
        opt.step(s, &mut p.value, &grad, lr)?;
    }
    if let Some(plan) = plan {
        let params = plan
            .regressors
            .iter_mut()
            .flat_map(|r| r.params_mut().iter_mut());
        for (p, (s, grad)) in params.zip(updates) {
            opt.step(s, &mut p.value, &grad, lr)?;
        }
    }
    Ok((task_value, distill_value))
}

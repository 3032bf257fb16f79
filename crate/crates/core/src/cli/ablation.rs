use super::commands::{student_run, RunSummary, Workspace};
use super::config::ExperimentConfig;
use crate::distill::{DistillConfig, DistillMethod};
use crate::error::{Error, Result};
use crate::nn::TapPosition;
use crate::tensor::BnMode;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// One column of the ablation: a label, a directory slug and the
/// distillation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRung {
    pub label: &'static str,
    pub slug: &'static str,
    pub distill: DistillConfig,
}

/// The four cumulative rungs built on `base` (alpha, tap subset, layer
/// weights and margin source are kept):
///
/// 1. L2 on block-end features, teacher BN in evaluation mode
/// 2. \+ pre-ReLU position
/// 3. \+ teacher BN in training mode
/// 4. \+ margin ReLU and partial L2
pub fn ablation_matrix(base: &DistillConfig) -> [AblationRung; 4] {
    let mut d = base.clone();
    d.method = DistillMethod::FitnetsL2;
    d.add_kd = false;
    d.tap_position = TapPosition::BlockEnd;
    d.teacher_bn_mode = BnMode::Evaluation;
    let r1 = d.clone();
    d.tap_position = TapPosition::PreRelu;
    let r2 = d.clone();
    d.teacher_bn_mode = BnMode::Training;
    let r3 = d.clone();
    d.method = DistillMethod::Proposed;
    [
        AblationRung {
            label: "L2 at block end",
            slug: "rung1_l2_block_end",
            distill: r1,
        },
        AblationRung {
            label: "+ pre-ReLU position",
            slug: "rung2_pre_relu",
            distill: r2,
        },
        AblationRung {
            label: "+ teacher BN training",
            slug: "rung3_bn_training",
            distill: r3,
        },
        AblationRung {
            label: "+ margin ReLU / partial L2",
            slug: "rung4_proposed",
            distill: d,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnResult {
    pub label: String,
    /// Final test error per seed.
    pub errors: Vec<f64>,
    pub kls: Vec<f64>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for a single value.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl ColumnResult {
    pub fn mean_error(&self) -> f64 {
        mean(&self.errors)
    }

    pub fn std_error(&self) -> f64 {
        std_dev(&self.errors)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub teacher_test_error_pct: f64,
    /// Undistilled student.
    pub baseline: ColumnResult,
    pub rungs: Vec<ColumnResult>,
}

impl AblationReport {
    /// Mean error change of each rung against the previous rung; `None`
    /// for the first.
    pub fn diffs(&self) -> Vec<Option<f64>> {
        let means: Vec<f64> = self.rungs.iter().map(ColumnResult::mean_error).collect();
        (0..means.len())
            .map(|i| (i > 0).then(|| means[i] - means[i - 1]))
            .collect()
    }

    /// Whether rung 4 ends no worse than rung 1 on mean error.
    pub fn full_method_not_worse(&self) -> bool {
        self.rungs[3].mean_error() <= self.rungs[0].mean_error()
    }

    /// Whether every rung improves on the one before.
    pub fn monotone(&self) -> bool {
        self.diffs().iter().flatten().all(|d| *d <= 0.0)
    }
}

impl fmt::Display for AblationReport {
    /// A Markdown table with an error row (mean ± std over seeds) and a
    /// diff row.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut head = "| | No distillation (ref.) |".to_string();
        let mut rule = "|---|---|".to_string();
        let mut err = format!(
            "| Error | {:.2} ± {:.2} |",
            self.baseline.mean_error(),
            self.baseline.std_error()
        );
        let mut diff = "| Diff | |".to_string();
        for (r, d) in self.rungs.iter().zip(self.diffs()) {
            head += &format!(" {} |", r.label);
            rule += "---|";
            err += &format!(" {:.2} ± {:.2} |", r.mean_error(), r.std_error());
            diff += &match d {
                Some(d) => format!(" {d:+.2} |"),
                None => " - |".into(),
            };
        }
        writeln!(f, "{head}\n{rule}\n{err}\n{diff}")?;
        writeln!(
            f,
            "\nteacher error {:.2}%, seeds {:?}",
            self.teacher_test_error_pct, self.seeds
        )
    }
}

struct Job {
    column: usize,
    seed: u64,
}

/// Runs the baseline column and the four rungs for every seed with one
/// shared teacher. Jobs are spread over `threads` workers; each job is an
/// independent run in its own directory, so results do not depend on the
/// thread count.
pub fn ablate(cfg: ExperimentConfig, threads: usize) -> Result<AblationReport> {
    let ws = Workspace::open(cfg)?;
    let seeds: Vec<u64> = (0..ws.cfg.ablation.seeds)
        .map(|k| ws.cfg.student.train.seed + k)
        .collect();
    let root = ws.dir.join("ablation");
    ws.write_manifest(&root, "ablate", seeds.clone(), threads)?;
    let teacher = ws.teacher()?;
    let rungs = ablation_matrix(&ws.cfg.distill);
    let mut baseline_cfg = ws.cfg.distill.clone();
    baseline_cfg.method = DistillMethod::None;
    baseline_cfg.add_kd = false;
    let mut columns: Vec<(String, &str, DistillConfig)> =
        vec![("No distillation".into(), "baseline", baseline_cfg)];
    columns.extend(rungs.iter().map(|r| (r.label.to_string(), r.slug, r.distill.clone())));
    let margins = ws.margins(&teacher, &rungs[3].distill, &root)?;

    let jobs: Vec<Job> = seeds
        .iter()
        .flat_map(|&seed| (0..columns.len()).map(move |column| Job { column, seed }))
        .collect();
    let results: Mutex<Vec<Option<Result<RunSummary>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(i) else { break };
        let (label, slug, dcfg) = &columns[job.column];
        log::info!("ablation: {label}, seed {}", job.seed);
        let dir = root.join(slug).join(format!("seed{}", job.seed));
        let r = student_run(&ws, &teacher, dcfg, job.seed, margins.as_ref(), &dir);
        results.lock().expect("no panics while holding the lock")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..threads.max(1) {
            s.spawn(worker);
        }
        worker();
    });

    let mut cols: Vec<ColumnResult> = columns
        .iter()
        .map(|(label, _, _)| ColumnResult {
            label: label.clone(),
            errors: Vec::new(),
            kls: Vec::new(),
        })
        .collect();
    let mut teacher_err = f64::NAN;
    for (job, r) in jobs.iter().zip(results.into_inner().expect("workers joined")) {
        let r = r.ok_or_else(|| Error::Parameter("ablation job did not run".into()))??;
        cols[job.column].errors.push(r.student_test_error_pct);
        cols[job.column].kls.push(r.kl_with_teacher);
        teacher_err = r.teacher_test_error_pct;
    }
    let baseline = cols.remove(0);
    let report = AblationReport {
        seeds,
        teacher_test_error_pct: teacher_err,
        baseline,
        rungs: cols,
    };
    std::fs::write(root.join("ablation.md"), report.to_string())?;
    std::fs::write(
        root.join("ablation.json"),
        serde_json::to_string_pretty(&report).map_err(std::io::Error::other)? + "\n",
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rungs_are_cumulative() {
        let mut base = DistillConfig::new(DistillMethod::Proposed);
        base.alpha = 0.5;
        let r = ablation_matrix(&base);
        assert_eq!(r[0].distill.method, DistillMethod::FitnetsL2);
        assert_eq!(r[0].distill.tap_position, TapPosition::BlockEnd);
        assert_eq!(r[0].distill.teacher_bn_mode, BnMode::Evaluation);
        assert_eq!(r[1].distill.tap_position, TapPosition::PreRelu);
        assert_eq!(r[1].distill.teacher_bn_mode, BnMode::Evaluation);
        assert_eq!(r[2].distill.teacher_bn_mode, BnMode::Training);
        assert_eq!(r[2].distill.method, DistillMethod::FitnetsL2);
        assert_eq!(r[3].distill.method, DistillMethod::Proposed);
        assert_eq!(r[3].distill.tap_position, TapPosition::PreRelu);
        assert!(r.iter().all(|x| x.distill.alpha == 0.5));
    }

    #[test]
    fn table_layout() {
        let col = |label: &str, e: [f64; 3]| ColumnResult {
            label: label.into(),
            errors: e.to_vec(),
            kls: vec![0.0; 3],
        };
        let report = AblationReport {
            seeds: vec![0, 1, 2],
            teacher_test_error_pct: 2.0,
            baseline: col("No distillation", [5.0, 5.0, 5.0]),
            rungs: vec![
                col("a", [4.0, 4.0, 4.0]),
                col("b", [3.0, 3.5, 4.0]),
                col("c", [3.5, 3.5, 3.5]),
                col("d", [3.0, 3.0, 3.0]),
            ],
        };
        let text = report.to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].matches('|').count(), 7);
        assert!(lines[2].starts_with("| Error | 5.00 ± 0.00 | 4.00 ± 0.00 | 3.50 ± 0.50 |"));
        assert_eq!(lines[3], "| Diff | | - | -0.50 | +0.00 | -0.50 |");
        assert!(report.full_method_not_worse());
        assert!(report.monotone());
    }
}

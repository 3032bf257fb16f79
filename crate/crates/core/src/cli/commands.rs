use super::config::ExperimentConfig;
use crate::data::{Dataset, Normalizer};
use crate::distill::{DistillConfig, DistillMethod, MarginSpec};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Model, ModelSpec};
use crate::train::{
    compute_margins, evaluate, similarity_analysis, train_student, train_teacher, MetricsWriter,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// What was run, with the fully resolved config, so a run can be repeated
/// exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub package: String,
    pub version: String,
    pub checkpoint_format: u32,
    pub config: ExperimentConfig,
    pub teacher_seed: u64,
    pub student_seeds: Vec<u64>,
    pub dataset: DatasetFingerprint,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub train_images: usize,
    pub test_images: usize,
    /// FNV-1a over pixels and labels of both splits.
    pub fnv1a64: String,
}

impl DatasetFingerprint {
    pub fn of(train: &Dataset, test: &Dataset) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for ds in [train, test] {
            ds.images().iter().for_each(|&b| feed(b));
            ds.labels().iter().for_each(|&l| (l as u32).to_le_bytes().into_iter().for_each(&mut feed));
        }
        DatasetFingerprint {
            train_images: train.len(),
            test_images: test.len(),
            fnv1a64: format!("{h:016x}"),
        }
    }
}

/// Final numbers of a `run`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: DistillMethod,
    pub teacher_test_error_pct: f64,
    pub student_test_error_pct: f64,
    pub kl_with_teacher: f64,
    pub ce_with_gt: f64,
    pub student_epochs: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Loaded data and the experiment's output directory.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub dir: PathBuf,
}

impl Workspace {
    /// Validates `cfg`, loads both splits and creates the run directory.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = cfg.dataset.load()?;
        let shape = train.image_shape();
        if shape != cfg.teacher.model.input_shape {
            return Err(Error::Config(format!(
                "teacher.model.input_shape: {:?} but the dataset has {shape:?}",
                cfg.teacher.model.input_shape
            )));
        }
        if train.num_classes() > cfg.teacher.model.num_classes {
            return Err(Error::Config(format!(
                "teacher.model.num_classes: {} but the dataset has {}",
                cfg.teacher.model.num_classes,
                train.num_classes()
            )));
        }
        let dir = cfg.run_dir();
        fs::create_dir_all(&dir)?;
        Ok(Workspace {
            cfg,
            train,
            test,
            dir,
        })
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write_manifest(&self, dir: &Path, command: &str, student_seeds: Vec<u64>, threads: usize) -> Result<()> {
        let manifest = Manifest {
            command: command.into(),
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            checkpoint_format: checkpoint::VERSION,
            config: self.cfg.clone(),
            teacher_seed: self.cfg.teacher.train.seed,
            student_seeds,
            dataset: DatasetFingerprint::of(&self.train, &self.test),
            threads,
        };
        fs::create_dir_all(dir)?;
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.cfg
            .teacher
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.dir.join("teacher.dfrg"))
    }

    /// Loads the configured checkpoint, or trains the teacher and saves it
    /// with its metrics under the run directory.
    pub fn teacher(&self) -> Result<Model> {
        let t = &self.cfg.teacher;
        if let Some(path) = &t.checkpoint {
            log::info!("loading teacher from {}", path.display());
            return load_model(&t.model, path);
        }
        log::info!("training teacher ({} parameters)", t.model.parameter_count());
        let mut sink = MetricsWriter::create(&self.dir, "teacher")?;
        let out = train_teacher(&t.model, &self.train, &self.test, &t.train, Some(&mut sink))?;
        checkpoint::save(&out.model, &self.dir.join("teacher.dfrg"))?;
        Ok(out.model)
    }

    /// Margins when `dcfg` needs them, saved as `margins.txt` in `dir`.
    pub fn margins(&self, teacher: &Model, dcfg: &DistillConfig, dir: &Path) -> Result<Option<MarginSpec>> {
        if dcfg.method != DistillMethod::Proposed {
            return Ok(None);
        }
        let norm = Normalizer::fit(&self.train)?;
        let m = compute_margins(teacher, &self.train, &norm, dcfg, self.cfg.student.train.batch_size)?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join("margins.txt"), m.to_table())?;
        Ok(Some(m))
    }
}

pub fn load_model(spec: &ModelSpec, path: &Path) -> Result<Model> {
    let mut model = Model::build(spec, 0)?;
    checkpoint::load_into(&mut model, path)?;
    Ok(model)
}

/// Trains one student in `dir` and returns its final numbers.
pub fn student_run(
    ws: &Workspace,
    teacher: &Model,
    dcfg: &DistillConfig,
    seed: u64,
    margins: Option<&MarginSpec>,
    dir: &Path,
) -> Result<RunSummary> {
    let mut cfg = ws.cfg.student.train.clone();
    cfg.seed = seed;
    let mut sink = MetricsWriter::create(dir, "student")?;
    let out = train_student(
        &ws.cfg.student.model,
        teacher,
        &ws.train,
        &ws.test,
        &cfg,
        dcfg,
        margins,
        Some(&mut sink),
    )?;
    checkpoint::save(&out.model, &dir.join("student.dfrg"))?;
    let norm = Normalizer::fit(&ws.train)?;
    let last = out.metrics.last().expect("at least one epoch");
    Ok(RunSummary {
        method: dcfg.method,
        teacher_test_error_pct: evaluate(teacher, &ws.test, &norm)?,
        student_test_error_pct: last.test_error_pct,
        kl_with_teacher: last.kl_with_teacher.expect("student runs report KL"),
        ce_with_gt: last.ce_with_gt,
        student_epochs: cfg.epochs,
    })
}

/// Teacher (trained or loaded), margins if needed, then one student.
pub fn run(cfg: ExperimentConfig, threads: usize) -> Result<RunSummary> {
    let ws = Workspace::open(cfg)?;
    ws.write_manifest(&ws.dir, "run", vec![ws.cfg.student.train.seed], threads)?;
    let teacher = ws.teacher()?;
    let margins = ws.margins(&teacher, &ws.cfg.distill, &ws.dir)?;
    let summary = student_run(
        &ws,
        &teacher,
        &ws.cfg.distill,
        ws.cfg.student.train.seed,
        margins.as_ref(),
        &ws.dir,
    )?;
    write_json(&ws.dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Trains the teacher alone and returns its test error.
pub fn run_train_teacher(mut cfg: ExperimentConfig, threads: usize) -> Result<f64> {
    cfg.teacher.checkpoint = None;
    let ws = Workspace::open(cfg)?;
    ws.write_manifest(&ws.dir, "train-teacher", Vec::new(), threads)?;
    let teacher = ws.teacher()?;
    evaluate(&teacher, &ws.test, &Normalizer::fit(&ws.train)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub teacher_test_error_pct: f64,
    pub student_test_error_pct: Option<f64>,
    pub kl_with_teacher: Option<f64>,
    pub ce_with_gt: Option<f64>,
}

/// Evaluates the run's saved teacher, and the student at `student` (or the
/// run directory's `student.dfrg`) when present.
pub fn run_eval(cfg: ExperimentConfig, student: Option<PathBuf>) -> Result<EvalReport> {
    let ws = Workspace::open(cfg)?;
    let norm = Normalizer::fit(&ws.train)?;
    let path = ws.teacher_checkpoint();
    if !path.is_file() {
        return Err(Error::Config(format!(
            "teacher.checkpoint: {} not found; run train-teacher first",
            path.display()
        )));
    }
    let teacher = load_model(&ws.cfg.teacher.model, &path)?;
    let mut report = EvalReport {
        teacher_test_error_pct: evaluate(&teacher, &ws.test, &norm)?,
        student_test_error_pct: None,
        kl_with_teacher: None,
        ce_with_gt: None,
    };
    let student_path = student.unwrap_or_else(|| ws.dir.join("student.dfrg"));
    if student_path.is_file() {
        let model = load_model(&ws.cfg.student.model, &student_path)?;
        let sim = similarity_analysis(&teacher, &model, &ws.test, &norm)?;
        report.student_test_error_pct = Some(evaluate(&model, &ws.test, &norm)?);
        report.kl_with_teacher = Some(sim.kl);
        report.ce_with_gt = Some(sim.ce);
    }
    write_json(&ws.dir.join("eval.json"), &report)?;
    Ok(report)
}

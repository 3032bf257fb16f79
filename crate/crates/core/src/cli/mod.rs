//! Experiment runner: TOML configs, teacher/student/ablation runs and the
//! verification subcommands.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (including a failed
//! verification), 2 on a configuration error.

mod ablation;
mod commands;
mod config;
mod verify;

pub use ablation::{ablate, ablation_matrix, mean, std_dev, AblationReport, AblationRung, ColumnResult};
pub use commands::{
    load_model, run, run_eval, run_train_teacher, student_run, DatasetFingerprint, EvalReport,
    Manifest, RunSummary, Workspace,
};
pub use config::{AblationConfig, DatasetConfig, ExperimentConfig, StudentConfig, TeacherConfig};
pub use verify::{
    gradient_ops, verify_gradients, verify_margins, GradientReport, MarginCheck, MarginReport,
    OpGradResult, GRAD_PERTURBATION, GRAD_POINTS, GRAD_TOLERANCE, MARGIN_BAND, MARGIN_MEANS,
    MARGIN_STDS,
};

use crate::error::{Error, Result};
use crate::tensor::inject_backward_fault;
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "margin-distill", version, about = "Feature distillation experiments on a small CPU autodiff engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for independent runs (ablation jobs). Each run is
    /// single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the teacher and student training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or load) the teacher, then train one student.
    Run(ConfigArgs),
    /// Four cumulative distillation rungs plus an undistilled baseline.
    Ablate(ConfigArgs),
    /// Finite-difference check of every differentiable operation.
    VerifyGradients {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupts the backward rule of the named op (for testing the check).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Closed-form margins against Monte Carlo conditional means.
    VerifyMargins {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
    /// Train the teacher only.
    TrainTeacher(ConfigArgs),
    /// Evaluate the saved teacher and student of a run.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        /// Student checkpoint; defaults to the run directory's.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        Ok(cfg)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn verdict(passed: bool) -> i32 {
    if passed {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

/// Runs one parsed command and returns its exit code.
pub fn execute(cli: Cli) -> Result<i32> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Run(a) => {
            let s = run(a.load()?, threads)?;
            println!(
                "teacher error {:.2}%  student error {:.2}%  KL {:.4}  CE {:.4}",
                s.teacher_test_error_pct, s.student_test_error_pct, s.kl_with_teacher, s.ce_with_gt
            );
            Ok(EXIT_OK)
        }
        Command::Ablate(a) => {
            let report = ablate(a.load()?, threads)?;
            print!("{report}");
            if !report.monotone() {
                println!("note: the ladder is not monotone at this scale");
            }
            Ok(EXIT_OK)
        }
        Command::VerifyGradients { seed, inject_fault } => {
            // the fault name must outlive the thread-local that holds it
            let fault = inject_fault.map(|s| &*Box::leak(s.into_boxed_str()));
            inject_backward_fault(fault);
            let report = verify_gradients(seed);
            inject_backward_fault(None);
            let report = report?;
            print!("{report}");
            if !report.passed() {
                println!("failed: {}", report.failures().join(", "));
            }
            Ok(verdict(report.passed()))
        }
        Command::VerifyMargins { seed, samples } => {
            let report = verify_margins(seed, samples)?;
            print!("{report}");
            Ok(verdict(report.passed()))
        }
        Command::TrainTeacher(a) => {
            let err = run_train_teacher(a.load()?, threads)?;
            println!("teacher error {err:.2}%");
            Ok(EXIT_OK)
        }
        Command::Eval { args, checkpoint } => {
            let r = run_eval(args.load()?, checkpoint)?;
            println!("teacher error {:.2}%", r.teacher_test_error_pct);
            if let (Some(e), Some(kl), Some(ce)) = (r.student_test_error_pct, r.kl_with_teacher, r.ce_with_gt) {
                println!("student error {e:.2}%  KL {kl:.4}  CE {ce:.4}");
            }
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (program name first), runs the command and maps the
/// outcome to an exit code, printing diagnostics to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

use crate::data::{
    load_cifar_binary, load_mnist_dir, synth_blobs, CifarVariant, Dataset, Split,
};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where the images come from. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// A directory with the four standard MNIST IDX files.
    Mnist {
        dir: PathBuf,
        /// Keep only the first `n` training images.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar {
        variant: CifarVariant,
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
    },
    SynthBlobs {
        classes: usize,
        per_class: usize,
        image_size: usize,
        /// Images per class held out for testing.
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub model: ModelSpec,
    /// Load this checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Student seeds per rung: `student.train.seed + 0 .. seeds`.
    #[serde(default = "three")]
    pub seeds: u64,
}

fn three() -> u64 {
    3
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: three() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run name; outputs go to `out_dir/name`.
    pub name: String,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    /// Parses `path` and makes every relative path absolute with respect to
    /// its directory. Does not validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.out_dir);
        if let Some(p) = self.teacher.checkpoint.as_mut() {
            resolve(base, p);
        }
        match &mut self.dataset {
            DatasetConfig::Mnist { dir, .. } => resolve(base, dir),
            DatasetConfig::Cifar {
                train_files,
                test_file,
                ..
            } => {
                train_files.iter_mut().for_each(|p| resolve(base, p));
                resolve(base, test_file);
            }
            DatasetConfig::SynthBlobs { .. } => {}
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets every training seed; the teacher's too unless it is loaded.
    pub fn override_seed(&mut self, seed: u64) {
        self.teacher.train.seed = seed;
        self.student.train.seed = seed;
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(msg) => Error::Config(format!("{name}.{msg}")),
            other => other,
        };
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.name.starts_with('.')
        {
            return Err(Error::Config(format!(
                "name: '{}' must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.name
            )));
        }
        self.teacher.model.validate().map_err(|e| field("teacher.model", e))?;
        self.student.model.validate().map_err(|e| field("student.model", e))?;
        self.teacher.train.validate().map_err(|e| field("teacher.train", e))?;
        self.student.train.validate().map_err(|e| field("student.train", e))?;
        self.distill.validate().map_err(|e| field("distill", e))?;
        if let Some(p) = &self.teacher.checkpoint {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "teacher.checkpoint: {} does not exist",
                    p.display()
                )));
            }
        }
        if self.ablation.seeds == 0 {
            return Err(Error::Config("ablation.seeds: must be at least 1".into()));
        }
        let (t, s) = (&self.teacher.model, &self.student.model);
        if t.input_shape != s.input_shape || t.num_classes != s.num_classes {
            return Err(Error::Config(
                "student.model: input_shape and num_classes must match the teacher".into(),
            ));
        }
        match &self.dataset {
            DatasetConfig::Mnist { dir, .. } => {
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "dataset.dir: {} is not a directory",
                        dir.display()
                    )));
                }
            }
            DatasetConfig::Cifar {
                train_files,
                test_file,
                ..
            } => {
                if train_files.is_empty() {
                    return Err(Error::Config("dataset.train_files: list is empty".into()));
                }
                if let Some(p) = train_files.iter().chain([test_file]).find(|p| !p.is_file()) {
                    return Err(Error::Config(format!(
                        "dataset: {} does not exist",
                        p.display()
                    )));
                }
            }
            DatasetConfig::SynthBlobs {
                classes,
                per_class,
                image_size,
                test_per_class,
                ..
            } => {
                if *classes < 2 || *per_class == 0 || *test_per_class == 0 || *image_size == 0 {
                    return Err(Error::Config(
                        "dataset: synth_blobs needs classes ≥ 2 and positive sizes".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl DatasetConfig {
    /// `(train, test)` splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let (mut train, mut test) = load_mnist_dir(dir)?;
                if let Some(n) = train_limit {
                    train = train.take((*n).min(train.len()))?;
                }
                if let Some(n) = test_limit {
                    test = test.take((*n).min(test.len()))?;
                }
                Ok((train, test))
            }
            DatasetConfig::Cifar {
                variant,
                train_files,
                test_file,
            } => Ok((
                load_cifar_binary(train_files, *variant, Split::Train)?,
                load_cifar_binary(&[test_file], *variant, Split::Test)?,
            )),
            DatasetConfig::SynthBlobs {
                classes,
                per_class,
                image_size,
                test_per_class,
                seed,
            } => {
                let all = synth_blobs(*classes, per_class + test_per_class, *image_size, *seed)?;
                all.train_test_split(classes * test_per_class, *seed)
            }
        }
    }
}

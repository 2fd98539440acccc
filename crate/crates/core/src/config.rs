//! Declarative experiment configuration (TOML). One file drives every phase;
//! unknown keys are rejected and the whole file is validated before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::data::synthetic::SyntheticConfig;
use crate::data::{AugmentConfig, PartitionScheme};
use crate::diffusion::{DiffusionConfig, PurifyConfig};
use crate::error::{Error, Result};
use crate::federation::FedConfig;
use crate::mae::{MaeConfig, ScoreMode, MIN_CALIBRATION_SCORES};
use crate::moe::{ArchConfig, LossConfig, TrainConfig};
use crate::nn::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Procedurally generated shapes, no files needed.
    Synthetic,
    /// CIFAR-10 binary batches.
    Cifar10,
    /// Directory tree with one subdirectory per class.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: DatasetKind,
    pub path: Option<PathBuf>,
    pub image_size: usize,
    /// Source labels to keep, relabelled 0.. in this order (empty = all).
    pub classes: Vec<usize>,
    /// Caps on the number of train and test images (0 = no cap).
    pub n_train: usize,
    pub n_test: usize,
    /// Share of the training pool held out as clean calibration data.
    pub val_fraction: f64,
    /// Test share for folder sources without a `test/` subdirectory.
    pub test_fraction: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: DatasetKind::Synthetic,
            path: None,
            image_size: 32,
            classes: Vec::new(),
            n_train: 2000,
            n_test: 500,
            val_fraction: 0.1,
            test_fraction: 0.2,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            lr: t.sgd.lr,
            momentum: t.sgd.momentum,
            weight_decay: t.sgd.weight_decay,
            augment: t.augment,
            augmentation: t.augmentation,
        }
    }
}

impl OptimConfig {
    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            augment: self.augment,
            augmentation: self.augmentation,
        }
    }
}

/// How detection scores are computed and thresholded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Fraction of clean calibration scores allowed above the threshold.
    pub kappa: f64,
    pub score_mode: ScoreMode,
    /// Mask draws averaged per score in masked mode.
    pub score_draws: usize,
    /// Re-score purified inputs and record the value in the trace.
    pub recheck: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kappa: 0.05,
            score_mode: ScoreMode::Masked,
            score_draws: 4,
            recheck: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Test samples used for the final evaluation (0 = all).
    pub max_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            max_samples: 0,
        }
    }
}

fn default_partition() -> PartitionScheme {
    PartitionScheme::Dirichlet { alpha: 0.5 }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_partition")]
    pub partition: PartitionScheme,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub mae: MaeConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub purify: PurifyConfig,
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.dataset;
        if d.name != DatasetKind::Synthetic && d.path.is_none() {
            return bad(format!("dataset: {:?} needs a path", d.name));
        }
        if !(0.0..1.0).contains(&d.val_fraction) || !(0.0..1.0).contains(&d.test_fraction) {
            return bad("dataset: val_fraction and test_fraction must be in [0, 1)".into());
        }
        if d.name == DatasetKind::Synthetic && d.synthetic.image_size != d.image_size {
            return bad(format!(
                "dataset: synthetic.image_size {} differs from image_size {}",
                d.synthetic.image_size, d.image_size
            ));
        }
        let classes = match (d.name, d.classes.len()) {
            (DatasetKind::Synthetic, _) => d.synthetic.classes,
            (_, 0) => self.model.num_classes,
            (_, n) => n,
        };
        if classes != self.model.num_classes {
            return bad(format!(
                "model.num_classes {} but the dataset provides {classes} classes",
                self.model.num_classes
            ));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.train_config(self.fed.local_epochs).validate()?;
        self.attack.validate().map_err(|e| Error::Config(format!("attack: {e}")))?;
        self.mae.validate()?;
        self.diffusion.validate()?;
        self.purify.validate(self.diffusion.steps)?;
        self.fed.validate()?;
        if !d.image_size.is_multiple_of(self.mae.patch_size) {
            return bad(format!(
                "mae.patch_size {} must divide image_size {}",
                self.mae.patch_size, d.image_size
            ));
        }
        if !d.image_size.is_multiple_of(1 << self.diffusion.levels) {
            return bad(format!(
                "image_size {} must be divisible by 2^diffusion.levels",
                d.image_size
            ));
        }
        if !(0.0..1.0).contains(&self.detector.kappa) {
            return bad(format!("detector: kappa {} must be in [0, 1)", self.detector.kappa));
        }
        if self.detector.score_draws == 0 || self.eval.batch_size == 0 {
            return bad("detector.score_draws and eval.batch_size must be positive".into());
        }
        if d.n_train > 0 {
            let val = (d.n_train as f64 * d.val_fraction).round() as usize;
            if val < MIN_CALIBRATION_SCORES {
                return bad(format!(
                    "dataset: {val} calibration images; need at least {MIN_CALIBRATION_SCORES}"
                ));
            }
            if d.n_train - val < self.fed.n_clients {
                return bad("dataset: fewer training images than clients".into());
            }
        }
        Ok(())
    }
}

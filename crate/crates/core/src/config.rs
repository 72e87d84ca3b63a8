//! Experiment configuration. One JSON document describes a whole run; the
//! master seed determines every stochastic choice downstream.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Family;
use crate::detection::ScanConfig;
use crate::error::{Error, Result};
use crate::reconstruction::IrMatchConfig;
use crate::training::{PgdBudget, SpabTrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Family of the server's public data.
    pub family: Family,
    /// Family of the client's private data. Differs from `family` for
    /// out-of-distribution runs.
    pub client_family: Family,
    pub image_size: usize,
    pub classes: usize,
    pub public_count: usize,
    pub eval_count: usize,
    pub private_count: usize,
    /// Optional CIFAR-10 binary batch replacing the synthetic generator.
    #[serde(default)]
    pub cifar_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub ir_dim: usize,
    pub spab_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub natural: TrainConfig,
    pub adversarial: TrainConfig,
    pub budget: PgdBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpabStageConfig {
    pub train: SpabTrainConfig,
    /// Train on shifted labels so the head misclassifies private data.
    pub mislabel: bool,
}

/// Local DP parameters. The noise seed is derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSettings {
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub batch_size: usize,
    #[serde(default)]
    pub dp: Option<DpSettings>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreimageConfig {
    pub budget: PgdBudget,
    pub pairs: usize,
    pub tv_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub ssim_threshold: f64,
    pub baseline_draws: usize,
    pub sweep_batch_sizes: Vec<usize>,
    pub sweep_seeds: usize,
    pub sweep_batches_per_seed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub spab: SpabStageConfig,
    pub round: RoundConfig,
    /// The `seed` field is replaced per candidate by a master-derived seed.
    pub ir_match: IrMatchConfig,
    pub preimage: PreimageConfig,
    pub detection: ScanConfig,
    pub evaluate: EvaluateConfig,
}

impl ExperimentConfig {
    /// Full desk-scale run: 16x16 images, four classes.
    pub fn desk() -> Self {
        Self {
            master_seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            dataset: DatasetConfig {
                family: Family::Geometric,
                client_family: Family::Geometric,
                image_size: 16,
                classes: 4,
                public_count: 1000,
                eval_count: 200,
                private_count: 256,
                cifar_path: None,
            },
            model: ModelConfig {
                ir_dim: 128,
                spab_width: 128,
            },
            pretrain: PretrainConfig {
                natural: TrainConfig {
                    epochs: 30,
                    lr: 0.05,
                    batch_size: 32,
                    eval_samples: 200,
                    momentum: 0.0,
                    warmup_epochs: 0,
                },
                adversarial: TrainConfig {
                    epochs: 20,
                    lr: 0.01,
                    batch_size: 32,
                    eval_samples: 200,
                    momentum: 0.9,
                    warmup_epochs: 5,
                },
                budget: PgdBudget {
                    epsilon: 8.0 / 255.0,
                    step_size: 2.0 / 255.0,
                    steps: 5,
                },
            },
            spab: SpabStageConfig {
                train: SpabTrainConfig {
                    epochs: 100,
                    lr: 0.01,
                    beta1: 1.0,
                    beta2: 1.0,
                    sigma: 1e-3,
                    batch_size: 64,
                    batches_per_epoch: 16,
                },
                mislabel: false,
            },
            round: RoundConfig {
                batch_size: 8,
                dp: None,
            },
            ir_match: IrMatchConfig {
                iterations: 1000,
                ..IrMatchConfig::default()
            },
            preimage: PreimageConfig {
                budget: PgdBudget {
                    epsilon: 32.0 / 255.0,
                    step_size: 8.0 / 255.0,
                    steps: 300,
                },
                pairs: 20,
                tv_weight: 0.0,
            },
            detection: ScanConfig::default(),
            evaluate: EvaluateConfig {
                ssim_threshold: crate::metrics::DEFAULT_SSIM_THRESHOLD,
                baseline_draws: 10,
                sweep_batch_sizes: vec![8, 16, 32, 64],
                sweep_seeds: 5,
                sweep_batches_per_seed: 4,
            },
        }
    }

    /// A few seconds end to end; for smoke tests and determinism checks.
    pub fn quick() -> Self {
        let mut c = Self::desk();
        c.output_dir = PathBuf::from("runs/quick");
        c.dataset.public_count = 128;
        c.dataset.eval_count = 32;
        c.dataset.private_count = 64;
        c.model.ir_dim = 32;
        c.model.spab_width = 32;
        c.pretrain.natural.epochs = 2;
        c.pretrain.natural.eval_samples = 32;
        c.pretrain.adversarial.epochs = 1;
        c.pretrain.adversarial.eval_samples = 32;
        c.pretrain.adversarial.warmup_epochs = 0;
        c.pretrain.budget.steps = 2;
        c.spab.train.epochs = 5;
        c.spab.train.batch_size = 32;
        c.spab.train.batches_per_epoch = 2;
        c.ir_match.iterations = 20;
        c.ir_match.perturb_every = 10;
        c.preimage.pairs = 2;
        c.preimage.budget.steps = 10;
        c.evaluate.baseline_draws = 3;
        c.evaluate.sweep_batch_sizes = vec![8, 16];
        c.evaluate.sweep_seeds = 2;
        c.evaluate.sweep_batches_per_seed = 1;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "quick" => Ok(Self::quick()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or quick)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.classes < 2 || d.public_count == 0 || d.eval_count == 0 || d.private_count == 0 {
            return Err(Error::Config("dataset needs at least two classes and nonempty splits".into()));
        }
        if d.cifar_path.is_none() && !matches!(d.image_size, 16 | 32) {
            return Err(Error::Config(format!("synthetic images must be 16 or 32 pixels, got {}", d.image_size)));
        }
        if self.model.ir_dim == 0 || self.model.spab_width == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.pretrain.budget.validate()?;
        self.spab.train.validate()?;
        self.ir_match.validate()?;
        self.preimage.budget.validate()?;
        if self.round.batch_size == 0 || self.round.batch_size > d.private_count {
            return Err(Error::Config(format!(
                "round batch size {} must be in 1..={}",
                self.round.batch_size, d.private_count
            )));
        }
        if let Some(dp) = &self.round.dp {
            crate::federation::DpConfig {
                epsilon: dp.epsilon,
                delta: dp.delta,
                clip: dp.clip,
                seed: 0,
            }
            .validate()?;
        }
        if let Some(&b) = self.evaluate.sweep_batch_sizes.iter().find(|&&b| b == 0 || b > d.private_count) {
            return Err(Error::Config(format!("sweep batch size {b} outside 1..={}", d.private_count)));
        }
        if 2 * self.preimage.pairs > d.eval_count {
            return Err(Error::Config(format!(
                "{} preimage pairs need {} evaluation images",
                self.preimage.pairs,
                2 * self.preimage.pairs
            )));
        }
        if !(self.detection.bin_width > 0.0) {
            return Err(Error::Config("detection bin width must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    /// Hex SHA-256 of the canonical JSON, ignoring the output directory.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

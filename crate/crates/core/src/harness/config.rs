//! Experiment configuration files.
//!
//! Configs are TOML: a few top-level keys plus `[model]`, `[data]`,
//! `[train]`, `[recovery]`, `[sweep]` and `[probe]` sections. Every key has
//! a default and unknown keys are rejected. A minimal file:
//!
//! ```toml
//! experiment = "shuffle"
//! seed = 7
//!
//! [model]
//! family = "cnn"
//! variant = "ln_sc"
//!
//! [data]
//! source = "mnist"
//! mnist_dir = "data/mnist"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SeqTaskConfig;
use crate::error::{Error, Result};
use crate::linearity::ProbeSpec;
use crate::models::{EncoderConfig, Family};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Train,
    Probe,
    SweepValidation,
    AblateBackwards,
    Swap,
    Shuffle,
    Repeat,
    Variants,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Probe => "probe",
            ExperimentKind::SweepValidation => "sweep_validation",
            ExperimentKind::AblateBackwards => "ablate_backwards",
            ExperimentKind::Swap => "swap",
            ExperimentKind::Shuffle => "shuffle",
            ExperimentKind::Repeat => "repeat",
            ExperimentKind::Variants => "variants",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Mnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the four MNIST IDX files under their usual names.
    pub mnist_dir: PathBuf,
    /// Optional caps on the MNIST train and test files (smoke runs).
    pub mnist_train_limit: Option<usize>,
    pub mnist_test_limit: Option<usize>,
    /// Share of the MNIST training file held out from model training; it
    /// fits approximators and drives recovery fine-tuning.
    pub heldout_fraction: f64,
    pub synthetic: SeqTaskConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            mnist_dir: PathBuf::from("data/mnist"),
            mnist_train_limit: None,
            mnist_test_limit: None,
            heldout_fraction: 1.0 / 6.0,
            synthetic: SeqTaskConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConfig {
    pub enabled: bool,
    pub epochs: usize,
    /// Fine-tuning learning rate as a fraction of `train.adam.learning_rate`.
    pub lr_factor: f32,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            enabled: true,
            epochs: 3,
            lr_factor: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapPairs {
    /// `(i, i+1)` for every movable layer.
    #[default]
    Adjacent,
    /// Every unordered pair of movable layers.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Standard,
    NoFfn,
    NoFfnSaPlus,
    NoFfnGeluSa,
    NoFfnGeluSaPlus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// L2 strengths of the validation sweep.
    pub l2_grid: Vec<f32>,
    /// Epochs for the hidden-layer approximator of the validation sweep.
    pub approximator_epochs: usize,
    /// Fixed-layer counts for shuffles; empty means `0..=movable layers`.
    pub k_grid: Vec<usize>,
    pub population: usize,
    pub swap_pairs: SwapPairs,
    pub repeat_tied: bool,
    pub variants: Vec<VariantName>,
    pub variant_seeds: usize,
}

/// Default L2 strengths of the validation sweep.
pub const VALIDATION_L2_GRID: [f32; 10] = [0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1, 1.0];

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            l2_grid: VALIDATION_L2_GRID.to_vec(),
            approximator_epochs: 10,
            k_grid: Vec::new(),
            population: 100,
            swap_pairs: SwapPairs::Adjacent,
            repeat_tied: true,
            variants: vec![
                VariantName::Standard,
                VariantName::NoFfn,
                VariantName::NoFfnSaPlus,
                VariantName::NoFfnGeluSa,
                VariantName::NoFfnGeluSaPlus,
            ],
            variant_seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Trained model to start from; when absent the baseline is trained.
    pub checkpoint: Option<PathBuf>,
    /// Worker threads for population replicates.
    pub jobs: usize,
    pub model: Family,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub recovery: RecoveryConfig,
    pub sweep: SweepConfig,
    pub probe: ProbeSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Train,
            seed: 0,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            jobs: 1,
            model: Family::Encoder(EncoderConfig::toy()),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            recovery: RecoveryConfig::default(),
            sweep: SweepConfig::default(),
            probe: ProbeSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.probe.fit.validate()?;
        if !(self.data.heldout_fraction > 0.0 && self.data.heldout_fraction < 1.0) {
            return Err(Error::Config("data.heldout_fraction must lie in (0, 1)".into()));
        }
        if self.sweep.population == 0 {
            return Err(Error::Config("sweep.population must be positive".into()));
        }
        if self.probe.n_pairs == 0 {
            return Err(Error::Config("probe.n_pairs must be positive".into()));
        }
        if self.sweep.l2_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("sweep.l2_grid entries must be finite and non-negative".into()));
        }
        match &self.model {
            Family::Encoder(c) => c.validate()?,
            Family::Cnn(c) => c.validate()?,
            Family::Mlp(_) => {}
        }
        if let (Family::Encoder(e), DataSource::Synthetic) = (&self.model, self.data.source) {
            let s = &self.data.synthetic;
            s.validate()?;
            if e.vocab_size < s.vocab_size || e.max_seq_len < s.seq_len || e.n_classes != 3 {
                return Err(Error::Config(
                    "encoder vocab/sequence length/classes do not cover the synthetic task".into(),
                ));
            }
        }
        Ok(())
    }
}

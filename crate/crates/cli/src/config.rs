//! Experiment configuration: a TOML file where every field has a default.

use std::fs;
use std::path::{Path, PathBuf};

use alens_core::ensemble::{EnsembleConfig, EnsembleMode};
use alens_core::learner::{Architecture, McConfig, TrainConfig};
use alens_core::{AcquisitionKind, LoopConfig, SplitSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Overrides the configured output directory (the `--out` flag wins over it).
pub const OUTPUT_DIR_ENV: &str = "ALENS_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    /// Relative paths are resolved against `data.dir`.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Hex SHA-256 of the uncompressed IDX bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

impl DataFile {
    fn new(path: &str, url: Option<&str>, sha256: Option<&str>) -> Self {
        Self {
            path: path.into(),
            url: url.map(str::to_string),
            sha256: sha256.map(str::to_string),
        }
    }
}

const MNIST_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";
const FASHION_MIRROR: &str = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub train_images: DataFile,
    pub train_labels: DataFile,
    pub test_images: DataFile,
    pub test_labels: DataFile,
    /// Out-of-distribution probe (any 28x28 IDX set). Both or neither.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_images: Option<DataFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_labels: Option<DataFile>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let mnist = |name: &str, sha: &str| {
            DataFile::new(
                &format!("mnist/{name}"),
                Some(&format!("{MNIST_MIRROR}/{name}.gz")),
                Some(sha),
            )
        };
        Self {
            dir: "data".into(),
            train_images: mnist(
                "train-images-idx3-ubyte",
                "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
            ),
            train_labels: mnist(
                "train-labels-idx1-ubyte",
                "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
            ),
            test_images: mnist(
                "t10k-images-idx3-ubyte",
                "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
            ),
            test_labels: mnist(
                "t10k-labels-idx1-ubyte",
                "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
            ),
            ood_images: Some(DataFile::new(
                "fashion/images-idx3-ubyte.gz",
                Some(&format!("{FASHION_MIRROR}/t10k-images-idx3-ubyte.gz")),
                None,
            )),
            ood_labels: Some(DataFile::new(
                "fashion/labels-idx1-ubyte.gz",
                Some(&format!("{FASHION_MIRROR}/t10k-labels-idx1-ubyte.gz")),
                None,
            )),
        }
    }
}

impl DataConfig {
    pub fn resolve(&self, file: &DataFile) -> PathBuf {
        if file.path.is_absolute() {
            file.path.clone()
        } else {
            self.dir.join(&file.path)
        }
    }

    /// Every configured file, required ones first.
    pub fn files(&self) -> Vec<&DataFile> {
        let mut v = vec![
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ];
        v.extend(self.ood_images.iter().chain(&self.ood_labels));
        v
    }

    pub fn ood(&self) -> Option<(&DataFile, &DataFile)> {
        self.ood_images.as_ref().zip(self.ood_labels.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Omit to use every training sample not held out for validation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    pub val_size: usize,
    /// Omit to use the whole test file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            pool_size: None,
            val_size: 200,
            test_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveConfig {
    pub initial_size: usize,
    pub n_query: usize,
    pub target_size: usize,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            initial_size: 20,
            n_query: 10,
            target_size: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
    pub dropout_rates: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            layer_sizes: a.layer_sizes,
            dropout_rates: a.dropout_rates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    pub members: usize,
    pub mode: EnsembleMode,
    pub mc_passes: usize,
    pub shard_size: usize,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        let e = EnsembleConfig::default();
        Self {
            members: e.m_members,
            mode: e.mode,
            mc_passes: e.mc.k_passes,
            shard_size: e.shard_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Balanced draw from the test file.
    pub seen_size: usize,
    /// Balanced draw from the OOD file.
    pub unseen_size: usize,
    pub histogram_bins: usize,
    pub calibration_bins: usize,
    /// Bins with fewer samples are ignored by the accuracy trend.
    pub min_bin_count: usize,
    /// Uncertainty score used for the test-set and probe histograms.
    pub score: AcquisitionKind,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seen_size: 2000,
            unseen_size: 2000,
            histogram_bins: 30,
            calibration_bins: 10,
            min_bin_count: 30,
            score: AcquisitionKind::Bald,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Repetition `r` runs with seed `seed + r`.
    pub seed: u64,
    pub repetitions: usize,
    pub acquisitions: Vec<AcquisitionKind>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub active: ActiveConfig,
    pub model: ModelConfig,
    pub ensemble: EnsembleSettings,
    pub train: TrainSettings,
    pub probes: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            repetitions: 3,
            acquisitions: AcquisitionKind::ALL.to_vec(),
            output_dir: "runs".into(),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            active: ActiveConfig::default(),
            model: ModelConfig::default(),
            ensemble: EnsembleSettings::default(),
            train: TrainSettings::default(),
            probes: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Small-budget settings: 25 MC passes, 300 labels, a 10,000-sample pool.
    pub fn apply_desk_scale(&mut self) {
        self.ensemble.mc_passes = 25;
        self.ensemble.members = 3;
        self.active.target_size = 300;
        self.split.pool_size = Some(10_000);
        self.split.val_size = 200;
        self.split.test_size = None;
        self.repetitions = 3;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.acquisitions.is_empty() {
            return bad("acquisitions must list at least one function".into());
        }
        let mut seen = self.acquisitions.clone();
        seen.sort_by_key(|k| k.as_str());
        seen.dedup();
        if seen.len() != self.acquisitions.len() {
            return bad("acquisitions contains duplicates".into());
        }
        if self.data.ood_images.is_some() != self.data.ood_labels.is_some() {
            return bad("data.ood_images and data.ood_labels must be given together".into());
        }
        if self.probes.histogram_bins == 0 || self.probes.calibration_bins == 0 {
            return bad("probe bin counts must be positive".into());
        }
        self.loop_config(AcquisitionKind::Random, self.seed)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.split.val_size == 0 {
            return bad("split.val_size must be positive".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            layer_sizes: self.model.layer_sizes.clone(),
            dropout_rates: self.model.dropout_rates.clone(),
        }
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            m_members: self.ensemble.members,
            mode: self.ensemble.mode,
            mc: McConfig {
                k_passes: self.ensemble.mc_passes,
            },
            shard_size: self.ensemble.shard_size,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            seed: 0,
        }
    }

    pub fn repetition_seed(&self, repetition: usize) -> u64 {
        self.seed.wrapping_add(repetition as u64)
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            pool_size: self.split.pool_size,
            val_size: self.split.val_size,
            test_size: self.split.test_size,
            seed,
        }
    }

    pub fn loop_config(&self, acquisition: AcquisitionKind, seed: u64) -> LoopConfig {
        LoopConfig {
            initial_size: self.active.initial_size,
            n_query: self.active.n_query,
            target_size: self.active.target_size,
            acquisition,
            arch: self.architecture(),
            ensemble: self.ensemble_config(),
            train: self.train_config(),
            seed,
        }
    }

    /// `--out` beats the environment variable, which beats the file.
    pub fn resolve_output_dir(&mut self, flag: Option<PathBuf>) {
        if let Some(dir) = flag {
            self.output_dir = dir;
        } else if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = dir.into();
        }
    }
}

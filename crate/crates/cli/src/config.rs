//! Run configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reduce_core::dataio::{load_idx, synth_clusters, ClusterParams, Dataset, Split};
use reduce_core::faultsim::ArrayConfig;
use reduce_core::fleet::RateDistribution;
use reduce_core::numnet::{NetworkSpec, TrainConfig};
use reduce_core::seed;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub network: NetworkSpec,
    pub train: Hyperparams,
    pub pretrain_epochs: usize,
    pub array: ArrayConfig,
    pub dataset: DatasetSource,
    pub accuracy_constraint: AccuracyConstraint,
    pub profile: ProfileSection,
    pub fleet: FleetSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(ClusterParams),
    Idx(IdxFiles),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

/// Either an absolute accuracy, or a fraction of the pre-trained network's
/// fault-free accuracy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AccuracyConstraint {
    Absolute(f64),
    Relative {
        #[serde(rename = "relative_to_baseline")]
        fraction: f64,
    },
}

impl AccuracyConstraint {
    pub fn resolve(&self, baseline: f64) -> f64 {
        match *self {
            AccuracyConstraint::Absolute(a) => a,
            AccuracyConstraint::Relative { fraction } => fraction * baseline,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub fault_rates: Vec<f64>,
    pub repeats: usize,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSection {
    pub count: usize,
    pub rates: RateDistribution,
    #[serde(default)]
    pub policies: Vec<String>,
}

/// Purpose tags for seeds derived from the master seed.
pub mod tags {
    pub const DATA: &str = "data";
    pub const PRETRAIN_INIT: &str = "pretrain-init";
    pub const PRETRAIN: &str = "pretrain";
    pub const PROFILE: &str = "profile";
    pub const RETRAIN: &str = "retrain";
    pub const FLEET: &str = "fleet";
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: reduce_core::Error| CliError::Usage(e.to_string());
        self.network.validate().map_err(usage)?;
        self.array.validate().map_err(usage)?;
        let bound = match self.accuracy_constraint {
            AccuracyConstraint::Absolute(a) => a,
            AccuracyConstraint::Relative { fraction } => fraction,
        };
        if !(bound > 0.0 && bound <= 1.0) {
            return Err(CliError::Usage(
                "accuracy_constraint must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn derived_seed(&self, tag: &str) -> u64 {
        seed::derive_tag(self.seed, tag)
    }

    pub fn train_config(&self, tag: &str) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            seed: self.derived_seed(tag),
        }
    }

    /// Train and test splits, with the class count widened to the network head.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        let (train, test) = match &self.dataset {
            DatasetSource::Synthetic(p) => synth_clusters(p, self.derived_seed(tags::DATA))?,
            DatasetSource::Idx(files) => (
                load_idx(
                    &files.train_images,
                    &files.train_labels,
                    files.normalize,
                    Split::Train,
                )?,
                load_idx(
                    &files.test_images,
                    &files.test_labels,
                    files.normalize,
                    Split::Test,
                )?,
            ),
        };
        let classes = self.network.num_classes();
        Ok((
            train.with_num_classes(classes)?,
            test.with_num_classes(classes)?,
        ))
    }
}

//! Run configuration files.
//!
//! A run config is one JSON document naming the architecture (inline or by
//! path), the dataset, and the training/expansion/prune settings. Relative
//! paths inside a config resolve against the config file's directory, so a
//! config directory can be moved as a unit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use widenet::arch::ArchSpec;
use widenet::data::{gen_synthetic, load_mnist, Dataset, Normalizer, SyntheticTaskSpec};
use widenet::error::{Error, Result};
use widenet::expand::ExpansionConfig;
use widenet::metrics::Metric;
use widenet::optim::TrainConfig;
use widenet::train::AugmentConfig;

/// Architecture given inline or as a path to an architecture JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchRef {
    Path { path: PathBuf },
    Inline(ArchSpec),
}

/// Which dataset a run trains on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Generated oriented-grating task; a pure function of its spec.
    Synthetic(SyntheticTaskSpec),
    /// IDX files in the standard four-file layout under `dir`.
    Mnist {
        dir: PathBuf,
        /// Keep only the first N training samples (desk-scale runs).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_train: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_test: Option<usize>,
    },
}

/// The `prune` section: which checkpoint to score and how far to cut.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub checkpoint: PathBuf,
    /// Initialization snapshot; required for the self_resemblance metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<PathBuf>,
    /// Metrics to produce curves for; defaults to all three.
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Stop after this many removals; unset prunes until every layer is at
    /// width 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_removals: Option<usize>,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::SelfResemblance, Metric::L1Norm, Metric::MeanActivation]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchRef,
    pub dataset: DatasetConfig,
    /// Per-channel standardization fitted on the training split.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<ExpansionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneSection>,
    /// Evaluate on the test split every K epochs (0 = only implicit final
    /// evaluations). Overridable with `--eval-every`.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    1
}

/// A parsed config plus everything needed to resolve and identify it.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// SHA-256 of the raw file bytes, hex-encoded.
    pub hash: String,
    /// Directory of the config file; relative paths resolve against it.
    pub dir: PathBuf,
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let hash = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok(LoadedConfig { config, hash, dir })
}

fn take(data: Dataset, n: usize) -> Result<Dataset> {
    if n >= data.len() {
        return Ok(data);
    }
    let indices: Vec<usize> = (0..n).collect();
    let (images, labels) = data.batch(&indices);
    Dataset::new(images, labels, data.num_classes)
}

impl LoadedConfig {
    /// Resolve and validate the architecture.
    pub fn arch(&self) -> Result<ArchSpec> {
        match &self.config.arch {
            ArchRef::Inline(arch) => {
                arch.validate()?;
                Ok(arch.clone())
            }
            ArchRef::Path { path } => {
                let full = resolve(&self.dir, path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", full.display())))?;
                ArchSpec::from_json(&text)
            }
        }
    }

    /// Load the (train, test) splits, normalized if the config says so.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.config.dataset {
            DatasetConfig::Synthetic(spec) => gen_synthetic(spec)?,
            DatasetConfig::Mnist { dir, limit_train, limit_test } => {
                let (train, test) = load_mnist(&resolve(&self.dir, dir))?;
                (
                    take(train, limit_train.unwrap_or(usize::MAX))?,
                    take(test, limit_test.unwrap_or(usize::MAX))?,
                )
            }
        };
        if self.config.normalize {
            let norm = Normalizer::fit(&train);
            Ok((norm.apply(&train)?, norm.apply(&test)?))
        } else {
            Ok((train, test))
        }
    }
}

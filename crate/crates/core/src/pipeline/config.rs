use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetIndex;
use crate::decoder::DecoderConfig;
use crate::encoder::{BlockSpec, EncoderMode};
use crate::error::{invalid, Result};
use crate::metrics::BETA_SQ_SOD;
use crate::postproc::RefineParams;

/// How images are divided into the training pool and the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSpec {
    /// Explicit image ids.
    Lists { train: Vec<String>, test: Vec<String> },
    /// A seeded shuffle; `train_fraction` of the images form the pool.
    Random {
        seed: u64,
        #[serde(default = "half")]
        train_fraction: f64,
    },
}

fn half() -> f64 {
    0.5
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Random {
            seed: crate::clustering::DEFAULT_SEED,
            train_fraction: half(),
        }
    }
}

/// A resolved split. Ids in each list are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn default_mode() -> EncoderMode {
    EncoderMode::Bofp
}

fn default_blocks() -> Vec<BlockSpec> {
    vec![BlockSpec::default(); 2]
}

fn default_refine() -> Option<RefineParams> {
    Some(RefineParams::default())
}

fn default_beta_sq() -> f64 {
    BETA_SQ_SOD
}

fn default_seed() -> u64 {
    crate::clustering::DEFAULT_SEED
}

/// Everything needed to train, infer and evaluate; one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Dataset root with `images/`, `markers/` and `gt/` subdirectories.
    /// Relative paths are resolved against the config file's directory.
    pub dataset: PathBuf,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "default_mode")]
    pub mode: EncoderMode,
    #[serde(default = "default_blocks")]
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub decoder: DecoderConfig,
    /// `None` skips delineation and evaluates the decoder output directly.
    #[serde(default = "default_refine")]
    pub refine: Option<RefineParams>,
    #[serde(default = "default_beta_sq")]
    pub beta_sq: f64,
    /// Root seed; every random choice in a run derives from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            split: SplitSpec::default(),
            mode: default_mode(),
            blocks: default_blocks(),
            decoder: DecoderConfig::default(),
            refine: default_refine(),
            beta_sq: default_beta_sq(),
            seed: default_seed(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if config.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                config.dataset = dir.join(&config.dataset);
            }
        }
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Checks parameter ranges; dataset references are checked by
    /// [`PipelineConfig::resolve_split`].
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(invalid("at least one block is required"));
        }
        for (i, spec) in self.blocks.iter().enumerate() {
            spec.validate().map_err(|e| invalid(format!("blocks[{i}]: {e}")))?;
        }
        if let Some(refine) = &self.refine {
            refine.validate()?;
        }
        if !(self.beta_sq > 0.0 && self.beta_sq.is_finite()) {
            return Err(invalid("beta_sq must be positive"));
        }
        if let SplitSpec::Random { train_fraction, .. } = self.split {
            if !(0.0..=1.0).contains(&train_fraction) {
                return Err(invalid("train_fraction must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn resolve_split(&self, index: &DatasetIndex) -> Result<Split> {
        match &self.split {
            SplitSpec::Lists { train, test } => {
                for id in train.iter().chain(test) {
                    if index.get(id).is_none() {
                        return Err(invalid(format!("split references unknown image {id:?}")));
                    }
                }
                let mut train = train.clone();
                let mut test = test.clone();
                train.sort();
                test.sort();
                Ok(Split { train, test })
            }
            SplitSpec::Random { seed, train_fraction } => {
                let mut ids: Vec<String> = index.entries.iter().map(|e| e.id.clone()).collect();
                ids.sort();
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
                let n = (ids.len() as f64 * train_fraction).round() as usize;
                let mut test = ids.split_off(n);
                ids.sort();
                test.sort();
                Ok(Split { train: ids, test })
            }
        }
    }
}

/// Architecture grid: every combination of kernel size, kernels per marker
/// and block count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub kernel_sizes: Vec<usize>,
    pub kernels_per_marker: Vec<usize>,
    pub block_counts: Vec<usize>,
}

impl Default for GridSpec {
    /// The full search range: k in {3, 5, 7}, 1 to 4 kernels per marker,
    /// 1 to 4 blocks.
    fn default() -> Self {
        Self {
            kernel_sizes: vec![3, 5, 7],
            kernels_per_marker: vec![1, 2, 3, 4],
            block_counts: vec![1, 2, 3, 4],
        }
    }
}

/// One architecture of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub k: usize,
    pub kernels_per_marker: usize,
    pub blocks: usize,
}

impl GridPoint {
    /// `blocks` identical blocks built on `template` (pooling settings).
    pub fn block_specs(&self, template: &BlockSpec) -> Vec<BlockSpec> {
        let spec = BlockSpec {
            k: self.k,
            kernels_per_marker: self.kernels_per_marker,
            ..*template
        };
        vec![spec; self.blocks]
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() || self.kernels_per_marker.is_empty() || self.block_counts.is_empty() {
            return Err(invalid("grid axes must be nonempty"));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|k| ![3, 5, 7].contains(*k)) {
            return Err(invalid(format!("kernel size {k} outside {{3, 5, 7}}")));
        }
        if let Some(c) = self.kernels_per_marker.iter().find(|c| !(1..=4).contains(*c)) {
            return Err(invalid(format!("kernels per marker {c} outside 1..=4")));
        }
        if let Some(b) = self.block_counts.iter().find(|b| !(1..=4).contains(*b)) {
            return Err(invalid(format!("block count {b} outside 1..=4")));
        }
        Ok(())
    }

    /// Grid points in a fixed order: kernel size, then kernels per marker,
    /// then block count.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &k in &self.kernel_sizes {
            for &c in &self.kernels_per_marker {
                for &b in &self.block_counts {
                    out.push(GridPoint {
                        k,
                        kernels_per_marker: c,
                        blocks: b,
                    });
                }
            }
        }
        out
    }
}

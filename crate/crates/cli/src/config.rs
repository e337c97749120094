//! Experiment configuration (TOML). Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fastat_core::diagnostics::{CoThresholds, LINEARITY_EXAMPLES, LINEARITY_NOISE_DRAWS};
use fastat_core::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the CIFAR-10 data root.
pub const DATA_ENV: &str = "FASTAT_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Label used in summaries and comparison tables.
    pub name: String,
    pub method: Mode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub co: CoThresholds,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { widths: vec![16, 32] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// CIFAR-10 binary batches under `root` (or `--data` / `FASTAT_DATA`).
    Cifar10 {
        #[serde(default)]
        root: Option<PathBuf>,
        /// Stratified training subset size; `None` keeps all 50,000 images.
        #[serde(default)]
        train_examples: Option<usize>,
        /// Stratified test subset size; `None` keeps all 10,000 images.
        #[serde(default)]
        eval_examples: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    /// Gaussian blobs; train and eval sets use different seeds.
    Synthetic {
        train_examples: usize,
        eval_examples: usize,
        shape: [usize; 3],
        classes: usize,
        margin: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out examples for the final accuracies.
    pub examples: usize,
    pub pgd_steps: usize,
    pub pgd_restarts: usize,
    pub linearity_examples: usize,
    pub linearity_noise: usize,
    pub profile_examples: usize,
    pub profile_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            examples: 1000,
            pgd_steps: 50,
            pgd_restarts: 10,
            linearity_examples: LINEARITY_EXAMPLES,
            linearity_noise: LINEARITY_NOISE_DRAWS,
            profile_examples: 256,
            profile_draws: 4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            bail!("name must not be empty");
        }
        if self.seeds.is_empty() {
            bail!("seeds must list at least one seed");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            bail!("model.widths must be non-empty and positive");
        }
        self.train.validate(self.method).context("in [train]")?;
        let e = &self.eval;
        if [e.examples, e.pgd_steps, e.pgd_restarts, e.linearity_examples, e.linearity_noise, e.profile_examples, e.profile_draws]
            .contains(&0)
        {
            bail!("every [eval] count must be ≥ 1");
        }
        if let DataConfig::Synthetic {
            train_examples,
            eval_examples,
            shape,
            classes,
            margin,
            ..
        } = &self.data
        {
            if *train_examples == 0 || *eval_examples == 0 || *classes < 2 || shape.contains(&0) {
                bail!("synthetic data needs positive sizes and at least two classes");
            }
            if !(margin.is_finite() && *margin >= 0.0) {
                bail!("synthetic margin must be finite and ≥ 0");
            }
        }
        Ok(())
    }

    /// Fills in the data root from the flag or environment and records the
    /// output directory and seed list actually used.
    pub fn resolve(mut self, out: Option<PathBuf>, seeds: Option<Vec<u64>>, data: Option<PathBuf>) -> Result<Self> {
        if let Some(out) = out {
            self.output_dir = Some(out);
        }
        if self.output_dir.is_none() {
            self.output_dir = Some(PathBuf::from("runs").join(&self.name));
        }
        if let Some(seeds) = seeds {
            self.seeds = seeds;
        }
        if let DataConfig::Cifar10 { root, .. } = &mut self.data {
            if let Some(d) = data {
                *root = Some(d);
            }
            if root.is_none() {
                *root = std::env::var_os(DATA_ENV).map(PathBuf::from);
            }
            if root.is_none() {
                bail!("CIFAR-10 data root not set: use data.root, --data or {DATA_ENV}");
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }
}

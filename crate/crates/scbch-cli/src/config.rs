//! Experiment configuration: one strict TOML file drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scbch::dataset::{FileFormat, NoiseSpec, SyntheticSpec};
use scbch::error::{Error, Result};
use scbch::retrieval::PrMode;
use scbch::trainer::TrainConfig;

/// How query/retrieval/train splits are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub query_fraction: f64,
    pub retrieval_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            query_fraction: 0.1,
            retrieval_fraction: 0.4,
            seed: 43,
        }
    }
}

/// Evaluation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// MAP cutoff; 0 means the full retrieval set.
    pub map_at: usize,
    pub pr_mode: PrMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            map_at: 0,
            pr_mode: PrMode::Rank,
        }
    }
}

/// Union configuration for all commands. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; when set it overrides every section seed
    /// (synthetic = seed, split = seed+1, noise = seed+2, train = seed+3).
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Dataset file; defaults to `<out_dir>/dataset.txt`.
    pub dataset_path: Option<PathBuf>,
    pub dataset_format: Option<FileFormat>,
    pub synthetic: SyntheticSpec,
    pub split: SplitConfig,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            out_dir: PathBuf::from("scbch-out"),
            dataset_path: None,
            dataset_format: None,
            synthetic: SyntheticSpec::default(),
            split: SplitConfig::default(),
            noise: NoiseSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        config.apply_master_seed();
        Ok(config)
    }

    /// Re-derives section seeds from the master seed, if one is set.
    pub fn apply_master_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.synthetic.seed = seed;
            self.split.seed = seed.wrapping_add(1);
            self.noise.seed = seed.wrapping_add(2);
            self.train.seed = seed.wrapping_add(3);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.noise.rate) {
            return Err(Error::config(format!(
                "noise rate {} outside [0, 1]",
                self.noise.rate
            )));
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.txt"))
    }

    pub fn dataset_format(&self) -> FileFormat {
        self.dataset_format.unwrap_or(FileFormat::Text)
    }

    pub fn map_cutoff(&self) -> Option<usize> {
        (self.eval.map_at > 0).then_some(self.eval.map_at)
    }

    /// Serializes the effective config and copies it into the output
    /// directory so every run is reproducible from that file alone.
    pub fn snapshot(&self, out_dir: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::config(format!("encode config: {e}")))?;
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.toml"), text)?;
        Ok(())
    }
}

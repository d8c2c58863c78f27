//! The run configuration file (TOML) and its command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mmrinet::model::ModelConfig;
use mmrinet::optim::AdamWConfig;
use mmrinet::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Every key is optional; missing keys take the defaults below.
///
/// ```toml
/// seed = 7
/// crop = [32, 32, 32]
/// steps = 300
/// lr = 3e-4
/// weight_decay = 1e-2
/// batch_size = 1
/// augment = false
/// threads = 1
///
/// [paths]
/// image = "case/image.mvol"
/// label = "case/label.mvol"
/// out = "runs/toy"
///
/// [model]
/// stage_channels = [16, 32, 64, 128]
/// dpfr = true
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub crop: [usize; 3],
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub image: Option<PathBuf>,
    pub label: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            crop: t.crop,
            steps: t.steps,
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            batch_size: t.batch_size,
            augment: t.augment,
            threads: None,
            paths: Paths::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| crate::Validation(format!("{}: {e}", path.display())).into())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            crop: self.crop,
            seed: self.seed,
            augment: self.augment,
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
        }
    }

    /// Input files must exist and the output directory must be creatable.
    pub fn validate_paths(&self) -> anyhow::Result<()> {
        match (&self.paths.image, &self.paths.label) {
            (Some(_), None) | (None, Some(_)) => {
                bail!(crate::Validation("image and label paths must be given together".into()))
            }
            _ => {}
        }
        for p in [&self.paths.image, &self.paths.label].into_iter().flatten() {
            if !p.is_file() {
                bail!(crate::Validation(format!("input file {} does not exist", p.display())));
            }
        }
        if let Some(out) = &self.paths.out {
            if out.exists() && !out.is_dir() {
                bail!(crate::Validation(format!("output path {} is not a directory", out.display())));
            }
        }
        Ok(())
    }
}

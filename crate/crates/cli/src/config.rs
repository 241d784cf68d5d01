use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shaperefine::multitask::{LossWeights, TrainConfig};
use shaperefine::phantom::PhantomParams;
use shaperefine::preproc::{AugmentParams, LrSimParams};
use shaperefine::regfuse::{FusionConfig, RegistrationConfig};

/// Overrides the configured worker count.
pub const WORKERS_ENV: &str = "SHAPEREFINE_WORKERS";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub atlas_dir: Option<PathBuf>,
    pub subject_dir: Option<PathBuf>,
    /// Ground truth for `evaluate`.
    pub reference_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Trained classifier used by `refine` to segment its inputs.
    pub model_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub worker_count: Option<usize>,
    pub phantom_count: Option<usize>,
    pub phantom: PhantomParams,
    pub lr_sim: LrSimParams,
    pub augment: AugmentParams,
    /// Augmented copies added per training subject.
    pub augment_copies: usize,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub registration: RegistrationConfig,
    pub fusion: FusionConfig,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> ConfigResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> ConfigResult<u64> {
        self.seed
            .ok_or_else(|| ConfigError("a seed is required: pass --seed or set \"seed\" in the config".into()))
    }

    pub fn output_dir(&self) -> ConfigResult<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| ConfigError("an output directory is required: pass --out or set \"output_dir\"".into()))
    }

    /// `field` must be set and name an existing directory.
    pub fn existing_dir<'a>(&self, field: &str, value: &'a Option<PathBuf>) -> ConfigResult<&'a Path> {
        let p = value
            .as_deref()
            .ok_or_else(|| ConfigError(format!("\"{field}\" is required for this command")))?;
        if !p.is_dir() {
            return Err(ConfigError(format!("{field} {} does not exist or is not a directory", p.display())));
        }
        Ok(p)
    }

    pub fn existing_file<'a>(&self, field: &str, value: &'a Option<PathBuf>) -> ConfigResult<Option<&'a Path>> {
        match value.as_deref() {
            None => Ok(None),
            Some(p) if p.is_file() => Ok(Some(p)),
            Some(p) => Err(ConfigError(format!("{field} {} does not exist", p.display()))),
        }
    }

    /// Checks every numeric section.
    pub fn validate(&self) -> ConfigResult<()> {
        let wrap = |what: &str, r: shaperefine::Result<()>| r.map_err(|e| ConfigError(format!("{what}: {e}")));
        wrap("phantom", self.phantom.validate())?;
        wrap("loss", self.loss.validate())?;
        wrap("registration", self.registration.validate())?;
        wrap("fusion", self.fusion.validate())?;
        if self.worker_count == Some(0) {
            return Err(ConfigError("worker_count must be >= 1".into()));
        }
        Ok(())
    }

    /// Environment override, then config, then rayon's default.
    pub fn workers(&self) -> ConfigResult<Option<usize>> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(ConfigError(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
            },
            Err(_) => Ok(self.worker_count),
        }
    }
}

/// Deterministic per-subject seed, independent of which other subjects exist.
pub fn subject_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

//! Run configuration: a flat `key = value` file plus command-line overrides.
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use turtle_core::data::{Degradation, DegradationSpec};
use turtle_core::kv::KeyValues;
use turtle_core::model::{ModelConfig, MODEL_KEYS};
use turtle_core::optim::OptimizerConfig;
use turtle_core::train::{optim_from_kv, OPTIM_KEYS};

const RUN_KEYS: &[&str] = &[
    "seed",
    "deterministic",
    "degrade.kind",
    "degrade.sigma_min",
    "degrade.sigma_max",
    "degrade.window",
    "degrade.seed",
    "degrade.input",
    "degrade.output",
    "data.clips",
    "data.frames",
    "data.size",
    "data.gt",
    "data.lq",
    "train.checkpoint",
    "train.log",
    "train.resume",
    "train.until",
    "train.checkpoint_every",
    "restore.checkpoint",
    "restore.input",
    "restore.output",
    "restore.gt",
    "restore.report",
    "restore.color_mode",
    "profile.resolutions",
    "profile.timed_frames",
    "profile.max_timed_gmacs",
    "profile.breakdown",
    "gradcheck.seed",
    "gradcheck.include_corrupted",
    "selftest.iters",
];

pub struct RunConfig {
    pub kv: KeyValues,
    base_dir: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
    pub degradation: DegradationSpec,
}

impl RunConfig {
    pub fn load(path: &Path, seed: Option<u64>, deterministic: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| turtle_core::Error::File { path: path.to_path_buf(), message: e.to_string() })?;
        let kv = KeyValues::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_kv(kv, base_dir, seed, deterministic)
    }

    pub fn from_kv(mut kv: KeyValues, base_dir: PathBuf, seed: Option<u64>, deterministic: bool) -> Result<Self> {
        let known: Vec<&str> = RUN_KEYS.iter().chain(MODEL_KEYS).chain(OPTIM_KEYS).copied().collect();
        kv.check_known(&known)?;
        if let Some(s) = seed {
            kv.set("seed", s);
        }
        if deterministic {
            kv.set("deterministic", true);
        }
        let seed: u64 = kv.get_or("seed", 0)?;
        if !kv.contains("optim.seed") {
            kv.set("optim.seed", seed);
        }
        let model = ModelConfig::from_kv(&kv)?;
        let optim = optim_from_kv(&kv)?;
        let degradation = degradation_from_kv(&kv, seed)?;
        Ok(Self { deterministic: kv.get_or("deterministic", false)?, kv, base_dir, seed, model, optim, degradation })
    }

    /// Path stored under `key`, resolved against the config directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.kv.get_str(key).map(|p| self.base_dir.join(p))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| turtle_core::Error::Config(format!("missing key {key}")).into())
    }
}

fn degradation_from_kv(kv: &KeyValues, seed: u64) -> Result<DegradationSpec> {
    let kind = match kv.get_str("degrade.kind").unwrap_or("gaussian_noise") {
        "gaussian_noise" => Degradation::GaussianNoise {
            sigma_min: kv.get_or("degrade.sigma_min", 30.0)?,
            sigma_max: kv.get_or("degrade.sigma_max", 50.0)?,
        },
        "average_blur" => Degradation::AverageBlur { window: kv.get_or("degrade.window", 5)? },
        other => return Err(turtle_core::Error::Config(format!("unknown degradation {other:?}")).into()),
    };
    let spec = DegradationSpec { kind, seed: kv.get_or("degrade.seed", seed)? };
    spec.validate()?;
    Ok(spec)
}

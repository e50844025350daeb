//! Experiment configuration with layered resolution: command-line flags
//! win over the config file, which wins over `MCSBP_`-prefixed
//! environment variables. The resolved configuration is hashed; result
//! bundles record the hash and refuse to overwrite a directory written
//! under a different one. There is no wall-clock seed default: a seed
//! must come from one of the three sources.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const ENV_PREFIX: &str = "MCSBP_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Scenario name recorded in the bundle.
    pub scenario: Option<String>,
    /// Model file for commands that take one through the config.
    pub model: Option<PathBuf>,
    /// Particle scale.
    pub k: u32,
    /// Horizon for Monte Carlo runs.
    pub t: f64,
    /// Replicates per Monte Carlo estimate.
    pub reps: u64,
    /// Truncation schedule for spectral runs.
    pub n_schedule: Vec<usize>,
    /// Sign tolerance for the local-extinction classifier.
    pub lambda_tol: f64,
    /// Horizons of the extinction-frequency curve in the example
    /// scenarios.
    pub extinction_times: Vec<f64>,
    /// Replicates per point of that curve (kept separate from `reps`:
    /// long-horizon supercritical runs cost quadratically in `k`).
    pub extinction_reps: u64,
    /// Extinction-curve particle scale.
    pub extinction_k: u32,
    /// Truncation for the local-extinction solver in the scenarios.
    pub local_n: usize,
    /// Walk parameter of the example scenarios.
    pub p: Option<f64>,
    /// Local drift of the example scenarios.
    pub b: Option<f64>,
    /// Effective non-local rate of the example scenarios.
    pub a: Option<f64>,
    /// Quadratic coefficient of the example scenarios.
    pub c: Option<f64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            model: None,
            k: 200,
            t: 1.0,
            reps: 100_000,
            n_schedule: vec![25, 50, 100, 200, 400, 800],
            lambda_tol: 1e-3,
            extinction_times: vec![1.0, 2.0, 4.0, 8.0],
            extinction_reps: 2000,
            extinction_k: 100,
            local_n: 41,
            p: None,
            b: None,
            a: None,
            c: None,
            seed: None,
            workers: None,
            out: None,
        }
    }
}

/// Values taken from global command-line flags.
#[derive(Debug, Clone, Default)]
pub struct FlagLayer {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

fn env_u64(name: &str) -> Result<Option<u64>> {
    match std::env::var(format!("{ENV_PREFIX}{name}")) {
        Ok(v) => Ok(Some(v.parse().with_context(|| {
            format!("{ENV_PREFIX}{name} must be an unsigned integer")
        })?)),
        Err(_) => Ok(None),
    }
}

fn env_usize(name: &str) -> Result<Option<usize>> {
    Ok(env_u64(name)?.map(|v| v as usize))
}

fn env_path(name: &str) -> Option<PathBuf> {
    std::env::var(format!("{ENV_PREFIX}{name}")).ok().map(PathBuf::from)
}

impl ExperimentConfig {
    /// Load the config file (if any) and resolve the layered values.
    pub fn resolve(file: Option<&Path>, flags: &FlagLayer) -> Result<Self> {
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        // environment fills gaps the file left open
        if cfg.seed.is_none() {
            cfg.seed = env_u64("SEED")?;
        }
        if cfg.workers.is_none() {
            cfg.workers = env_usize("WORKERS")?;
        }
        if cfg.out.is_none() {
            cfg.out = env_path("OUT");
        }
        // flags win
        if flags.seed.is_some() {
            cfg.seed = flags.seed;
        }
        if flags.workers.is_some() {
            cfg.workers = flags.workers;
        }
        if flags.out.is_some() {
            cfg.out = flags.out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda_tol > 0.0) {
            bail!("lambda_tol must be positive");
        }
        if !(self.t > 0.0) {
            bail!("t must be positive");
        }
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if self.n_schedule.is_empty() {
            bail!("n_schedule must not be empty");
        }
        Ok(())
    }

    /// Seed is mandatory for anything stochastic; no wall-clock default.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed.context(
            "a seed is required (pass --seed, set it in the config file, or export MCSBP_SEED)",
        )
    }

    pub fn workers_or_default(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    }

    /// Content hash of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self)?;
        let mut hasher = Sha256::new();
        hasher.update(&canonical);
        Ok(hex::encode(hasher.finalize()))
    }
}

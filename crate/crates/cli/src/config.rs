//! Run configuration. Values resolve as: command-line override, then the
//! config file, then `BEVCAR_SEED` (seed only), then built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bevcar_core::loss::LossConfig;
use bevcar_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "BEVCAR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// Linear warm-up steps before the cosine decay.
    pub warmup: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            warmup: 0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for 0-based `step`: linear warm-up, then cosine decay
    /// to zero at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = (step - self.warmup) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    /// Condition split file; `split.json` inside the dataset when unset.
    pub split: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Write a numbered checkpoint every this many steps (0: only the last).
    pub checkpoint_every: usize,
    /// Number of tokens, from the end of the sorted list, held out for
    /// evaluation; with 0 training samples are evaluated.
    pub holdout: usize,
    /// Use at most this many training tokens (0: all).
    pub max_samples: usize,
    /// Stop once every listed class reaches its IoU (fraction) at an eval.
    pub stop_at: BTreeMap<String, f64>,
    pub loader_workers: usize,
    pub prefetch: usize,
    /// Inclusive vehicle-count range for generated scenes.
    pub scene_vehicles: [usize; 2],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 1,
            seed: 0,
            dataset: PathBuf::from("dataset"),
            split: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            eval_every: 0,
            checkpoint_every: 0,
            holdout: 0,
            max_samples: 0,
            stop_at: BTreeMap::new(),
            loader_workers: 2,
            prefetch: 4,
            scene_vehicles: [3, 12],
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Sets `a.b.c` in a JSON object; the value is parsed as JSON when possible
/// and taken as a string otherwise.
fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    /// Resolves a configuration from an optional JSON file, `key=value`
    /// overrides and the seed fallback from the environment.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            value["seed"] = seed.into();
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let over: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !over.is_object() {
                return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut value, over);
        }
        for (k, v) in overrides {
            set_path(&mut value, k, v)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_env(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(file, overrides, env.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.scene_vehicles[0] > self.scene_vehicles[1] {
            return Err(CliError::Config("scene_vehicles must be [min, max] with min <= max".into()));
        }
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(CliError::Config("optimizer: lr and weight_decay must be >= 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn split_path(&self) -> PathBuf {
        self.split.clone().unwrap_or_else(|| self.dataset.join("split.json"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.checkpoint_dir.join("metrics.jsonl")
    }
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.to_string()))
}

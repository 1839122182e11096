//! Flat `key = value` experiment settings: defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::CliError;
use crate::models::InsertionPolicy;
use crate::perturbation::{Anneal, PerturbConfig};
use crate::trainer::TrainConfig;

/// Every key a config file may set, with its default.
const DEFAULTS: &[(&str, &str)] = &[
    ("model", "conv2"),
    ("insertion", "all"),
    ("steps", "2000"),
    ("lr", "0.001"),
    ("lr_decay", "0.3"),
    ("batch_size", "64"),
    ("test_batch_size", "64"),
    ("weight_decay", "0.0005"),
    ("anneal_fraction", "0.5"),
    ("noise", "true"),
    ("scale", "true"),
    ("mc_samples", "30"),
    ("scale_momentum", "0.1"),
    ("augment", "true"),
    ("workers", "1"),
    ("seed", "0"),
];

/// Keys that may be set but have no default.
const OPTIONAL: &[&str] = &["milestones", "fixed_beta"];

/// Keys that change how a run executes but not what it computes or which replicate it is.
const UNHASHED: &[&str] = &["seed", "workers"];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::usage(msg)
}

impl Settings {
    pub fn defaults() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        let key = key.trim();
        if !DEFAULTS.iter().any(|(k, _)| *k == key) && !OPTIONAL.contains(&key) {
            return Err(usage(format!("unknown setting '{key}'")));
        }
        self.values.insert(key.to_string(), value.into().trim().to_string());
        Ok(())
    }

    /// Applies a file of `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {} is not key = value: '{line}'", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.get(key).ok_or_else(|| usage(format!("setting '{key}' is missing")))?;
        raw.parse().map_err(|_| usage(format!("setting '{key}' has invalid value '{raw}'")))
    }

    fn milestones(&self, steps: usize) -> Result<Vec<usize>, CliError> {
        match self.get("milestones") {
            None => Ok(TrainConfig::scaled_milestones(steps)),
            Some("") => Ok(Vec::new()),
            Some(list) => list
                .split(',')
                .map(|m| m.trim().parse().map_err(|_| usage(format!("invalid milestone '{m}'"))))
                .collect(),
        }
    }

    pub fn insertion(&self) -> Result<InsertionPolicy, CliError> {
        self.get("insertion").unwrap_or("all").parse().map_err(|e: crate::Error| usage(e.to_string()))
    }

    pub fn perturb_config(&self) -> Result<PerturbConfig, CliError> {
        let anneal = match self.get("fixed_beta") {
            Some(_) => Anneal::Fixed(self.parse("fixed_beta")?),
            None => Anneal::Linear { fraction: self.parse("anneal_fraction")? },
        };
        Ok(PerturbConfig {
            enable_noise: self.parse("noise")?,
            enable_scale: self.parse("scale")?,
            anneal,
            mc_samples: self.parse("mc_samples")?,
            scale_momentum: self.parse("scale_momentum")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let total_steps: usize = self.parse("steps")?;
        let cfg = TrainConfig {
            total_steps,
            lr: self.parse("lr")?,
            lr_decay: self.parse("lr_decay")?,
            milestones: self.milestones(total_steps)?,
            batch_size: self.parse("batch_size")?,
            test_batch_size: self.parse("test_batch_size")?,
            weight_decay: self.parse("weight_decay")?,
            test_fraction: TrainConfig::default().test_fraction,
            augment: self.parse("augment")?,
            perturb: self.perturb_config()?,
            workers: self.parse("workers")?,
            seed: self.parse("seed")?,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Effective settings, with derived milestones made explicit.
    pub fn effective(&self) -> Result<BTreeMap<String, String>, CliError> {
        let mut values = self.values.clone();
        let steps: usize = self.parse("steps")?;
        let milestones: Vec<String> = self.milestones(steps)?.iter().map(usize::to_string).collect();
        values.insert("milestones".into(), milestones.join(","));
        Ok(values)
    }

    /// Stable digest of the effective settings plus `extra` entries, leaving out seed and worker count.
    pub fn config_hash(&self, extra: &[(&str, String)]) -> Result<String, CliError> {
        let mut values = self.effective()?;
        for (k, v) in extra {
            values.insert(k.to_string(), v.clone());
        }
        let canonical: String = values
            .iter()
            .filter(|(k, _)| !UNHASHED.contains(&k.as_str()))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        Ok(format!("{:016x}", crate::stable_hash64(canonical.as_bytes())))
    }
}

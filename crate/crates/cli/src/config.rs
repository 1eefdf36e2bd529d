//! Experiment config files: JSON, validated against the registries before
//! typed deserialization so errors name the offending field.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use miaudit::defenses::DefenseConfig;
use miaudit::eval::{AttackId, ExperimentSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const CANARY_FAMILIES: [&str; 5] = [
    "none",
    "mislabeled",
    "mislabeled-duplicate",
    "ood",
    "uniform",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub experiment: ExperimentSpec,
    /// Used when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn check_id(value: &Value, path: &[&str], known: &[&str], what: &str) -> Result<()> {
    let mut v = value;
    for key in path {
        v = match v.get(key) {
            Some(inner) => inner,
            None => bail!("field `{}` is missing", path.join(".")),
        };
    }
    let Some(id) = v.as_str() else {
        bail!("field `{}` must be a string", path.join("."));
    };
    if !known.contains(&id) {
        bail!(
            "field `{}`: unknown {what} id {id:?} (known: {})",
            path.join("."),
            known.join(", ")
        );
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        check_id(&value, &["defense", "id"], &DefenseConfig::IDS, "defense")?;
        check_id(&value, &["attack"], &AttackId::IDS, "attack")?;
        check_id(
            &value,
            &["canaries", "family"],
            &CANARY_FAMILIES,
            "canary family",
        )?;
        let config: Self = serde_json::from_value(value).context("invalid config")?;
        config.experiment.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Hash of everything that determines the results (not the output path).
    pub fn hash(&self) -> String {
        digest_json(&self.experiment)
    }

    /// Hash of what determines the trained fleet.
    pub fn fleet_key(&self) -> String {
        let e = &self.experiment;
        digest_json(&serde_json::json!({
            "engine_version": miaudit::ENGINE_VERSION,
            "dataset": e.dataset,
            "canaries": e.canaries,
            "defense": e.defense,
            "num_models": e.num_models,
            "seed": e.seed,
            "membership_mode": e.membership_mode,
        }))
    }
}

/// First 16 hex digits of the SHA-256 of the compact JSON encoding.
pub fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    let hex = format!("{:x}", Sha256::digest(&bytes));
    hex[..16].to_string()
}

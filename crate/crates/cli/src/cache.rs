//! Trained-fleet cache keyed by the hash of everything that shapes training.

use std::path::{Path, PathBuf};

use anyhow::Result;
use miaudit::model::Model;

use crate::artifacts::{read_json, write_atomic};

pub const CACHE_ENV: &str = "MIAUDIT_CACHE";

/// `MIAUDIT_CACHE` wins over the command-line directory.
pub fn resolve_dir(flag: Option<&Path>) -> Option<PathBuf> {
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
        _ => flag.map(Path::to_path_buf),
    }
}

pub struct FleetCache {
    dir: PathBuf,
}

impl FleetCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("fleet-{key}.json"))
    }

    /// A corrupt entry counts as a miss.
    pub fn load(&self, key: &str, num_models: usize) -> Option<Vec<Model>> {
        let path = self.path(key);
        if !path.exists() {
            return None;
        }
        match read_json::<Vec<Model>>(&path) {
            Ok(models) if models.len() == num_models => Some(models),
            Ok(_) => None,
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e:#}", path.display());
                None
            }
        }
    }

    pub fn store(&self, key: &str, models: &[Model]) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        write_atomic(&self.path(key), &serde_json::to_vec(models)?)
    }
}

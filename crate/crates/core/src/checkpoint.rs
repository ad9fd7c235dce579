//! Versioned JSON checkpoints.
//!
//! A checkpoint captures everything a resumed run needs: parameters,
//! optimizer state, progress counters, the root seed, and a hash of the
//! config it was produced under. `format_version` is mandatory and checked
//! before anything else is parsed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Hex SHA-256 of the canonicalized run config; resume refuses to mix
    /// checkpoints across configs.
    pub config_hash: String,
    /// The full run config, so detection can rebuild the model without a
    /// separate config file. Must hash to `config_hash`.
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub global_step: u64,
    pub root_seed: u64,
    pub params: ParamStore,
    pub optim: Adam,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing format_version", path.display()))
            })?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: version as u32,
                supported: FORMAT_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Checkpoint(format!(
                "{}: embedded config does not hash to config_hash (corrupt or edited checkpoint)",
                path.display()
            )));
        }
        Ok(ck)
    }
}

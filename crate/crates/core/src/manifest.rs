//! Run provenance: config snapshot, seed, step counts and output digests.
//!
//! Serialized as pretty JSON with sorted keys:
//!
//! ```json
//! {
//!   "command": "train",
//!   "code_version": "thinking-lab 0.1.0",
//!   "root_seed": 42,
//!   "config": { ... },
//!   "phase_steps": { "phase1": 600, "phase2": 600 },
//!   "outputs": { "train_log.csv": "<sha256 hex>" }
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub const CODE_VERSION: &str = concat!("thinking-lab ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub root_seed: u64,
    pub config: serde_json::Value,
    pub phase_steps: BTreeMap<String, u64>,
    /// File name (relative to the output directory) to SHA-256 hex digest.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, root_seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_owned(),
            code_version: CODE_VERSION.to_owned(),
            root_seed,
            config,
            phase_steps: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Hash `dir/name` and record it under `name`.
    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let digest = file_digest(&dir.join(name))?;
        self.outputs.insert(name.to_owned(), digest);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| LabError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text).map_err(|e| LabError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }
}

pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    Ok(bytes_digest(&bytes))
}

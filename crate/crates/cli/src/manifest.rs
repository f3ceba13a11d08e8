//! `run.json`: what produced an output directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use geodiff::io::{hash_json, write_json};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_hash: String,
    pub schema_hash: String,
    pub seed: u64,
    /// Stage name → derived seed.
    pub seeds: BTreeMap<String, u64>,
    /// Input artifact → hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: RunConfig,
}

pub fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, schema_hash: String, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: hash_json(config),
            schema_hash,
            seed,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
            config: config.clone(),
        }
    }

    pub fn finish(mut self, dir: &Path) -> geodiff::Result<()> {
        self.finished_unix = now();
        write_json(&dir.join("run.json"), &self)?;
        Ok(())
    }
}

//! Output directory bookkeeping: every run leaves its resolved config, the
//! hashes of its inputs and the program version next to its results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::fail::{output, CliError, CliResult};

pub const VERSION: &str = concat!("swg ", env!("CARGO_PKG_VERSION"));

pub struct RunDir {
    pub path: PathBuf,
    inputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
    /// SHA-256 of every file the run read, keyed by role.
    inputs: &'a BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(path: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(path).map_err(output)?;
        Ok(Self {
            path: path.to_path_buf(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn record_bytes(&mut self, role: &str, bytes: &[u8]) {
        self.inputs.insert(role.to_string(), sha256_hex(bytes));
    }

    pub fn record_file(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        self.record_bytes(role, &bytes);
        Ok(())
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(output)?;
        std::fs::write(self.file(name), text).map_err(output)
    }

    /// Writes `config.resolved.json` and `run.json`.
    pub fn finish(&self, command: &str, cfg: &ExperimentConfig) -> CliResult<()> {
        self.write_json("config.resolved.json", cfg)?;
        self.write_json(
            "run.json",
            &RunRecord {
                version: VERSION,
                command,
                seed: cfg.seed,
                inputs: &self.inputs,
            },
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

//! JSON reports with enough provenance to reproduce a run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub config_sha256: Option<String>,
    /// Input role to path and content hash.
    pub inputs: BTreeMap<String, InputFile>,
    /// Output role to path.
    pub outputs: BTreeMap<String, String>,
    pub result: T,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<InputFile, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(InputFile { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &'static str, config: Option<&[u8]>, result: T) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: config.map(sha256_hex),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            result,
        }
    }

    pub fn input(mut self, role: &str, path: &Path) -> Result<Self, CliError> {
        self.inputs.insert(role.to_string(), hash_file(path)?);
        Ok(self)
    }

    pub fn output(mut self, role: &str, path: &Path) -> Self {
        self.outputs.insert(role.to_string(), path.display().to_string());
        self
    }

    /// Writes pretty JSON to `path` and echoes it on stdout.
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("reports serialize");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, format!("{text}\n")).map_err(|e| CliError::io(path, e))?;
        println!("{text}");
        Ok(())
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command run. `args` is the full parsed flag set, enough to
/// re-execute the command; output paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub args: serde_json::Value,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set so that
/// manifests can be byte-reproducible.
pub fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return v;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}

impl RunManifest {
    pub fn start(command: &str, seed: Option<u64>, args: serde_json::Value, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            args,
            config,
            started_unix: now_unix(),
            finished_unix: 0,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(Artifact { path: absolute(path)?, sha256 });
        Ok(())
    }

    /// `name` is relative to `out_dir`.
    pub fn add_output(&mut self, out_dir: &Path, name: &str) -> CliResult<()> {
        let sha256 = sha256_file(&out_dir.join(name))?;
        self.outputs.push(Artifact { path: PathBuf::from(name), sha256 });
        Ok(())
    }

    pub fn finish(mut self, out_dir: &Path) -> CliResult<PathBuf> {
        self.finished_unix = now_unix();
        let path = out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Input(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

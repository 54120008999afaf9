use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::output::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFingerprint {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFingerprint {
    pub fn of(role: &str, path: &Path, bytes: &[u8]) -> Self {
        let path = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        Self { role: role.to_owned(), path, sha256: sha256_hex(bytes) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

/// Sweep grid of a `sweep` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Alpha(Vec<f64>),
    Mc(Vec<f64>),
}

/// Everything needed to reproduce a run: the command, its fully resolved
/// configuration and the content hashes of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub timestamp: String,
    pub inputs: Vec<InputFingerprint>,
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    pub outputs: Vec<OutputRecord>,
    /// Error of a failed run, reproduced by replay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

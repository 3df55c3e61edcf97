//! `manifest.json`: resolved config hash plus content hashes of every file a command wrote.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_sha256: String,
    /// Relative path → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_hex(cfg.to_toml().as_bytes())
}

/// Loads the manifest in `dir`, or starts an empty one.
pub fn load(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(FILE_NAME);
    if !path.exists() {
        return Ok(Manifest::default());
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Hashes `files` (relative to `dir`) into the manifest and writes it back.
pub fn record(dir: &Path, cfg: &RunConfig, files: &[String], warnings: &[String]) -> Result<(), CliError> {
    let mut m = load(dir)?;
    m.schema_version = cfg.schema_version;
    m.config_sha256 = config_hash(cfg);
    for f in files {
        let bytes = std::fs::read(dir.join(f))?;
        m.files.insert(f.clone(), sha256_hex(&bytes));
    }
    for w in warnings {
        if !m.warnings.contains(w) {
            m.warnings.push(w.clone());
        }
    }
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    std::fs::write(dir.join(FILE_NAME), text + "\n")?;
    Ok(())
}

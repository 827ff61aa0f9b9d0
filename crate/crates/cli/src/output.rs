//! Artifact writing. JSON artifacts carry a `meta` object; other files get a
//! `<name>.meta.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: &'static str,
}

impl Meta {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            tool_version: env!("CARGO_PKG_VERSION"),
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Writes a JSON object with a `meta` field added at the top level.
pub fn write_json(path: &Path, body: Value, meta: &Meta) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut obj = match body {
        Value::Object(m) => m,
        other => {
            let mut m = serde_json::Map::new();
            m.insert("data".into(), other);
            m
        }
    };
    obj.insert("meta".into(), json!(meta));
    let text = serde_json::to_string_pretty(&Value::Object(obj))
        .map_err(|e| CliError::Runtime(e.into()))?;
    fs::write(path, text + "\n")?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes raw bytes plus a metadata sidecar.
pub fn write_bytes(path: &Path, bytes: &[u8], meta: &Meta) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, bytes)?;
    let text = serde_json::to_string_pretty(meta).map_err(|e| CliError::Runtime(e.into()))?;
    fs::write(sidecar(path), text + "\n")?;
    log::info!("wrote {}", path.display());
    Ok(())
}

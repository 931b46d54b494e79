//! Run manifest: enough to reproduce a run bit for bit.
//!
//! The manifest embeds the fully resolved config under `[config]`, so it can
//! be passed back as `--config`.

use std::path::{Path, PathBuf};

use qsec::experiments::ExperimentConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub artifact_version: String,
    pub subcommand: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub wall_clock_s: f64,
    pub outputs: Vec<String>,
    /// Subcommand-specific notes (inputs, checks).
    #[serde(default)]
    pub notes: toml::Table,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: RunInfo,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        config_path: Option<&Path>,
        cfg: &ExperimentConfig,
        outputs: Vec<PathBuf>,
        wall_clock_s: f64,
        notes: Vec<(String, String)>,
    ) -> Self {
        RunManifest {
            run: RunInfo {
                artifact_version: env!("CARGO_PKG_VERSION").to_string(),
                subcommand: subcommand.to_string(),
                config_path: config_path.map(|p| p.display().to_string()),
                seed: cfg.seed,
                config_hash: cfg.hash(),
                wall_clock_s,
                outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
                notes: notes.into_iter().map(|(k, v)| (k, toml::Value::String(v))).collect(),
            },
            config: cfg.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// The embedded config when `text` is a manifest, `None` for a plain config.
pub fn config_from_manifest(text: &str) -> qsec::Result<Option<ExperimentConfig>> {
    let Ok(table) = text.parse::<toml::Table>() else {
        return Ok(None);
    };
    if !table.contains_key("run") {
        return Ok(None);
    }
    let m: RunManifest = toml::from_str(text)
        .map_err(|e| qsec::Error::Config { field: "manifest".into(), message: e.message().to_string() })?;
    m.config.validate()?;
    Ok(Some(m.config))
}

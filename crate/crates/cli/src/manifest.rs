//! Per-command artifact manifests: exactly what a run produced, under what
//! configuration and seed, so any artifact directory is reproducible from
//! its manifests alone. No timestamps: reruns are byte-identical.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqstop::error::{Error, Result};

use crate::config::ExperimentConfig;

pub const MANIFEST_SCHEMA: &str = "seqstop-manifest-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub command: String,
    pub crate_version: String,
    pub env_id: String,
    /// Hash of the environment configuration in force.
    pub config_hash: String,
    /// The command's primary master seed.
    pub seed: u64,
    /// Artifact files, relative to the manifest's directory.
    pub artifacts: Vec<String>,
    /// The fully resolved configuration.
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(
        command: &str,
        env_id: &str,
        config_hash: String,
        seed: u64,
        artifacts: Vec<String>,
        config: &ExperimentConfig,
    ) -> Manifest {
        Manifest {
            schema: MANIFEST_SCHEMA.to_string(),
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            env_id: env_id.to_string(),
            config_hash,
            seed,
            artifacts,
            config: config.clone(),
        }
    }

    pub fn path_for(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("manifest-{command}.toml"))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path_for(dir, &self.command);
        let text = toml::to_string(self)
            .map_err(|e| Error::data(None, format!("manifest serialize: {e}")))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// All manifests in a directory, sorted by command name for determinism.
pub fn read_manifests(dir: &Path) -> Result<Vec<Manifest>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::data(None, format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("manifest-") && name.ends_with(".toml") {
            let text = std::fs::read_to_string(entry.path())?;
            let manifest: Manifest = toml::from_str(&text)
                .map_err(|e| Error::data(None, format!("manifest parse in {name}: {e}")))?;
            if manifest.schema != MANIFEST_SCHEMA {
                return Err(Error::data(
                    None,
                    format!("unsupported manifest schema `{}` in {name}", manifest.schema),
                ));
            }
            out.push(manifest);
        }
    }
    out.sort_by(|a, b| a.command.cmp(&b.command));
    Ok(out)
}

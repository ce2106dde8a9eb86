//! Reproducibility record written next to every artifact set: the effective
//! configuration plus a sha256 per input and output file.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use degradekit_core::{Error, Result};

#[derive(Serialize)]
pub struct ArtifactRef {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run and verify one invocation. The timestamp is
/// the only field allowed to differ between identical runs.
#[derive(Serialize)]
pub struct Manifest {
    pub format_version: String,
    pub kind: String,
    pub subcommand: String,
    pub created_unix: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

impl Manifest {
    pub fn new(subcommand: &str, config: serde_json::Value) -> Manifest {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Manifest {
            format_version: "degradekit-1".into(),
            kind: "run_manifest".into(),
            subcommand: subcommand.into(),
            created_unix,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, role: &str, path: &Path) -> Result<()> {
        let entry = artifact_ref(role, path)?;
        self.inputs.push(entry);
        Ok(())
    }

    pub fn record_output(&mut self, role: &str, path: &Path) -> Result<()> {
        let entry = artifact_ref(role, path)?;
        self.outputs.push(entry);
        Ok(())
    }

    /// Writes `manifest.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: path.clone(),
            detail: format!("manifest serialization failed: {e}"),
        })?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

fn artifact_ref(role: &str, path: &Path) -> Result<ArtifactRef> {
    Ok(ArtifactRef {
        role: role.into(),
        path: path.display().to_string(),
        sha256: sha256_hex(path)?,
    })
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

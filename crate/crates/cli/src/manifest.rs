//! Run manifests: scenario hash, stage log and a checksummed output inventory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, LabResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_hash: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub stages: Vec<StageRecord>,
    pub outputs: Vec<OutputRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn new(scenario_text: &str) -> Self {
        Self {
            scenario_hash: sha256_hex(scenario_text.as_bytes()),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started: now(),
            finished: 0.0,
            stages: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn stage_ok(&mut self, name: &str) {
        self.stages.push(StageRecord {
            name: name.into(),
            status: StageStatus::Ok,
            message: None,
        });
    }

    pub fn stage_failed(&mut self, name: &str, message: String) {
        self.stages.push(StageRecord {
            name: name.into(),
            status: StageStatus::Failed,
            message: Some(message),
        });
    }

    pub fn succeeded(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Ok)
    }

    /// Records a file already written under `dir`.
    pub fn add_output(&mut self, dir: &Path, relative: impl Into<PathBuf>) -> LabResult<()> {
        let relative = relative.into();
        let full = dir.join(&relative);
        let bytes = std::fs::read(&full).map_err(LabError::io(&full))?;
        self.outputs.push(OutputRecord {
            path: relative,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write(&mut self, dir: &Path) -> LabResult<PathBuf> {
        self.finished = now();
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(LabError::io(&path))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
        serde_json::from_str(&text).map_err(|e| {
            LabError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            }
        })
    }
}

/// Re-hashes every declared output next to the manifest.
pub fn verify(manifest_path: &Path) -> LabResult<RunManifest> {
    let manifest = RunManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut problems = Vec::new();
    for out in &manifest.outputs {
        let full = dir.join(&out.path);
        match std::fs::read(&full) {
            Ok(bytes) => {
                let digest = sha256_hex(&bytes);
                if digest != out.sha256 {
                    problems.push(format!("{}: checksum {digest} != {}", out.path.display(), out.sha256));
                }
            }
            Err(e) => problems.push(format!("{}: {e}", out.path.display())),
        }
    }
    if problems.is_empty() {
        Ok(manifest)
    } else {
        Err(LabError::Mismatch(problems.join("; ")))
    }
}

//! Content-hash records linking each stage's outputs to its inputs.
//!
//! Every stage writes `provenance/<stage>.json` next to its outputs, listing
//! the SHA-256 of each input (by role) and each output (by file name). A
//! downstream stage refuses to run when an upstream record is missing, when an
//! upstream output was modified after it was written, or when one of the
//! upstream inputs has changed since.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PROVENANCE_DIR: &str = "provenance";

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    fs::read(path).map(|b| hash_bytes(&b)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub params: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl StageRecord {
    pub fn new(stage: &str, params: serde_json::Value) -> Self {
        Self {
            stage: stage.to_string(),
            params,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn path(out_dir: &Path, stage: &str) -> PathBuf {
        out_dir.join(PROVENANCE_DIR).join(format!("{stage}.json"))
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_string(), hash_file(path)?);
        Ok(())
    }

    /// Records an output file, named relative to the output directory.
    pub fn add_output(&mut self, out_dir: &Path, name: &str) -> Result<()> {
        self.outputs
            .insert(name.to_string(), hash_file(&out_dir.join(name))?);
        Ok(())
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = Self::path(out_dir, &self.stage);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(out_dir: &Path, stage: &str) -> Result<Option<Self>> {
        let path = Self::path(out_dir, stage);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| Error::parse(path.display().to_string(), e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

/// Why an upstream stage cannot be used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Staleness {
    Missing { stage: String },
    OutputChanged { stage: String, file: String },
    InputChanged { stage: String, role: String },
}

impl std::fmt::Display for Staleness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Staleness::Missing { stage } => {
                write!(f, "missing output of stage `{stage}`; run `confguide {stage}` first")
            }
            Staleness::OutputChanged { stage, file } => write!(
                f,
                "{file} was modified after stage `{stage}` wrote it; rerun `confguide {stage}` or pass --force"
            ),
            Staleness::InputChanged { stage, role } => write!(
                f,
                "input `{role}` changed since stage `{stage}` ran; rerun `confguide {stage}` or pass --force"
            ),
        }
    }
}

/// Checks one upstream stage. `resolve` maps an input role to its current
/// path; roles it cannot resolve are skipped.
pub fn check_upstream(
    out_dir: &Path,
    stage: &str,
    resolve: impl Fn(&str) -> Option<PathBuf>,
) -> Result<Option<Staleness>> {
    let Some(record) = StageRecord::load(out_dir, stage)? else {
        return Ok(Some(Staleness::Missing { stage: stage.into() }));
    };
    for (file, expected) in &record.outputs {
        let path = out_dir.join(file);
        if !path.exists() {
            return Ok(Some(Staleness::Missing { stage: stage.into() }));
        }
        if &hash_file(&path)? != expected {
            return Ok(Some(Staleness::OutputChanged {
                stage: stage.into(),
                file: file.clone(),
            }));
        }
    }
    for (role, expected) in &record.inputs {
        let Some(path) = resolve(role) else { continue };
        let changed = match hash_file(&path) {
            Ok(h) => &h != expected,
            Err(_) => true,
        };
        if changed {
            return Ok(Some(Staleness::InputChanged {
                stage: stage.into(),
                role: role.clone(),
            }));
        }
    }
    Ok(None)
}

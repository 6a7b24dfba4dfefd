//! Versioned JSON checkpoints for a trained tiny backend and its prior head.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PriorHead, ScorerBackend, TinyBackend};
use crate::error::{BeragError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const KIND: &str = "tiny";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub backend: TinyBackend,
    pub prior_head: PriorHead,
}

impl Checkpoint {
    pub fn new(backend: TinyBackend, prior_head: PriorHead) -> Result<Self> {
        let ck = Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: KIND.to_string(),
            backend,
            prior_head,
        };
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<()> {
        let bad = |e: BeragError| BeragError::Checkpoint(e.to_string());
        self.backend.validate().map_err(bad)?;
        self.prior_head.validate().map_err(bad)?;
        if self.prior_head.dim() != self.backend.embedding_dim() {
            return Err(BeragError::Checkpoint(format!(
                "prior head width {} does not match backend embedding width {}",
                self.prior_head.dim(),
                self.backend.embedding_dim()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses a checkpoint, checking the version before anything else.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| BeragError::Checkpoint(format!("not a checkpoint: {e}")))?;
        let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
        if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
            return Err(BeragError::Checkpoint(format!(
                "unsupported checkpoint format version {version:?}, expected {CHECKPOINT_FORMAT_VERSION}"
            )));
        }
        let kind = raw.get("kind").and_then(serde_json::Value::as_str);
        if kind != Some(KIND) {
            return Err(BeragError::Checkpoint(format!("unknown checkpoint kind {kind:?}")));
        }
        let ck: Self = serde_json::from_value(raw).map_err(|e| BeragError::Checkpoint(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }

    /// Writes via a sibling temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

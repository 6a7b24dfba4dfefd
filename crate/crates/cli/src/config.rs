//! Run configuration: TOML overrides, the config hash and the metadata
//! stamped on every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use berag::BeragError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Sections a config file may contain. Each overrides the struct of the
/// same name field by field.
const SECTIONS: &[&str] = &["kb", "train_scenario", "test_scenario", "needle", "model", "train", "decode"];

/// A parsed `--config` file. Values here win over command-line flags.
#[derive(Debug, Default)]
pub struct FileConfig {
    table: toml::Table,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::from(BeragError::Io(e)))?;
        let table: toml::Table =
            text.parse().map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        for (key, value) in &table {
            let ok = match key.as_str() {
                "seed" => value.as_integer().is_some_and(|s| s >= 0),
                k if SECTIONS.contains(&k) => value.is_table(),
                _ => false,
            };
            if !ok {
                return Err(Failure::usage(format!("config {}: unexpected entry `{key}`", path.display())));
            }
        }
        Ok(Self { table })
    }

    pub fn seed(&self, flag: u64) -> u64 {
        self.table
            .get("seed")
            .and_then(toml::Value::as_integer)
            .map_or(flag, |s| s as u64)
    }

    /// `base` with every key of `[section]` replaced. Unknown keys are an error.
    pub fn overlay<T: Serialize + DeserializeOwned>(&self, section: &str, base: T) -> Result<T, Failure> {
        let Some(table) = self.table.get(section).and_then(toml::Value::as_table) else {
            return Ok(base);
        };
        let mut value = serde_json::to_value(&base).map_err(BeragError::from)?;
        let obj = value.as_object_mut().expect("config sections are structs");
        for (key, v) in table {
            if !obj.contains_key(key) {
                return Err(Failure::usage(format!("config: unknown key `{section}.{key}`")));
            }
            obj.insert(key.clone(), serde_json::to_value(v).map_err(BeragError::from)?);
        }
        serde_json::from_value(value).map_err(|e| Failure::usage(format!("config [{section}]: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, Failure> {
    Ok(sha256_hex(&fs::read(path).map_err(BeragError::Io)?))
}

/// Identity of one run: what was asked for, with which inputs and seed.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub command: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

impl Meta {
    /// Hashes the resolved settings and the digests of the input files.
    /// Output locations and the thread count do not enter the hash.
    pub fn new(command: &'static str, seed: u64, settings: Value, inputs: &[(&str, &Path)]) -> Result<Self, Failure> {
        let mut digests = Map::new();
        for (name, path) in inputs {
            digests.insert((*name).to_string(), Value::String(file_digest(path)?));
        }
        // serde_json maps are sorted, so this text is canonical
        let canonical = json!({
            "command": command,
            "seed": seed,
            "settings": settings,
            "inputs": digests,
        })
        .to_string();
        Ok(Self {
            command,
            version: VERSION,
            config_hash: sha256_hex(canonical.as_bytes()),
            seed,
        })
    }

    pub fn csv_header(&self) -> String {
        format!(
            "# berag {} {} config_hash={} seed={}\n",
            self.version, self.command, self.config_hash, self.seed
        )
    }

    pub fn jsonl_header(&self) -> String {
        let mut line = json!({ "meta": self }).to_string();
        line.push('\n');
        line
    }
}

/// Where artifacts go: `--out-dir`, then `BERAG_REPORT_DIR`, then `reports`.
pub fn report_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("BERAG_REPORT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("reports"))
}

/// Writes atomically, creating the parent directory first.
pub fn write_artifact(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(BeragError::Io)?;
    }
    berag::write_atomic(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use berag::decoder::DecodeConfig;

    fn file(text: &str) -> FileConfig {
        FileConfig {
            table: text.parse().unwrap(),
        }
    }

    #[test]
    fn overlay_replaces_named_fields_only() {
        let cfg = file("[decode]\nk = 4\ntop_p_pruning = true\n");
        let d = cfg.overlay("decode", DecodeConfig::default()).unwrap();
        assert_eq!(d.k, 4);
        assert!(d.top_p_pruning);
        assert_eq!(d.max_new_tokens, DecodeConfig::default().max_new_tokens);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let cfg = file("[decode]\nkk = 4\n");
        let err = cfg.overlay("decode", DecodeConfig::default()).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn hash_depends_on_command_seed_and_settings() {
        let a = Meta::new("x", 1, json!({"k": 2}), &[]).unwrap();
        let b = Meta::new("x", 1, json!({"k": 2}), &[]).unwrap();
        let c = Meta::new("x", 2, json!({"k": 2}), &[]).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }
}

//! Bayesian ensemble retrieval-augmented generation at desk scale.
//!
//! Each retrieved document conditions its own next-token distribution; the
//! distributions are mixed with document posterior weights that start from a
//! learned prior and are updated token by token with Bayes' rule. The crate
//! contains the decoding engine, a concatenated-context baseline, end-to-end
//! ensemble fine-tuning, and a synthetic evaluation harness.

pub mod backend;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod training;

pub use error::{BeragError, Result};

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| error::usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

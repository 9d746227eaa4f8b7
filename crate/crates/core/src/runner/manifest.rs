//! Run manifest: what was run, with which resolved config, and checksums of
//! everything it wrote.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::output::write_atomic;

pub const MANIFEST_NAME: &str = "manifest.json";

/// How per-task random streams derive from the campaign seed.
pub const SEED_SCHEME: &str =
    "ChaCha8Rng::seed_from_u64(seed) with set_stream((segment << 48) | interval), one stream per (segment, interval)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub seed_scheme: String,
    /// The fully resolved configuration, as TOML.
    pub config: String,
    pub outputs: Vec<OutputEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: String) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            seed_scheme: SEED_SCHEME.into(),
            config,
            outputs: Vec::new(),
        }
    }

    /// Record files under `out_dir`; `relative` paths are listed in order.
    pub fn record(&mut self, out_dir: &Path, relative: &[String]) -> std::io::Result<()> {
        for rel in relative {
            let bytes = std::fs::read(out_dir.join(rel))?;
            self.outputs.push(OutputEntry { path: rel.clone(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
        }
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&out_dir.join(MANIFEST_NAME), text.as_bytes())
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

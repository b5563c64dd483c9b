use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::{CmdResult, Failure};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// SHA-256 of the configuration file, or of the effective settings when
    /// no file was given.
    pub config_hash: String,
    pub settings: serde_json::Value,
    /// Input path (as given) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    /// Whether a previous manifest in the same directory had identical
    /// config, inputs and seed, and if so whether its outputs matched.
    pub reproduces_previous: Option<bool>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> CmdResult<String> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Failure::io(path, e))
}

/// Wall-clock time, pinned by `SOURCE_DATE_EPOCH` when set.
pub fn timestamp() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0));
    pinned.unwrap_or_else(Utc::now).to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub struct ManifestBuilder {
    command: String,
    config_hash: String,
    settings: serde_json::Value,
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
    started_at: String,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_hash: String, settings: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            settings,
            inputs: BTreeMap::new(),
            seed,
            started_at: timestamp(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CmdResult<()> {
        let h = hash_file(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Hashes `outputs` (names within `out_dir`) and writes the manifest.
    pub fn finish(self, out_dir: &Path, outputs: &[String]) -> CmdResult<RunManifest> {
        let mut hashes = BTreeMap::new();
        for name in outputs {
            hashes.insert(name.clone(), hash_file(&out_dir.join(name))?);
        }
        let path = out_dir.join(MANIFEST_FILE);
        let previous: Option<RunManifest> = fs::read(&path).ok().and_then(|b| serde_json::from_slice(&b).ok());
        let reproduces_previous = previous
            .filter(|p| p.command == self.command && p.config_hash == self.config_hash && p.inputs == self.inputs && p.seed == self.seed)
            .map(|p| p.outputs == hashes);
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config_hash,
            settings: self.settings,
            inputs: self.inputs,
            outputs: hashes,
            seed: self.seed,
            started_at: self.started_at,
            finished_at: timestamp(),
            reproduces_previous,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Io(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
        Ok(manifest)
    }
}

//! Run manifests: every CLI invocation records its resolved configuration,
//! seeds, input hashes and timing next to its outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DataError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Fully resolved configuration after flag/file merging.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path -> sha256 of contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub elapsed_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, DataError> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config,
                seeds: Vec::new(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                elapsed_seconds: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seeds.push(seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self, DataError> {
        self.manifest
            .inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.outputs.push(path.display().to_string());
        self
    }

    /// Finalizes timing and writes the manifest atomically.
    pub fn write(mut self, path: &Path) -> Result<RunManifest, DataError> {
        self.manifest.elapsed_seconds = self.started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| DataError::Io(std::io::Error::other(e)))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_hashes_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, b"hello").unwrap();
        let mut b = ManifestBuilder::new("train", serde_json::json!({"lr": 0.001}));
        b.seed(7);
        b.input(&input).unwrap();
        b.output(&dir.path().join("model.ckpt"));
        let path = dir.path().join("manifest.json");
        let written = b.write(&path).unwrap();
        assert_eq!(
            written.inputs[&input.display().to_string()],
            // sha256("hello")
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        let loaded: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(loaded.command, "train");
        assert_eq!(loaded.seeds, vec![7]);
        assert_eq!(loaded.config["lr"], 0.001);
    }
}

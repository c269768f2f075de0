use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written next to every command output. Everything except the timing fields
/// determines the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    /// Input artifact path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → sha256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_seconds: 0.0,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::ArtifactMismatch {
            what: format!("manifest {}", p.display()),
            expected: "a readable manifest".into(),
            found: e.to_string(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Hashes `dir/name` into the outputs.
    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.to_string(), sha256_file(&dir.join(name))?);
        Ok(())
    }

    /// Checks that `dir/name` still hashes to what this manifest recorded and
    /// returns that hash.
    pub fn verify_output(&self, dir: &Path, name: &str) -> Result<String> {
        let expected = self.outputs.get(name).ok_or_else(|| Error::ArtifactMismatch {
            what: format!("{} in {}", name, dir.display()),
            expected: "an entry in the manifest".into(),
            found: "none".into(),
        })?;
        let found = sha256_file(&dir.join(name))?;
        if &found != expected {
            return Err(Error::ArtifactMismatch {
                what: format!("{}", dir.join(name).display()),
                expected: expected.clone(),
                found,
            });
        }
        Ok(found)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"hello").unwrap();
        let mut m = RunManifest::new("test", &RunConfig::default());
        m.record_output(dir.path(), "a.txt").unwrap();
        m.write(dir.path()).unwrap();
        let m = RunManifest::load(dir.path()).unwrap();
        assert!(m.verify_output(dir.path(), "a.txt").is_ok());
        fs::write(dir.path().join("a.txt"), b"hellO").unwrap();
        let err = m.verify_output(dir.path(), "a.txt").unwrap_err();
        assert!(matches!(err, Error::ArtifactMismatch { .. }));
        assert_eq!(err.exit_code(), 3);
    }
}

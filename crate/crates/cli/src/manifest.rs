//! Run manifest: configuration snapshot, master seed, and SHA-256 hashes of
//! every artifact a command produced.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub master_seed: u64,
    pub elapsed_seconds: f64,
    pub config_toml: String,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl Manifest {
    pub fn new(command: &str, master_seed: u64, config_toml: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            master_seed,
            elapsed_seconds: 0.0,
            config_toml,
            artifacts: Vec::new(),
        }
    }

    /// Hash a file already written to `dir` and record it under its name.
    pub fn record(&mut self, dir: &Path, name: &str) -> anyhow::Result<()> {
        let bytes = std::fs::read(dir.join(name))?;
        self.artifacts.push(ArtifactEntry {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Append this command's manifest as `manifest_<command>.toml`.
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(format!("manifest_{}.toml", self.command));
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, command: &str) -> anyhow::Result<Self> {
        let path = dir.join(format!("manifest_{command}.toml"));
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_value() {
        // FIPS 180-2 test vector for "abc"
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.bin"), b"hello").unwrap();
        let mut m = Manifest::new("nature", 7, "a = 1\n".into());
        m.record(dir.path(), "x.bin").unwrap();
        m.elapsed_seconds = 1.5;
        m.save(dir.path()).unwrap();
        let back = Manifest::load(dir.path(), "nature").unwrap();
        assert_eq!(back.artifacts, m.artifacts);
        assert_eq!(back.master_seed, 7);
    }
}

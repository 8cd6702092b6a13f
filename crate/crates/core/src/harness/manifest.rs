//! Run manifests: every artifact under an output directory with its
//! SHA-256 content hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub config: serde_json::Value,
    /// Command-specific facts worth keeping next to the outputs.
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
    /// Relative path to hex SHA-256, in path order.
    pub artifacts: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes every file below `dir` except a top-level manifest.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Corpus(format!("walking {}: {e}", dir.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays below its root");
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(key, hash_file(entry.path())?);
    }
    Ok(out)
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, epsilon: Option<f64>, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            epsilon,
            config,
            notes: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.notes.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Hashes the finished output directory and writes the manifest into it.
    pub fn finish(mut self, out: &Path) -> Result<RunManifest> {
        self.artifacts = hash_tree(out)?;
        write_json(&out.join(MANIFEST_FILE), &self)?;
        Ok(self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_hash_skips_manifest_and_is_ordered() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("b")).unwrap();
        fs::write(dir.path().join("b/x.txt"), "x").unwrap();
        fs::write(dir.path().join("a.txt"), "abc").unwrap();
        let m = RunManifest::new("demo", Some(1), None, serde_json::json!({})).finish(dir.path()).unwrap();
        assert_eq!(m.artifacts.keys().collect::<Vec<_>>(), ["a.txt", "b/x.txt"]);
        assert_eq!(
            m.artifacts["a.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let again = RunManifest::new("demo", Some(1), None, serde_json::json!({})).finish(dir.path()).unwrap();
        assert_eq!(m, again);
    }
}

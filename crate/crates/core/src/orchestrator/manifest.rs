use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of a directory tree: relative paths and file hashes in sorted order.
pub fn dir_sha256(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update(file_sha256(&dir.join(&rel))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub checkpoint: Option<String>,
    /// Input path (or logical name) to content hash.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
}

/// Record of one output directory: configuration, per-stage inputs and
/// checkpoints, every emitted file with its hash, and metric reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Path relative to the output directory to SHA-256.
    pub files: BTreeMap<String, String>,
    pub reports: Vec<MetricReport>,
}

impl RunManifest {
    pub fn load_or_default(out_dir: &Path) -> Result<Self> {
        let p = out_dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let p = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    /// Hash `path` (inside `out_dir`) and list it.
    pub fn record_file(&mut self, out_dir: &Path, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        self.files.insert(rel, file_sha256(path)?);
        Ok(())
    }

    pub fn record_stage(&mut self, name: &str, record: StageRecord) {
        self.stages.insert(name.to_string(), record);
    }
}

/// Exclusive ownership of an output directory for the lifetime of the guard.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (remove {} if stale)",
                out_dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_round_trip_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, "abc").unwrap();
        let mut m = RunManifest::default();
        m.record_file(dir.path(), &f).unwrap();
        assert_eq!(
            m.files["a.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load_or_default(dir.path()).unwrap(), m);
        let h1 = dir_sha256(dir.path()).unwrap();
        std::fs::write(&f, "abd").unwrap();
        assert_ne!(dir_sha256(dir.path()).unwrap(), h1);
    }
}

//! Output files: written as `<name>.partial`, renamed when their stage succeeds, and hashed.

use std::path::{Path, PathBuf};

use rbridge::io::{Format, Table};
use rbridge::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub stage: String,
    /// Path relative to the artifact root.
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes through a sibling temporary file so readers never see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Artifacts {
    root: PathBuf,
    pending: Vec<Record>,
    pub records: Vec<Record>,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Artifacts { root: root.into(), pending: Vec::new(), records: Vec::new() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes `rel.partial`; the file takes its final name on [`Artifacts::commit`].
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        if self.pending.iter().chain(&self.records).any(|r| r.path == rel) {
            return Err(Error::Config(format!("artifact `{rel}` is written twice")));
        }
        let path = self.path(rel);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(partial(&path), bytes)?;
        self.pending.push(Record { stage: String::new(), path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    pub fn write_table(&mut self, rel: &str, table: &Table, format: Format) -> Result<()> {
        self.write(rel, table.render(format)?.as_bytes())
    }

    /// Renames every pending file to its final name and records it under `stage`.
    pub fn commit(&mut self, stage: &str) -> Result<Vec<Record>> {
        let mut done = Vec::new();
        for mut r in std::mem::take(&mut self.pending) {
            let path = self.path(&r.path);
            std::fs::rename(partial(&path), &path)?;
            r.stage = stage.to_string();
            done.push(r);
        }
        self.records.extend(done.iter().cloned());
        Ok(done)
    }

    /// Re-hashes every committed artifact and fails if one changed.
    pub fn check_unchanged(&self) -> Result<()> {
        for r in &self.records {
            let bytes = std::fs::read(self.path(&r.path))?;
            if sha256_hex(&bytes) != r.sha256 {
                return Err(Error::Format(format!("artifact `{}` from stage `{}` was modified", r.path, r.stage)));
            }
        }
        Ok(())
    }
}

//! Output directory with a hash manifest of every artifact written.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_ECHO: &str = "config.txt";

pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Io(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.path(rel);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.record(rel);
        Ok(path)
    }

    /// Registers a file produced by another writer.
    pub fn record(&mut self, rel: &str) {
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
    }

    /// Writes `<sha256> <relpath>` lines sorted by path.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.written.sort();
        let mut out = String::new();
        for rel in &self.written {
            let path = self.path(rel);
            let bytes = fs::read(&path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
            out.push_str(&hex::encode(Sha256::digest(&bytes)));
            out.push(' ');
            out.push_str(rel);
            out.push('\n');
        }
        let path = self.path(MANIFEST);
        fs::write(&path, out).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

//! Run directories: every file a command writes is listed, with its hash,
//! in the directory's `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use mmrefine::sim::export::{hash_file, FileEntry};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RUN_FORMAT: &str = "mmrefine-run v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub files: Vec<FileEntry>,
}

/// Writes files below one directory and remembers their relative paths.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn bytes(&mut self, rel: &str, data: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::write(parent, e))?;
        }
        fs::write(&path, data).map_err(|e| CliError::write(&path, e))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).expect("output types serialize") + "\n";
        self.bytes(rel, text.as_bytes())
    }

    /// Hashes everything written so far into `manifest.json`.
    pub fn finish(mut self, command: &str) -> Result<RunManifest, CliError> {
        self.files.sort();
        self.files.dedup();
        let mut files = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let path = self.dir.join(rel);
            let (bytes, sha256) = hash_file(&path).map_err(|e| CliError::write(&path, e))?;
            files.push(FileEntry {
                path: rel.clone(),
                bytes,
                sha256,
            });
        }
        let manifest = RunManifest {
            format: RUN_FORMAT.to_string(),
            command: command.to_string(),
            files,
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| CliError::write(&path, e))?;
        Ok(manifest)
    }
}

//! Output directory bookkeeping and the run manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use funcreserve::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    config_sha256: String,
    inputs: &'a [FileEntry],
    outputs: &'a [FileEntry],
}

/// Every file a run writes goes through here so the manifest can list it.
pub struct Outputs {
    dir: PathBuf,
    inputs: Vec<FileEntry>,
    written: Vec<FileEntry>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            written: Vec::new(),
        })
    }

    /// Read an input file and record its hash.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        });
        Ok(bytes)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        log::info!("wrote {}", self.dir.join(name).display());
        self.written.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    /// Render into memory first so a failed writer leaves no partial file.
    pub fn write_with<F>(&mut self, name: &str, render: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// `manifest.json`, which lists everything written before it.
    pub fn finish(self, subcommand: &str, seed: u64, config_raw: &[u8]) -> Result<()> {
        let manifest = Manifest {
            tool: "funcreserve",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed,
            config_sha256: sha256_hex(config_raw),
            inputs: &self.inputs,
            outputs: &self.written,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(self.dir.join("manifest.json"), bytes)?;
        Ok(())
    }
}

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Output directory of one command invocation. Tracks every file written so
/// the run manifest can list them.
pub struct RunDir {
    root: PathBuf,
    command: String,
    produced: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ProducedFile {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'static str,
    config: &'static str,
    files: Vec<ProducedFile>,
}

impl RunDir {
    pub fn create(root: PathBuf, command: &str) -> anyhow::Result<Self> {
        fs::create_dir_all(&root).map_err(|e| sarcscore::Error::io(&root, e))?;
        Ok(RunDir { root, command: command.to_string(), produced: Vec::new() })
    }

    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.root.join(name)
    }

    /// Creates (if needed) and returns a subdirectory.
    pub fn subdir(&self, name: &str) -> anyhow::Result<PathBuf> {
        let p = self.root.join(name);
        fs::create_dir_all(&p).map_err(|e| sarcscore::Error::io(&p, e))?;
        Ok(p)
    }

    /// Marks a file under the run directory as produced by this run.
    pub fn record(&mut self, path: impl Into<PathBuf>) {
        self.produced.push(path.into());
    }

    pub fn write_json<T: Serialize>(&mut self, name: impl AsRef<Path>, value: &T) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text).map_err(|e| sarcscore::Error::io(&path, e))?;
        self.record(path.clone());
        Ok(path)
    }

    /// Writes the resolved configuration, headed by the invocation that produced it.
    pub fn write_config(&mut self, config: &RunConfig) -> anyhow::Result<()> {
        let argv: Vec<String> = std::env::args().collect();
        let text = format!("# {}\n{}", argv.join(" "), config.to_toml()?);
        let path = self.path(CONFIG_SNAPSHOT);
        fs::write(&path, text).map_err(|e| sarcscore::Error::io(&path, e))?;
        self.record(path);
        Ok(())
    }

    /// Writes `run_manifest.json` listing every recorded file with its digest.
    pub fn finish(self) -> anyhow::Result<PathBuf> {
        let mut files = Vec::with_capacity(self.produced.len());
        for p in &self.produced {
            let bytes = fs::metadata(p).map_err(|e| sarcscore::Error::io(p, e))?.len();
            let rel = p.strip_prefix(&self.root).unwrap_or(p);
            files.push(ProducedFile { path: rel.display().to_string(), bytes, sha256: sha256_file(p)? });
        }
        let manifest = RunManifest {
            command: &self.command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config: CONFIG_SNAPSHOT,
            files,
        };
        let path = self.root.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| sarcscore::Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut file = fs::File::open(path).map_err(|e| sarcscore::Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| sarcscore::Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Digest of an optional file, `None` when no path is given.
pub fn optional_digest(path: Option<&Path>) -> anyhow::Result<Option<String>> {
    path.map(|p| sha256_file(p).with_context(|| format!("hashing {}", p.display()))).transpose()
}

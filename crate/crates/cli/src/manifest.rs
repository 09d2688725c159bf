//! `manifest.json`: what produced an output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: Config,
    /// The run seed and the sub-streams drawn from it.
    pub seeds: BTreeMap<String, u64>,
    pub source_hash: String,
    pub version: String,
    pub output_dir: PathBuf,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, relative to `output_dir`.
    pub outputs: BTreeMap<String, String>,
    /// Command-specific results (losses, weights, counts).
    pub results: serde_json::Value,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Output directory whose files are hashed into the manifest as they are
/// written.
pub struct OutDir {
    pub root: PathBuf,
    pub written: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.written.insert(rel.to_string(), hex::encode(Sha256::digest(contents.as_bytes())));
        Ok(path)
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<()> {
        manifest.output_dir = self.root.clone();
        manifest.outputs = self.written;
        manifest.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
        let path = self.root.join("manifest.json");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

impl RunManifest {
    pub fn new(config_path: Option<&Path>, config: Config) -> Self {
        Self {
            command: std::env::args().collect(),
            config_path: config_path.map(Path::to_path_buf),
            seeds: BTreeMap::from([("seed".to_string(), config.seed)]),
            config,
            source_hash: env!("ABNET_SOURCE_HASH").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            output_dir: PathBuf::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            results: serde_json::Value::Null,
            started_unix: now_unix(),
            finished_unix: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }
}

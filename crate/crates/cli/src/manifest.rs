use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Self { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(&bytes)) })
    }
}

/// Everything needed to rerun a command: the resolved configuration with
/// defaults filled in, seeds, and hashes of every file read or written.
///
/// `timing` is the only field that changes between identical runs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub results: Value,
    pub timing: Timing,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub elapsed_secs: f64,
    pub threads: usize,
}

pub struct ManifestBuilder {
    command: String,
    config: Value,
    seeds: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    results: Value,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            config: Value::Null,
            seeds: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: Value::Null,
            start: Instant::now(),
        }
    }

    pub fn config(&mut self, config: impl Serialize) -> &mut Self {
        self.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    pub fn seeds(&mut self, seeds: Value) -> &mut Self {
        self.seeds = seeds;
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn results(&mut self, results: impl Serialize) -> &mut Self {
        self.results = serde_json::to_value(results).expect("results serialize");
        self
    }

    /// Hashes the files (skipping sidecars that do not exist) and writes the
    /// manifest as pretty JSON.
    pub fn write(&self, path: &Path) -> Result<()> {
        let hash_all = |paths: &[PathBuf]| -> Result<Vec<FileRecord>> {
            paths.iter().filter(|p| p.exists()).map(|p| FileRecord::of(p)).collect()
        };
        let manifest = RunManifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION"),
            config: self.config.clone(),
            seeds: self.seeds.clone(),
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            results: self.results.clone(),
            timing: Timing {
                elapsed_secs: self.start.elapsed().as_secs_f64(),
                threads: rayon::current_num_threads(),
            },
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        simnet_core::dataio::write_atomic(path, text.as_bytes())
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

/// `<path>.manifest.json`
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

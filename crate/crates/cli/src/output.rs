//! Atomic file output and the run manifest.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Write `bytes` to `path` through a sibling temp file and a rename, so the
/// target is either the complete new content or untouched.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_error(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_error(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_error(path, e))?;
    tmp.persist(path).map_err(|e| io_error(path, e.error))?;
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

/// Everything needed to repeat a run: the resolved config, the seed, the
/// outputs and where the time went.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: u64,
    pub threads: usize,
    /// Resolved config as TOML, all defaults materialized.
    pub config: String,
    pub artifacts: Vec<String>,
    pub timings: BTreeMap<String, f64>,
    pub complete: bool,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: String) -> Self {
        Self {
            command: command.to_owned(),
            build: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            seed,
            threads: rayon::current_num_threads(),
            config,
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            complete: false,
        }
    }
}

/// Output directory plus the manifest that indexes it.
pub struct OutDir {
    root: PathBuf,
    pub manifest: RunManifest,
}

impl OutDir {
    pub fn create(root: &Path, manifest: RunManifest) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| io_error(root, e))?;
        let out = Self {
            root: root.to_owned(),
            manifest,
        };
        write_atomic(&out.root.join("config.toml"), out.manifest.config.as_bytes())?;
        out.save_manifest()?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        self.manifest.artifacts.push(name.to_owned());
        Ok(path)
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        self.manifest.timings.insert(phase.to_owned(), start.elapsed().as_secs_f64());
        out
    }

    pub fn save_manifest(&self) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.path("manifest.json"), json.as_bytes())
    }

    pub fn finish(mut self) -> Result<RunManifest, CliError> {
        self.manifest.complete = true;
        self.save_manifest()?;
        Ok(self.manifest)
    }
}

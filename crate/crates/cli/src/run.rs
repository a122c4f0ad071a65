//! Run directories, the lockfile and the `run.json` provenance record.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;

use crate::config::{canonical_json, digest, RunConfig, SCHEMA_VERSION};

pub const LOCK_FILE: &str = "run.lock";
pub const RUN_FILE: &str = "run.json";

/// Exclusive ownership of an output directory for the life of the value.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates `path` if needed and takes its lock; fails if another run
    /// holds it.
    pub fn acquire(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)
            .with_context(|| format!("{}: cannot create output directory", path.display()))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "{}: output directory is locked by another run (remove {LOCK_FILE} if stale)",
                    path.display()
                )
            }
            Err(e) => return Err(e).with_context(|| format!("{}", lock.display())),
        }
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Inputs and settings that determine a run, hashed to name its directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunKey<'a> {
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub inputs: Vec<(String, String)>,
}

impl RunKey<'_> {
    pub fn hash(&self) -> String {
        digest(&canonical_json(
            &serde_json::to_value(self).expect("key serializes"),
        ))
    }

    /// `<base>/<command>-<first 12 hex digits of the hash>`.
    pub fn dir_under(&self, base: &Path) -> PathBuf {
        base.join(format!("{}-{}", self.command, &self.hash()[..12]))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub command: String,
    pub config_hash: String,
    pub run_hash: String,
    pub config: RunConfig,
    /// Named input paths, as given.
    pub inputs: Vec<(String, String)>,
    /// Artifact file names relative to the run directory.
    pub outputs: Vec<String>,
    /// Command-specific results.
    pub results: Value,
}

impl RunRecord {
    pub fn new(key: &RunKey<'_>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: key.command.to_string(),
            config_hash: key.config.hash(),
            run_hash: key.hash(),
            config: key.config.clone(),
            inputs: key.inputs.clone(),
            outputs: Vec::new(),
            results: Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("{}", path.display()))?;
        Ok(path)
    }
}

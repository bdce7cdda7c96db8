use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

const LOCK: &str = ".fkvi.lock";

/// A file produced by a command, named relative to the output directory.
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

pub struct Outcome {
    pub results: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    /// One-line human summary.
    pub headline: String,
}

/// Output directory held under an exclusive lock file for the duration of
/// a run.
pub struct OutDir {
    dir: PathBuf,
}

impl OutDir {
    pub fn lock(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let lock = dir.join(LOCK);
        OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            CliError::Io(format!("output directory {} is in use ({}: {e})", dir.display(), lock.display()))
        })?;
        Ok(OutDir { dir: dir.to_path_buf() })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?);
        w.write_all(bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, command: &str, cfg: &ExperimentConfig, outcome: &Outcome) -> Result<String, CliError> {
        for a in &outcome.artifacts {
            self.write(&a.name, &a.bytes)?;
        }
        let summary = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": config_hash(cfg),
            "config": cfg,
            "results": outcome.results,
            "artifacts": outcome.artifacts.iter().map(|a| a.name.as_str()).collect::<Vec<_>>(),
        });
        let mut text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write("summary.json", text.as_bytes())?;
        Ok(outcome.headline.clone())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK));
    }
}

/// SHA-256 of the compact JSON form of the resolved config.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

pub fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("results serialize")
}

/// Minimal CSV builder; floats use the shortest round-trip form.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[String]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Csv { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn finish(self, name: &str) -> Artifact {
        Artifact { name: name.to_string(), bytes: self.text.into_bytes() }
    }
}

/// Quotes a free-text cell.
pub fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

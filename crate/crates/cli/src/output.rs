//! Run directories: atomic file writes and a manifest of digests.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use granular_core::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub struct RunDir {
    path: PathBuf,
    started: DateTime<Utc>,
    files: Vec<(String, String)>,
}

impl RunDir {
    /// Creates `base/{kind}-{timestamp}-seed{seed}`, suffixing a counter if
    /// the name is taken.
    pub fn create(base: &Path, kind: &str, seed: u64) -> Result<Self> {
        let started = Utc::now();
        let stem = format!("{kind}-{}-seed{seed}", started.format("%Y%m%dT%H%M%SZ"));
        std::fs::create_dir_all(base)?;
        let mut path = base.join(&stem);
        let mut n = 1;
        loop {
            match std::fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = base.join(format!("{stem}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Self { path, started, files: Vec::new() })
    }

    /// Writes `rel` through a temporary file in the same directory and
    /// records its SHA-256.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let target = self.path.join(rel);
        let dir = target.parent().unwrap_or(&self.path);
        std::fs::create_dir_all(dir)?;
        write_atomic(dir, &target, bytes)?;
        self.files.push((rel.to_string(), hex(&Sha256::digest(bytes))));
        Ok(())
    }

    pub fn write_json(&mut self, rel: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Writes `manifest.json` last. Timestamps and wall time live only here.
    pub fn finish(self, config: Value, seed: u64) -> Result<PathBuf> {
        let ended = Utc::now();
        let digests: serde_json::Map<String, Value> =
            self.files.iter().map(|(f, d)| (f.clone(), Value::String(d.clone()))).collect();
        let manifest = json!({
            "program": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config": config,
            "started": self.started.to_rfc3339(),
            "ended": ended.to_rfc3339(),
            "wall_seconds": (ended - self.started).num_milliseconds() as f64 / 1000.0,
            "sha256": digests,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.path, &self.path.join("manifest.json"), text.as_bytes())?;
        Ok(self.path)
    }
}

fn write_atomic(dir: &Path, target: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(target).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

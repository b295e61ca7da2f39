//! Run directories and the manifest that closes each of them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const OUT_ENV: &str = "SHELLFLOW_OUT";

#[derive(Debug, Serialize)]
pub struct WallClock {
    pub started: String,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub pass: bool,
    pub exit_code: i32,
    pub failed: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// File name to lowercase hex SHA-256.
    pub files: BTreeMap<String, String>,
    pub summary: Summary,
    pub wall_clock: WallClock,
}

pub struct RunDir {
    path: PathBuf,
    files: BTreeMap<String, String>,
    started: chrono::DateTime<chrono::Utc>,
    clock: Instant,
}

impl RunDir {
    /// `<root>/runs/<timestamp>-<seed>/`, where the root is `$SHELLFLOW_OUT`
    /// or the working directory. A numeric suffix resolves collisions.
    pub fn create(seed: u64) -> std::io::Result<Self> {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        let started = chrono::Utc::now();
        let stem = format!("{}-{seed}", started.format("%Y%m%dT%H%M%S%.3fZ"));
        let runs = root.join("runs");
        fs::create_dir_all(&runs)?;
        let mut path = runs.join(&stem);
        let mut k = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = runs.join(format!("{stem}-{k}"));
                    k += 1;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            path,
            files: BTreeMap::new(),
            started,
            clock: Instant::now(),
        })
    }

    /// Writes `name` from an in-memory buffer and records its digest.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let mut f = fs::File::create(self.path.join(name))?;
        f.write_all(bytes)?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// Writes `manifest.json`; consumes the run so it happens once.
    pub fn finish(self, command: &str, cfg: &Config, summary: Summary) -> std::io::Result<PathBuf> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config: cfg.entries.clone(),
            files: self.files,
            summary,
            wall_clock: WallClock {
                started: self.started.to_rfc3339(),
                elapsed_seconds: self.clock.elapsed().as_secs_f64(),
            },
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.path.join("manifest.json"), json + "\n")?;
        Ok(self.path)
    }
}

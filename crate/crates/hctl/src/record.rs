use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::{HarnessError, Result};

/// How per-seed randomness is derived, written into every record.
pub const RNG_SCHEME: &str = "ChaCha8 keyed by (master seed, stream label, seed index); \
stream labels: training=1 init_noise=2 pin=3 inner=4 recon=5 observation=6 oracle=7 data=8";

/// Everything a run produced. `config` is fully resolved, so replaying it
/// reproduces every field except `timings` and `threads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub hctl_version: String,
    pub task: String,
    pub config: ExperimentConfig,
    pub rng: String,
    /// Per-seed metrics, sorted by seed index.
    pub seeds: Vec<Value>,
    pub summary: Value,
    /// Mean model calls per chain, by method label.
    pub nfe: BTreeMap<String, f64>,
    /// Output files relative to the output directory.
    pub artifacts: Vec<String>,
    pub timings: BTreeMap<String, f64>,
    pub threads: usize,
}

impl ResultRecord {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            hctl_version: env!("CARGO_PKG_VERSION").to_string(),
            task: config.task.map(|t| t.name().to_string()).unwrap_or_default(),
            config: config.clone(),
            rng: RNG_SCHEME.to_string(),
            seeds: Vec::new(),
            summary: Value::Null,
            nfe: BTreeMap::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            threads: rayon::current_num_threads(),
        }
    }

    /// The record with run-environment fields cleared, for replay comparisons.
    pub fn reproducible_part(&self) -> Self {
        Self { timings: BTreeMap::new(), threads: 0, ..self.clone() }
    }
}

/// Writes files under the output directory and remembers their names.
pub struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn note(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
        self.note(name);
        Ok(())
    }

    pub fn bytes(&mut self, name: &str, body: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
        self.note(name);
        Ok(())
    }

    /// Writes a CSV with a fixed header. Floats use Rust's shortest
    /// round-trip formatting, so replays compare byte for byte.
    pub fn csv<R: AsRef<[String]>>(&mut self, name: &str, header: &[&str], rows: &[R]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| with_path(e, &path))?;
        w.write_record(header).map_err(|e| with_path(e, &path))?;
        for r in rows {
            w.write_record(r.as_ref()).map_err(|e| with_path(e, &path))?;
        }
        w.flush().map_err(|e| HarnessError::io(&path, e))?;
        self.note(name);
        Ok(())
    }

    pub fn finish(self, mut record: ResultRecord) -> Result<ResultRecord> {
        record.artifacts = self.written.clone();
        record.artifacts.push("results.json".into());
        let path = self.path("results.json");
        let body = serde_json::to_string_pretty(&record).expect("record serializes");
        fs::write(&path, body + "\n").map_err(|e| HarnessError::io(&path, e))?;
        Ok(record)
    }
}

fn with_path(e: csv::Error, path: &Path) -> HarnessError {
    match HarnessError::from(e) {
        HarnessError::Io { source, .. } => HarnessError::io(path, source),
        other => other,
    }
}

/// Formats a row of CSV cells.
#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($x.to_string()),*] };
}

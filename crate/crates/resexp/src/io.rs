//! Model files, CSV tables and run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use resexp_core::data::SyntheticTask;
use resexp_core::netmodel::{NetworkSpec, NetworkState};

use crate::error::{CliError, Result};

pub const MODEL_FORMAT: &str = "resexp-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub task: Option<SyntheticTask>,
    pub spec: NetworkSpec,
    pub state: NetworkState,
}

impl ModelFile {
    pub fn new(
        spec: &NetworkSpec,
        state: &NetworkState,
        task: Option<&SyntheticTask>,
        seed: u64,
    ) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            seed,
            task: task.cloned(),
            spec: spec.clone(),
            state: state.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<ModelFile> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::io(format!("reading model {}", path.display()), e))?;
        let m: ModelFile = serde_json::from_slice(&bytes).map_err(|e| CliError::Format {
            what: "model file",
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(CliError::Format {
                what: "model file",
                path: path.to_path_buf(),
                message: format!("unsupported format {} v{}", m.format, m.version),
            });
        }
        m.spec.validate()?;
        Ok(m)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

/// Formats a float for CSV: shortest exact form, `NaN`/`inf` spelled out.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a header plus rows of preformatted fields.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        debug_assert_eq!(r.len(), header.len());
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reproducibility record of one command. Timestamps are the only
/// run-dependent fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_sha256: Option<String>,
    pub seeds: Vec<u64>,
    pub version: String,
    pub workers: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl RunManifest {
    pub fn start(command: &str, config: Option<(&Path, &[u8])>, seeds: Vec<u64>, workers: usize) -> Self {
        RunManifest {
            command: command.into(),
            config_path: config.map(|(p, _)| p.to_path_buf()),
            config_sha256: config.map(|(_, b)| sha256_hex(b)),
            seeds,
            version: env!("CARGO_PKG_VERSION").into(),
            workers,
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    /// Checks the stored digest against the config file as it is now.
    pub fn verify_config(&self) -> Result<bool> {
        match (&self.config_path, &self.config_sha256) {
            (Some(p), Some(d)) => {
                let bytes = std::fs::read(p)
                    .map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
                Ok(&sha256_hex(&bytes) == d)
            }
            _ => Ok(true),
        }
    }

    pub fn finish(mut self, out_dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        self.finished_unix = unix_now();
        self.outputs = outputs;
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        write_file(&out_dir.join(MANIFEST_NAME), text.as_bytes())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_digest_matches_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, b"seed = 3\n").unwrap();
        let bytes = std::fs::read(&cfg).unwrap();
        let m = RunManifest::start("train", Some((&cfg, &bytes)), vec![3], 1);
        assert!(m.verify_config().unwrap());
        std::fs::write(&cfg, b"seed = 4\n").unwrap();
        assert!(!m.verify_config().unwrap());
    }

    #[test]
    fn model_file_round_trips_bit_exact() {
        let task = SyntheticTask::default_mixture(1);
        let spec = task.network_spec(2, 8).unwrap();
        let state = resexp_core::train::initial_state(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        ModelFile::new(&spec, &state, Some(&task), 5).write(&p).unwrap();
        let back = ModelFile::read(&p).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.spec, spec);
    }
}

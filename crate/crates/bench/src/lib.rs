//! Experiment harness: dataset generation, calibration, training with early
//! stopping, equivariance-weight sweeps, evaluation and benchmark tables.
//!
//! Every stage reads the same experiment config and is fully determined by
//! its seed, so repeated pipelines reproduce their metric files exactly.

pub mod calibrate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod report;
pub mod sweep;
pub mod tensorfile;
pub mod train;

use std::path::{Path, PathBuf};

use ssct_core::CoreError;
use ssct_nnkit::NnError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error("{0} already exists and is not empty; pass --force to overwrite")]
    OutputExists(PathBuf),
    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },
    #[error("checkpoint does not match the configured network: {0}")]
    CheckpointMismatch(String),
    #[error("training diverged at epoch {epoch}: {reason}; last good checkpoint kept")]
    Diverged { epoch: usize, reason: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl BenchError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Derives an independent seed for a named stream; a SplitMix64 finaliser
/// over the parent seed and the stream's tag and index.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.bytes().chain(index.to_le_bytes()) {
        h = splitmix(h ^ b as u64);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`,
/// in which case its contents are removed first.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<(), BenchError> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| BenchError::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(BenchError::OutputExists(dir.to_path_buf()));
            }
            std::fs::remove_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), BenchError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| BenchError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

pub fn read_text(path: &Path, what: &'static str) -> Result<String, BenchError> {
    if !path.exists() {
        return Err(BenchError::Missing {
            what,
            path: path.to_path_buf(),
        });
    }
    std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

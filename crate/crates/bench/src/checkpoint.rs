//! Network checkpoints: a directory holding `network.toml` and one tensor
//! file per parameter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssct_nnkit::{NamedParam, Tensor, UNet};

use crate::config::NetworkConfig;
use crate::dataset::read_tensor;
use crate::tensorfile::{Payload, TensorFile};
use crate::{read_text, write_text, BenchError};

pub const MANIFEST: &str = "network.toml";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    network: NetworkConfig,
    params: Vec<ParamEntry>,
}

fn tmp_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    dir.with_file_name(name)
}

/// Writes `net` to `dir`, replacing any previous checkpoint only once the
/// new one is complete.
pub fn save(dir: &Path, net: &UNet, network: &NetworkConfig) -> Result<(), BenchError> {
    let tmp = tmp_path(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| BenchError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| BenchError::io(&tmp, e))?;
    let mut params = Vec::new();
    for p in net.params() {
        let dims = p.value.shape().iter().map(|&d| d as u64).collect();
        TensorFile::new(dims, Payload::F64(p.value.data().to_vec()))?
            .write(&tmp.join(format!("{}.ssct", p.name)))?;
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        network: network.clone(),
        params,
    };
    write_text(&tmp.join(MANIFEST), &toml::to_string(&manifest).expect("manifest serialises"))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| BenchError::io(dir, e))
}

/// Loads a checkpoint, requiring it to match `expected`.
pub fn load(dir: &Path, expected: &NetworkConfig) -> Result<UNet, BenchError> {
    let text = read_text(&dir.join(MANIFEST), "checkpoint (run `ssct train`)")?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| BenchError::Format(e.to_string()))?;
    if &manifest.network != expected {
        return Err(BenchError::CheckpointMismatch(format!(
            "checkpoint has {:?}, config asks for {:?}",
            manifest.network, expected
        )));
    }
    let mut params = Vec::new();
    for entry in manifest.params {
        let t = read_tensor(&dir.join(format!("{}.ssct", entry.name)), "checkpoint parameter")?;
        let dims: Vec<usize> = t.dims().iter().map(|&d| d as usize).collect();
        if dims != entry.shape {
            return Err(BenchError::CheckpointMismatch(format!(
                "{} has shape {dims:?}, manifest says {:?}",
                entry.name, entry.shape
            )));
        }
        params.push(NamedParam {
            name: entry.name,
            value: Tensor::new(dims, t.payload().to_f64())?,
        });
    }
    UNet::from_params(expected.unet(), params)
        .map_err(|e| BenchError::CheckpointMismatch(e.to_string()))
}

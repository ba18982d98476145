//! Checkpoint container: named `f32` tensors plus a JSON sidecar describing the
//! architecture and training seed.
//!
//! Binary layout (little-endian): magic `AFCK`, u32 version, u32 tensor count,
//! then per tensor: u16 name length, UTF-8 name, u32 rank, u32 per dimension,
//! and the values as f32 in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_u16, read_u32, Checked};
use crate::tensorcore::{Scalar, Tensor};

use super::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"AFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: ModelConfig,
    pub seed: u64,
    pub param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, seed: u64, epoch: Option<usize>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let params = model.params();
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_all(&2u32.to_le_bytes()).map_err(io)?;
        for dim in t.shape() {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
        }
        for v in t.data() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;

    let meta = CheckpointMeta {
        architecture: model.config().clone(),
        seed,
        param_count: params.numel(),
        epoch,
    };
    let sidecar = sidecar_path(path);
    std::fs::write(&sidecar, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&sidecar, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Checked::new(BufReader::new(file), path);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(r.error("bad magic, not a checkpoint"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = read_u16(&mut r, "name length")? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| r.error(format!("tensor {i}: name is not UTF-8")))?;
        let rank = read_u32(&mut r, "rank")?;
        if rank != 2 {
            return Err(r.error(format!("tensor {name}: rank {rank} unsupported")));
        }
        let rows = read_u32(&mut r, "rows")? as usize;
        let cols = read_u32(&mut r, "cols")? as usize;
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(rows, cols, data).map_err(|e| r.error(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    let mut trailing = [0u8; 1];
    if r.inner().read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(r.error("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint, checking every tensor's name and shape against the
/// architecture recorded in the sidecar.
pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let mut model = Model::<T>::new(meta.architecture.clone(), meta.seed)?;
    let tensors = read_tensors(path)?;
    if tensors.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} tensors, architecture expects {}",
            path.display(),
            tensors.len(),
            model.params().len()
        )));
    }
    for (name, t) in tensors {
        model.params_mut().assign(&name, t.cast())?;
    }
    Ok((model, meta))
}

/// Loads a checkpoint and verifies it matches an expected architecture.
pub fn load_for<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<(Model<T>, CheckpointMeta)> {
    let (model, meta) = load(path)?;
    if &meta.architecture != expected {
        return Err(Error::Checkpoint(format!(
            "{}: architecture {:?} does not match configured {:?}",
            path.display(),
            meta.architecture,
            expected
        )));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_patches: 3,
            in_channels: 5,
            conv_hidden: 4,
            d_model: 4,
            n_heads: 2,
            ffn_hidden: 6,
            n_blocks: 2,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn roundtrip_restores_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(tiny(), 42).unwrap();
        save(&path, &model, 42, Some(3)).unwrap();
        let (loaded, meta) = load::<f32>(&path).unwrap();
        assert_eq!(meta.seed, 42);
        assert_eq!(meta.epoch, Some(3));
        for ((n1, t1), (n2, t2)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(tiny(), 1).unwrap();
        save(&path, &model, 1, None).unwrap();
        // claim a wider architecture in the sidecar
        let mut meta = read_meta(&path).unwrap();
        meta.architecture.d_model = 8;
        std::fs::write(sidecar_path(&path), serde_json::to_string(&meta).unwrap()).unwrap();
        let err = load::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("expected shape"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(tiny(), 1).unwrap();
        save(&path, &model, 1, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}

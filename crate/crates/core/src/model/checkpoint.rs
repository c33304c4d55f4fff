//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "HHGRCKPT"
//! version  u32
//! d, L_u, L_g, users, items, groups   u32 each
//! tensors  f32, row-major, in ModelParams::layout order
//! ```
//!
//! All integers and floats are little-endian. A JSON sidecar next to the
//! binary (same stem, `.json`) records the mode and hyperparameters.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Mode, ModelDims, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HHGRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub mode: Mode,
    pub dims: ModelDims,
    /// Tensor names and shapes in storage order.
    pub tensors: Vec<(String, [usize; 2])>,
    /// Free-form run settings.
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(mode: Mode, dims: ModelDims, hyperparameters: serde_json::Value) -> Self {
        let tensors = ModelParams::layout(&dims)
            .into_iter()
            .map(|k| {
                let (r, c) = ModelParams::shape_of(&dims, k);
                (k.name(), [r, c])
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            mode,
            dims,
            tensors,
            hyperparameters,
        }
    }

    /// Fails with both shapes when the checkpoint does not fit a dataset.
    pub fn check_dataset(&self, users: usize, items: usize, groups: usize) -> Result<()> {
        let d = &self.dims;
        if (d.users, d.items, d.groups) != (users, items, groups) {
            return Err(Error::DimensionMismatch {
                checkpoint: format!("{} users x {} items x {} groups", d.users, d.items, d.groups),
                dataset: format!("{users} users x {items} items x {groups} groups"),
            });
        }
        Ok(())
    }
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Checkpoint(format!("{what} = {x} does not fit the header")))
}

fn encode(params: &ModelParams) -> Result<Vec<u8>> {
    let d = params.dims;
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (x, what) in [
        (d.dim, "d"),
        (d.user_layers, "user layers"),
        (d.group_layers, "group layers"),
        (d.users, "users"),
        (d.items, "items"),
        (d.groups, "groups"),
    ] {
        out.extend_from_slice(&to_u32(x, what)?.to_le_bytes());
    }
    for kind in ModelParams::layout(&d) {
        for &x in params.tensor(kind).iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let fail = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes"));
    let version = word(0);
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let h: Vec<usize> = (1..7).map(|k| word(k) as usize).collect();
    let dims = ModelDims {
        dim: h[0],
        user_layers: h[1],
        group_layers: h[2],
        users: h[3],
        items: h[4],
        groups: h[5],
    };
    let layout = ModelParams::layout(&dims);
    let floats: usize = layout
        .iter()
        .map(|&k| {
            let (r, c) = ModelParams::shape_of(&dims, k);
            r * c
        })
        .sum();
    if bytes.len() != HEADER_LEN + 4 * floats {
        return Err(fail(format!(
            "expected {} bytes for {dims:?}, found {}",
            HEADER_LEN + 4 * floats,
            bytes.len()
        )));
    }
    let mut params = ModelParams::init_uniform(dims, 0, 1.0).map_err(|e| fail(e.to_string()))?;
    let mut cursor = HEADER_LEN;
    for kind in layout {
        let shape = ModelParams::shape_of(&dims, kind);
        let n = shape.0 * shape.1;
        let values: Vec<f64> = bytes[cursor..cursor + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        cursor += 4 * n;
        *params.tensor_mut(kind) = Array2::from_shape_vec(shape, values).expect("length checked");
    }
    if !params.is_finite() {
        return Err(fail("contains non-finite values".into()));
    }
    Ok(params)
}

/// Writes the binary checkpoint and its JSON sidecar.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    if meta.dims != params.dims {
        return Err(Error::Checkpoint("sidecar dims disagree with params".into()));
    }
    fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

/// Reads a checkpoint and its sidecar.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode(&bytes, path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.dims != params.dims {
        return Err(Error::Checkpoint(format!(
            "{}: sidecar dims {:?} disagree with header {:?}",
            side.display(),
            meta.dims,
            params.dims
        )));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims { users: 4, items: 5, groups: 2, dim: 3, user_layers: 2, group_layers: 1 }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let p = ModelParams::init(dims(), 4).unwrap();
        let meta = CheckpointMeta::new(Mode::S2, dims(), serde_json::json!({"beta": 1.0}));
        save_checkpoint(&path, &p, &meta).unwrap();
        assert!(dir.path().join("checkpoint.json").exists());
        let (q, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        for k in ModelParams::layout(&p.dims) {
            for (a, b) in p.tensor(k).iter().zip(q.tensor(k)) {
                assert_eq!(*a as f32 as f64, *b);
            }
        }
        // a second save of the reloaded params is byte-identical
        let path2 = dir.path().join("again.bin");
        save_checkpoint(&path2, &q, &meta).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn header_layout() {
        let p = ModelParams::init(dims(), 4).unwrap();
        let bytes = encode(&p).unwrap();
        assert_eq!(&bytes[..8], b"HHGRCKPT");
        let words: Vec<u32> = bytes[8..HEADER_LEN]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![1, 3, 2, 1, 4, 5, 2]);
        let first = f32::from_le_bytes(bytes[HEADER_LEN..HEADER_LEN + 4].try_into().unwrap());
        assert_eq!(first, p.user_embed[[0, 0]] as f32);
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        let p = ModelParams::init(dims(), 4).unwrap();
        let bytes = encode(&p).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode(b"not a checkpoint at all, really not", Path::new("x")).is_err());
    }

    #[test]
    fn dataset_mismatch_names_both_shapes() {
        let mut d = dims();
        d.users = 100;
        let meta = CheckpointMeta::new(Mode::Hhgr, d, serde_json::Value::Null);
        let err = meta.check_dataset(200, 5, 2).unwrap_err().to_string();
        assert!(err.contains("100 users") && err.contains("200 users"), "{err}");
        assert!(meta.check_dataset(100, 5, 2).is_ok());
    }
}

//! On-disk formats.
//!
//! Two self-describing binary layouts, both little-endian:
//!
//! * Tensor file (`AVTENS01`): one array per file.
//!   `magic[8] | dtype u8 (1=f64, 2=f32) | ndim u8 | dims u64*ndim | payload`.
//! * Checkpoint container (`AVSYNCK1`): a JSON metadata record followed by
//!   named parameter arrays.
//!   `magic[8] | version u32 | meta_len u64 | meta JSON | n_params u64 |`
//!   then per parameter: `name_len u16 | name utf8 | ndim u8 | dims u64*ndim |
//!   payload f64*prod(dims)`.
//!
//! The metadata record is free-form JSON; training code stores the resolved
//! configs, vocabulary and the frozen-head checksum there.

use crate::error::{AvError, Result};
use crate::nn::ParamSet;
use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 8] = b"AVTENS01";
const CHECKPOINT_MAGIC: &[u8; 8] = b"AVSYNCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 1,
            Dtype::F32 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::F32),
            other => Err(AvError::CorpusFormat(format!("unknown dtype tag {other}"))),
        }
    }
}

// ---- tensor files ----------------------------------------------------------

pub fn write_tensor(path: &Path, array: &ArrayD<f64>, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[dtype.tag(), array.ndim() as u8])?;
    for &d in array.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for &x in array.as_slice().expect("standard layout") {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &x in array.as_slice().expect("standard layout") {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(AvError::CorpusFormat(format!(
            "bad tensor magic in {}",
            path.display()
        )));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = Dtype::from_tag(head[0])?;
    let ndim = head[1] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    let mut vals = Vec::with_capacity(n);
    match dtype {
        Dtype::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                vals.push(f64::from_le_bytes(b));
            }
        }
        Dtype::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                vals.push(f32::from_le_bytes(b) as f64);
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&dims), vals)
        .map_err(|e| AvError::CorpusFormat(format!("tensor shape mismatch: {e}")))
}

// ---- checkpoint container ---------------------------------------------------

/// A parameter set plus its free-form JSON metadata record.
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

pub fn save_checkpoint(path: &Path, meta: &serde_json::Value, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let meta_bytes = serde_json::to_vec(meta)?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    let n = params.names().count() as u64;
    w.write_all(&n.to_le_bytes())?;
    for (name, value) in params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[value.ndim() as u8])?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in value.as_slice().expect("standard layout") {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        AvError::MissingArtifact(format!("checkpoint {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AvError::CheckpointFormat(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(AvError::CheckpointFormat(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut lb = [0u8; 8];
    r.read_exact(&mut lb)?;
    let meta_len = u64::from_le_bytes(lb) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;

    r.read_exact(&mut lb)?;
    let n_params = u64::from_le_bytes(lb) as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl)?;
        let name_len = u16::from_le_bytes(nl) as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|e| AvError::CheckpointFormat(format!("bad parameter name: {e}")))?;
        let mut db = [0u8; 1];
        r.read_exact(&mut db)?;
        let ndim = db[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let count: usize = dims.iter().product();
        let mut vals = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut b)?;
            vals.push(f64::from_le_bytes(b));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), vals)
            .map_err(|e| AvError::CheckpointFormat(format!("parameter {name}: {e}")))?;
        params.insert(&name, arr);
    }
    Ok(Checkpoint { meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use serde_json::json;

    #[test]
    fn tensor_roundtrip_f64_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ten");
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = uniform_init(&mut rng, &[4, 5, 2], 1);
        write_tensor(&path, &a, Dtype::F64).unwrap();
        let b = read_tensor(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tensor_roundtrip_f32_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ten");
        let a = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.1, 1.0 / 3.0]).unwrap();
        write_tensor(&path, &a, Dtype::F32).unwrap();
        let b = read_tensor(&path).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_params_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        p.insert("a.w", uniform_init(&mut rng, &[3, 4], 3));
        p.insert("b.scale", uniform_init(&mut rng, &[2], 1));
        let meta = json!({"format": "test", "seed": 5});
        save_checkpoint(&path, &meta, &p).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta["seed"], 5);
        assert_eq!(ck.params.checksum(""), p.checksum(""));
    }

    #[test]
    fn missing_checkpoint_reports_missing_artifact() {
        match load_checkpoint(Path::new("/nonexistent/x.ckpt")) {
            Err(err) => assert_eq!(err.code(), "E_MISSING_ARTIFACT"),
            Ok(_) => panic!("expected missing-artifact error"),
        }
    }
}

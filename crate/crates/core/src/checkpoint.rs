//! Self-describing binary checkpoints.
//!
//! Layout (little endian): magic `STRUCFIL`, `u32` version, `u64` length of
//! the JSON model config followed by the config, `u32` array count, then per
//! array a `u32` name length, the UTF-8 name, `u64` rows, `u64` cols and the
//! values as `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"STRUCFIL";
const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("model config serializes");
    let mut out = Vec::with_capacity(64 + config.len() + model.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, m) in model.param_names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }
}

/// Parses a checkpoint; when `expected` is given the stored config must match it.
pub fn from_bytes<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a strucfill checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u64()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(Error::Checkpoint(format!("stored config {config:?} does not match expected {exp:?}")));
        }
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let (rows, cols) = (r.u64()?, r.u64()?);
        let size = rows.checked_mul(cols).and_then(|s| s.checked_mul(8)).ok_or_else(|| Error::Checkpoint("array too large".into()))?;
        let data = r.take(size)?.chunks_exact(8).map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap()))).collect();
        arrays.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Model::from_named(config, arrays)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model64;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model64::new(ModelConfig::gradient_check(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &m).unwrap();
        let back: Model64 = load(&path, Some(m.config())).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.param_names(), m.param_names());
        assert_eq!(to_bytes(&back), to_bytes(&m));
    }

    #[test]
    fn f32_models_widen_exactly() {
        let m = Model64::new(ModelConfig::gradient_check(), 9).unwrap().cast::<f32>();
        let back: Model<f32> = from_bytes(&to_bytes(&m), None).unwrap();
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn rejects_mismatch_and_corruption() {
        let m = Model64::new(ModelConfig::gradient_check(), 9).unwrap();
        let bytes = to_bytes(&m);
        let other = ModelConfig::gradient_check().with_max_position(64);
        assert!(matches!(from_bytes::<f64>(&bytes, Some(&other)), Err(Error::Checkpoint(_))));
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 3], None).is_err());
        assert!(from_bytes::<f64>(b"NOTACKPT", None).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(from_bytes::<f64>(&bad, None).is_err());
    }
}

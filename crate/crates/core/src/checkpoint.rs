//! Flat named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `VPCK`, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rows, `u32` cols and `rows · cols`
//! 32-bit floats, row-major.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPCK";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Mat<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, value: &Mat<T>) {
        self.tensors.insert(name.into(), value.mapv(|v| v.as_f64() as f32));
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.tensors.insert(name.into(), Mat::from_elem((1, 1), value as f32));
    }

    pub fn get(&self, name: &str) -> Option<&Mat<f32>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat<f32>> {
        self.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn require_as<T: Scalar>(&self, name: &str) -> Result<Mat<T>> {
        Ok(self.require(name)?.mapv(|v| T::lit(f64::from(v))))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let m = self.require(name)?;
        if m.len() != 1 {
            return Err(Error::DimensionMismatch(format!("{name} is not a scalar")));
        }
        Ok(f64::from(m[[0, 0]]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Stores every parameter under its own name with `prefix` prepended.
    pub fn insert_params<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, p) in store.iter() {
            self.insert(format!("{prefix}{}", p.name), &p.value);
        }
    }

    /// Loads every parameter of `store` (by name, with `prefix`), checking shapes.
    pub fn load_params<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.get(id).name);
            let m = self.require(&name)?;
            let param = store.get_mut(id);
            if m.dim() != param.value.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    m.dim(),
                    param.value.dim()
                )));
            }
            param.value = m.mapv(|v| T::lit(f64::from(v)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0usize;
        let err = |offset: usize, message: &str| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: message.to_string(),
        };
        let mut take = |n: usize, what: &str| -> Result<(usize, &[u8])> {
            if bytes.len() - pos < n {
                return Err(err(pos, &format!("truncated {what}")));
            }
            let start = pos;
            pos += n;
            Ok((start, &bytes[start..start + n]))
        };
        let (_, magic) = take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(err(0, "bad magic (expected VPCK)"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let count = u32_at(take(4, "tensor count")?.1);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u32_at(take(4, "name length")?.1);
            let (at, name) = take(len, "name")?;
            let name = std::str::from_utf8(name)
                .map_err(|_| err(at, "tensor name is not UTF-8"))?
                .to_string();
            let rows = u32_at(take(4, "rows")?.1);
            let cols = u32_at(take(4, "cols")?.1);
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| err(at, "tensor too large"))?;
            let (_, data) = take(n, &format!("tensor {name}"))?;
            let values: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Mat::from_shape_vec((rows, cols), values).expect("sized tensor"));
        }
        if pos != bytes.len() {
            return Err(err(pos, "trailing bytes after last tensor"));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    #[test]
    fn round_trip() {
        let mut c = Checkpoint::new();
        c.insert(
            "a.weight",
            &Mat::from_shape_vec((2, 3), vec![1.0f64, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap(),
        );
        c.insert_scalar("meta.epoch", 4.0);
        let p = Path::new("x.ckpt");
        let back = Checkpoint::from_bytes(&c.to_bytes(), p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.scalar("meta.epoch").unwrap(), 4.0);
    }

    #[test]
    fn truncation_and_missing_names() {
        let mut store = ParamStore::<f32>::new();
        store.add("enc.w", Mat::zeros((2, 2)), ParamGroup::Backbone);
        store.add("head.w", Mat::zeros((2, 1)), ParamGroup::Head);
        let mut c = Checkpoint::new();
        c.insert_params("", &store);
        let bytes = c.to_bytes();
        let p = Path::new("x.ckpt");
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut], p),
                Err(Error::Format { .. })
            ));
        }
        let mut partial = Checkpoint::new();
        partial.insert("enc.w", &Mat::<f32>::zeros((2, 2)));
        match partial.load_params("", &mut store) {
            Err(Error::MissingParameter(n)) => assert_eq!(n, "head.w"),
            other => panic!("unexpected {other:?}"),
        }
        let mut wrong = c.clone();
        wrong.insert("head.w", &Mat::<f32>::zeros((3, 1)));
        assert!(matches!(
            wrong.load_params("", &mut store),
            Err(Error::DimensionMismatch(_))
        ));
    }
}

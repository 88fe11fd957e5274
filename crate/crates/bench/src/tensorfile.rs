//! Binary tensor container.
//!
//! Layout, all little-endian: the magic `SSCT`, a `u16` version, a `u8`
//! dtype code, a `u8` rank, `rank` dimensions as `u64`, then the row-major
//! payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::BenchError;

pub const MAGIC: &[u8; 4] = b"SSCT";
pub const VERSION: u16 = 1;
const HEADER_FIXED: usize = 4 + 2 + 1 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self, BenchError> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            _ => Err(BenchError::Format(format!("unknown dtype code {code}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }
}

/// An n-dimensional array with its shape; `data.len() == dims.product()`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    dims: Vec<u64>,
    data: Payload,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: Payload) -> Result<Self, BenchError> {
        if dims.len() > u8::MAX as usize {
            return Err(BenchError::Format(format!("rank {} exceeds 255", dims.len())));
        }
        let expected = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| BenchError::Format("element count overflows".into()))?;
        if expected != data.len() as u64 {
            return Err(BenchError::Format(format!(
                "dims {dims:?} need {expected} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        let (r, c) = a.dim();
        Self {
            dims: vec![r as u64, c as u64],
            data: Payload::F64(a.iter().copied().collect()),
        }
    }

    pub fn from_array3(a: &Array3<f64>) -> Self {
        let (n, r, c) = a.dim();
        Self {
            dims: vec![n as u64, r as u64, c as u64],
            data: Payload::F64(a.iter().copied().collect()),
        }
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn payload(&self) -> &Payload {
        &self.data
    }

    pub fn into_array2(self) -> Result<Array2<f64>, BenchError> {
        match self.dims[..] {
            [r, c] => Ok(Array2::from_shape_vec((r as usize, c as usize), self.data.to_f64())
                .expect("length checked on construction")),
            _ => Err(BenchError::Format(format!("expected rank 2, got dims {:?}", self.dims))),
        }
    }

    pub fn into_array3(self) -> Result<Array3<f64>, BenchError> {
        match self.dims[..] {
            [n, r, c] => Ok(Array3::from_shape_vec(
                (n as usize, r as usize, c as usize),
                self.data.to_f64(),
            )
            .expect("length checked on construction")),
            _ => Err(BenchError::Format(format!("expected rank 3, got dims {:?}", self.dims))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(HEADER_FIXED + 8 * self.dims.len() + dtype.size() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BenchError> {
        if bytes.len() < HEADER_FIXED || &bytes[..4] != MAGIC {
            return Err(BenchError::Format("missing SSCT magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(BenchError::Format(format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(bytes[6])?;
        let rank = bytes[7] as usize;
        let dims_end = HEADER_FIXED + 8 * rank;
        if bytes.len() < dims_end {
            return Err(BenchError::Format("truncated header".into()));
        }
        let dims: Vec<u64> = bytes[HEADER_FIXED..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| BenchError::Format("element count overflows".into()))?;
        let body = &bytes[dims_end..];
        if Some(body.len()) != count.checked_mul(dtype.size()) {
            return Err(BenchError::Format(format!(
                "payload has {} bytes, dims {dims:?} need {}",
                body.len(),
                count.saturating_mul(dtype.size())
            )));
        }
        let data = match dtype {
            DType::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
        };
        Self::new(dims, data)
    }

    pub fn write(&self, path: &Path) -> Result<(), BenchError> {
        let mut f = fs::File::create(path).map_err(|e| BenchError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| BenchError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, BenchError> {
        let bytes = fs::read(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| BenchError::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = TensorFile::new(vec![2, 1], Payload::F32(vec![1.0, -2.0])).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"SSCT");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), VERSION);
        assert_eq!((b[6], b[7]), (1, 2));
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(b.len(), 8 + 16 + 8);
    }

    #[test]
    fn rejects_inconsistent_lengths() {
        assert!(TensorFile::new(vec![3], Payload::F64(vec![1.0])).is_err());
        let mut b = TensorFile::new(vec![2], Payload::F64(vec![1.0, 2.0])).unwrap().to_bytes();
        b.pop();
        assert!(TensorFile::from_bytes(&b).is_err());
        b[0] = b'X';
        assert!(TensorFile::from_bytes(&b).is_err());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let t = TensorFile::new(vec![], Payload::F64(vec![7.0])).unwrap();
        assert_eq!(TensorFile::from_bytes(&t.to_bytes()).unwrap(), t);
    }
}

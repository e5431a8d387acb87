//! Dense row-major tensors. Storage is always f64; a tensor tagged [`DType::F32`]
//! has every op result rounded through f32, so single precision is selectable
//! without a second code path. Correctness work runs at f64 throughout.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Magic prefix of the serialized tensor record.
pub const TENSOR_MAGIC: &[u8; 8] = b"ECMRTNS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = checked_numel(shape).expect("tensor shape overflow");
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], dtype: DType::F64 }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = checked_numel(shape).expect("tensor shape overflow");
        Tensor { shape: shape.to_vec(), data: vec![value; n], dtype: DType::F64 }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![value], dtype: DType::F64 }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} holds {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, dtype: DType::F64 })
    }

    /// Gaussian init scaled for the given fan-in (He-style).
    pub fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let n = checked_numel(shape).expect("tensor shape overflow");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data, dtype: DType::F64 }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn with_dtype(mut self, dtype: DType) -> Tensor {
        self.dtype = dtype;
        if dtype == DType::F32 {
            self.round_to_f32();
        }
        self
    }

    /// Round every element through f32. No-op for f64 tensors' contract; the
    /// caller decides when precision narrowing applies.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Flat offset for a 4-d index; debug-checked against the shape.
    #[inline]
    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    /// Serialize as a self-describing binary record.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        w.write_all(&[self.dtype.code()])?;
        match self.dtype {
            DType::F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`write_to`]. Rejects bad magic, implausible ranks, and
    /// truncated payloads without consuming past the record.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Checkpoint(format!("bad tensor magic {magic:?}")));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n = checked_numel(&shape)
            .map_err(|_| Error::Checkpoint(format!("implausible tensor shape {shape:?}")))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(truncated)?;
        let dtype = DType::from_code(code[0])?;
        let mut data = Vec::with_capacity(n);
        match dtype {
            DType::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf).map_err(truncated)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
            DType::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut buf).map_err(truncated)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
        }
        Ok(Tensor { shape, data, dtype })
    }
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated tensor record: {e}"))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("numel", "rank-0 tensors are not used"));
    }
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::shape("numel", format!("zero extent in {shape:?}")));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::shape("numel", format!("shape {shape:?} overflows")))?;
    }
    Ok(n)
}

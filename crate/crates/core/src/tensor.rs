//! Dense row-major tensors and the `TMAT` binary file format.
//!
//! Layout conventions used across the crate:
//! - feature maps are `[C, H, W]`
//! - convolution weights are `[K, C, kh, kw]`
//! - fully-connected weights are `[outputs, inputs]`
//!
//! `TMAT` files: magic `b"TMAT"`, one dtype byte (0 = u8, 1 = i32), one rank
//! byte, `rank` little-endian `u32` dims, then the row-major payload in
//! little-endian.

use std::io::{Read, Write};

use crate::error::{Result, TmaError};

pub const TMAT_MAGIC: &[u8; 4] = b"TMAT";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Clone + Default> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_rank(dims)?;
        let len = dims.iter().product();
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![T::default(); len],
        })
    }
}

impl<T> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank(dims)?;
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(TmaError::Shape(format!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        check_rank(dims)?;
        let len: usize = dims.iter().product();
        Ok(Self {
            dims: dims.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major flat offset of a full index. Panics on rank mismatch or out-of-range index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        index.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of range for dim {d}");
            acc * d + i
        })
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0; self.dims.len()];
        for (slot, &d) in index.iter_mut().zip(&self.dims).rev() {
            *slot = offset % d;
            offset /= d;
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> &T {
        &self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }
}

fn check_rank(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(TmaError::Shape(format!(
            "rank {} not in 1..={MAX_RANK}",
            dims.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8 = 0,
    I32 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::U8),
            1 => Ok(DType::I32),
            c => Err(TmaError::Parse(format!("unknown TMAT dtype code {c}"))),
        }
    }
}

/// Element types that can be stored in a `TMAT` file.
pub trait TmatElement: Sized + Copy {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn width() -> usize;
}

impl TmatElement for u8 {
    const DTYPE: DType = DType::U8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
    fn width() -> usize {
        1
    }
}

impl TmatElement for i32 {
    const DTYPE: DType = DType::I32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn width() -> usize {
        4
    }
}

impl<T: TmatElement> Tensor<T> {
    pub fn to_tmat_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.rank() + self.len() * T::width());
        out.extend_from_slice(TMAT_MAGIC);
        out.push(T::DTYPE as u8);
        out.push(self.rank() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_tmat_bytes(bytes: &[u8]) -> Result<Self> {
        let (dtype, dims, payload) = parse_header(bytes)?;
        if dtype != T::DTYPE {
            return Err(TmaError::Parse(format!(
                "TMAT dtype {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let len: usize = dims.iter().product();
        if payload.len() != len * T::width() {
            return Err(TmaError::Parse(format!(
                "TMAT payload is {} bytes, dims {dims:?} need {}",
                payload.len(),
                len * T::width()
            )));
        }
        let data = payload.chunks_exact(T::width()).map(T::read_le).collect();
        Tensor::from_vec(&dims, data)
    }

    pub fn write_tmat(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_tmat_bytes())?;
        Ok(())
    }

    pub fn read_tmat(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_tmat_bytes(&bytes)
    }
}

/// Reads only the dtype of a `TMAT` buffer so callers can dispatch.
pub fn tmat_dtype(bytes: &[u8]) -> Result<DType> {
    parse_header(bytes).map(|(d, _, _)| d)
}

fn parse_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, &[u8])> {
    if bytes.len() < 6 || &bytes[..4] != TMAT_MAGIC {
        return Err(TmaError::Parse("missing TMAT magic".into()));
    }
    let dtype = DType::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(TmaError::Parse(format!("TMAT rank {rank} not in 1..={MAX_RANK}")));
    }
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(TmaError::Parse("truncated TMAT header".into()));
    }
    let dims = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Ok((dtype, dims, &bytes[header..]))
}

//! Dense row-major `f32` tensors and the `PTQT` binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "PTQT"
//! version  u32      1
//! ndim     u32      1..=3
//! dims     ndim x u64
//! payload  product(dims) x f32 (little-endian IEEE-754)
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{PtqError, Result};

pub const MAGIC: &[u8; 4] = b"PTQT";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 3;

const HEADER_FIXED: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_dims(&dims)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(PtqError::Shape(format!(
                "dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let numel = dims.iter().product();
        Self::new(dims, vec![0.0; numel])
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the innermost (channel) axis.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    /// Number of innermost rows, i.e. the product of all leading axes.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.dims[1] + c]
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<Tensor> {
        Tensor::new(dims, self.data.clone())
    }

    /// Collapses all leading axes into one, giving a `[rows x cols]` matrix.
    pub fn flatten_rows(&self) -> Tensor {
        Tensor {
            dims: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(PtqError::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Splits a rank-3 `[S x T x n]` tensor into `S` matrices of shape `[T x n]`.
    pub fn samples(&self) -> Result<Vec<Tensor>> {
        if self.rank() != 3 {
            return Err(PtqError::Shape(format!(
                "expected [samples x tokens x channels], got {:?}",
                self.dims
            )));
        }
        let (t, n) = (self.dims[1], self.dims[2]);
        Ok(self
            .data
            .chunks_exact(t * n)
            .map(|chunk| Tensor {
                dims: vec![t, n],
                data: chunk.to_vec(),
            })
            .collect())
    }

    /// Stacks equally shaped `[T x n]` matrices into `[S x T x n]`.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| PtqError::Shape("cannot stack zero tensors".into()))?;
        if first.rank() != 2 {
            return Err(PtqError::Shape(format!(
                "stack expects rank-2 parts, got {:?}",
                first.dims
            )));
        }
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            first.same_shape(p)?;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![parts.len(), first.dims[0], first.dims[1]], data)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(PtqError::Shape(format!(
            "rank must be 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(PtqError::Shape(format!("dims must be positive: {dims:?}")));
    }
    Ok(())
}

/// Encodes a tensor into the `PTQT` byte layout.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if !t.is_finite() {
        return Err(PtqError::NonFinite { context: None });
    }
    let mut buf = Vec::with_capacity(HEADER_FIXED + 8 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in &t.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Decodes a `PTQT` byte buffer. `origin` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let size_err = |detail: String| PtqError::SizeMismatch {
        path: origin.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(PtqError::BadMagic {
            path: origin.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_FIXED {
        return Err(size_err(format!("{} byte header", bytes.len())));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(PtqError::BadVersion {
            path: origin.to_path_buf(),
            version,
        });
    }
    let ndim = u32_at(8) as usize;
    if ndim == 0 || ndim > MAX_RANK {
        return Err(PtqError::Shape(format!(
            "{}: rank {ndim} outside 1..={MAX_RANK}",
            origin.display()
        )));
    }
    let payload_off = HEADER_FIXED + 8 * ndim;
    if bytes.len() < payload_off {
        return Err(size_err("truncated dims".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: u64 = 1;
    for i in 0..ndim {
        let off = HEADER_FIXED + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| size_err("dims overflow".into()))?;
        dims.push(d as usize);
    }
    let expected = numel
        .checked_mul(4)
        .and_then(|p| p.checked_add(payload_off as u64))
        .ok_or_else(|| size_err("dims overflow".into()))?;
    if bytes.len() as u64 != expected {
        return Err(size_err(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[payload_off..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(PtqError::NonFinite {
            context: Some(origin.display().to_string()),
        });
    }
    Tensor::new(dims, data)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| PtqError::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PtqError::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Matrix product `[r x k] . [k x c]`.
///
/// Each output element is accumulated in `f64` in index order and rounded
/// once, so results do not depend on the rayon thread count.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[0] {
        return Err(PtqError::Shape(format!(
            "matmul shape mismatch: {:?} x {:?}",
            a.dims, b.dims
        )));
    }
    let (r, k, c) = (a.dims[0], a.dims[1], b.dims[1]);
    let mut out = vec![0f32; r * c];
    out.par_chunks_mut(c).enumerate().for_each(|(i, out_row)| {
        let a_row = &a.data[i * k..(i + 1) * k];
        let mut acc = vec![0f64; c];
        for (p, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let b_row = &b.data[p * c..(p + 1) * c];
            for (slot, &bv) in acc.iter_mut().zip(b_row) {
                *slot += av * bv as f64;
            }
        }
        for (o, v) in out_row.iter_mut().zip(acc) {
            *o = v as f32;
        }
    });
    Tensor::new(vec![r, c], out)
}

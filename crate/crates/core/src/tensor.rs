//! Dense row-major tensors and the `AGQT` named-tensor store.
//!
//! Store layout (all integers little-endian):
//!
//! ```text
//! "AGQT" | version: u32 = 1 | count: u32
//! per tensor, names in lexicographic order:
//!   name_len: u16 | name: utf-8 | dtype: u8 (0 = f32, 1 = u8 codes) | rows: u32 | cols: u32 | payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Largest element count any tensor may hold.
pub const MAX_ELEMENTS: u64 = 1 << 31;

pub const STORE_MAGIC: [u8; 4] = *b"AGQT";
pub const STORE_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 256;

fn checked_len(rows: usize, cols: usize) -> Result<usize> {
    let n = (rows as u64).checked_mul(cols as u64);
    match n {
        Some(n) if n <= MAX_ELEMENTS => Ok(n as usize),
        _ => Err(Error::DimensionOverflow {
            rows: rows as u64,
            cols: cols as u64,
        }),
    }
}

/// Row-major 32-bit float matrix with finite elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let expected = checked_len(rows, cols)?;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        let n = checked_len(rows, cols).expect("tensor shape exceeds element cap");
        Self {
            rows,
            cols,
            data: vec![0.0; n],
        }
    }

    /// Builds a tensor from `f(row, col)`. Panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(checked_len(rows, cols).expect("tensor shape exceeds element cap"));
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data).expect("from_fn produced a non-finite element")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn min(&self) -> Option<f32> {
        self.data.iter().copied().reduce(f32::min)
    }

    pub fn max(&self) -> Option<f32> {
        self.data.iter().copied().reduce(f32::max)
    }

    /// Elementwise map; panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
            .expect("map produced a non-finite element")
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.rows, self.cols, data)
    }

    /// Copies columns `start..start + width` into a new tensor.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(Error::ShapeMismatch {
                op: "column_block",
                left: self.shape(),
                right: (start, width),
            });
        }
        Ok(Self::from_fn(self.rows, width, |r, c| self.get(r, start + c)))
    }

    /// Concatenates tensors with equal row counts left to right.
    pub fn hconcat(parts: &[Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::ShapeMismatch {
                op: "hconcat",
                left: (rows, 0),
                right: bad.shape(),
            });
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(checked_len(rows, cols)?);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Self::new(rows, cols, data)
    }
}

/// Keeps rows `keep[0], keep[1], ...`; `keep` must be strictly increasing.
pub fn slice_rows(t: &Tensor2D, keep: &[usize]) -> Result<Tensor2D> {
    for (i, &k) in keep.iter().enumerate() {
        if k >= t.rows {
            return Err(Error::InvalidIndices(format!(
                "index {k} out of range for {} rows",
                t.rows
            )));
        }
        if i > 0 && keep[i - 1] >= k {
            return Err(Error::InvalidIndices(format!(
                "indices not strictly increasing at position {i}"
            )));
        }
    }
    let mut data = Vec::with_capacity(keep.len() * t.cols);
    for &k in keep {
        data.extend_from_slice(t.row(k));
    }
    Ok(Tensor2D {
        rows: keep.len(),
        cols: t.cols,
        data,
    })
}

/// Row-major byte matrix, used for integer codes in the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl CodeMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        let expected = checked_len(rows, cols)?;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor2D),
    Codes(CodeMatrix),
}

impl StoredTensor {
    fn dtype(&self) -> u8 {
        match self {
            StoredTensor::F32(_) => 0,
            StoredTensor::Codes(_) => 1,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::Codes(c) => (c.rows, c.cols),
        }
    }
}

impl From<Tensor2D> for StoredTensor {
    fn from(t: Tensor2D) -> Self {
        StoredTensor::F32(t)
    }
}

impl From<CodeMatrix> for StoredTensor {
    fn from(c: CodeMatrix) -> Self {
        StoredTensor::Codes(c)
    }
}

/// Name-keyed tensor collection. Iteration order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorStore {
    tensors: BTreeMap<String, StoredTensor>,
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > MAX_NAME_LEN {
        return Err(Error::InvalidName(format!(
            "length {} outside 1..={MAX_NAME_LEN}",
            name.len()
        )));
    }
    Ok(())
}

impl NamedTensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor under a fresh name.
    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<StoredTensor>) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.insert(name, t.into());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn get_f32(&self, name: &str) -> Option<&Tensor2D> {
        match self.tensors.get(name) {
            Some(StoredTensor::F32(t)) => Some(t),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Serializes to the `AGQT` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype());
            let (rows, cols) = t.shape();
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            match t {
                StoredTensor::F32(t) => {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                StoredTensor::Codes(c) => out.extend_from_slice(c.data()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != STORE_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| Error::InvalidName(e.to_string()))?
                .to_owned();
            let dtype = r.u8("dtype")?;
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let n = checked_len(rows, cols)?;
            let t: StoredTensor = match dtype {
                0 => {
                    let raw = r.take(
                        n.checked_mul(4).ok_or(Error::Truncated { context: "f32 payload" })?,
                        "f32 payload",
                    )?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor2D::new(rows, cols, data)?.into()
                }
                1 => CodeMatrix::new(rows, cols, r.take(n, "code payload")?.to_vec())?.into(),
                other => return Err(Error::UnknownDtype(other)),
            };
            store.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Truncated { context })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }
}

pub fn load_store(path: impl AsRef<Path>) -> Result<NamedTensorStore> {
    NamedTensorStore::from_bytes(&fs::read(path)?)
}

pub fn save_store(store: &NamedTensorStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

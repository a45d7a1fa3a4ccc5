//! Base quantizers: integer code ranges, uniform affine quantization and
//! log2 quantization, each with an exact dequantization.
//!
//! Rounding is round-half-to-even everywhere. Activations use unsigned
//! ranges with a zero point; weights (see [`crate::kernels::ChannelQuantWeights`])
//! use signed symmetric ranges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;
use crate::trip::TripParams;

/// Floor applied to a fitted value range so a constant tensor still gets a positive scale.
pub const SCALE_EPS: f32 = 1e-8;

/// Integer code range for `bits` in `2..=8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRange {
    bits: u8,
    signed: bool,
}

impl CodeRange {
    pub fn new(bits: u32, signed: bool) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::InvalidBits(bits));
        }
        Ok(Self {
            bits: bits as u8,
            signed,
        })
    }

    pub fn unsigned(bits: u32) -> Result<Self> {
        Self::new(bits, false)
    }

    pub fn signed(bits: u32) -> Result<Self> {
        Self::new(bits, true)
    }

    pub fn bits(&self) -> u32 {
        self.bits as u32
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn lo(&self) -> i32 {
        if self.signed {
            -(1 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn hi(&self) -> i32 {
        if self.signed {
            (1 << (self.bits - 1)) - 1
        } else {
            (1 << self.bits) - 1
        }
    }

    #[inline]
    pub fn clamp(&self, v: i32) -> i32 {
        v.clamp(self.lo(), self.hi())
    }

    pub fn contains(&self, v: i32) -> bool {
        (self.lo()..=self.hi()).contains(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub range: CodeRange,
    pub scale: f32,
    pub zero_point: i32,
}

impl AffineParams {
    pub fn new(range: CodeRange, scale: f32, zero_point: i32) -> Result<Self> {
        let p = Self {
            range,
            scale,
            zero_point,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidParams(format!("scale {} must be positive", self.scale)));
        }
        if !self.range.contains(self.zero_point) {
            return Err(Error::InvalidParams(format!(
                "zero point {} outside [{}, {}]",
                self.zero_point,
                self.range.lo(),
                self.range.hi()
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn quantize_value(&self, x: f32) -> i32 {
        affine_code(x, self.scale, self.zero_point, self.range)
    }

    #[inline]
    pub fn dequantize_value(&self, code: i32) -> f32 {
        (code - self.zero_point) as f32 * self.scale
    }
}

/// Round half to even on a quotient that went through f32 arithmetic.
///
/// A step such as `1/15` is not representable, so `0.5 / step` lands a few
/// ulps below the real 7.5. Quotients within twice the step's own rounding
/// error (`2^-24` relative) of a half are treated as the tie they stand for.
pub(crate) fn round_quotient(r: f64) -> f64 {
    let lower = r.floor();
    let tol = f32::EPSILON as f64 * r.abs();
    if (r - lower - 0.5).abs() <= tol {
        if lower.rem_euclid(2.0) == 0.0 {
            lower
        } else {
            lower + 1.0
        }
    } else {
        r.round()
    }
}

#[inline]
pub(crate) fn affine_code(x: f32, step: f32, zero_point: i32, range: CodeRange) -> i32 {
    let r = round_quotient(x as f64 / step as f64);
    // the float clamp keeps the i32 cast in range for saturating inputs
    let r = r.clamp(i32::MIN as f64 / 2.0, i32::MAX as f64 / 2.0) as i32;
    range.clamp(r.saturating_add(zero_point))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Log2Params {
    pub bits: u8,
    pub max_abs: f32,
}

impl Log2Params {
    /// Largest code, `2^(bits-1) - 1`.
    pub fn max_code(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantScheme {
    Affine(AffineParams),
    Log2(Log2Params),
    Trip(TripParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantKind {
    Affine,
    Log2,
    Trip,
}

impl QuantKind {
    pub fn name(self) -> &'static str {
        match self {
            QuantKind::Affine => "affine",
            QuantKind::Log2 => "log2",
            QuantKind::Trip => "trip",
        }
    }
}

/// Integer codes with the parameters that produced them.
///
/// `signs` is only populated for log2 tensors (one of -1, 0, +1 per element).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    rows: usize,
    cols: usize,
    codes: Vec<i32>,
    signs: Vec<i8>,
    scheme: QuantScheme,
}

impl QuantTensor {
    pub(crate) fn from_parts(rows: usize, cols: usize, codes: Vec<i32>, signs: Vec<i8>, scheme: QuantScheme) -> Self {
        debug_assert_eq!(codes.len(), rows * cols);
        Self {
            rows,
            cols,
            codes,
            signs,
            scheme,
        }
    }

    /// Wraps externally produced affine codes after range-checking them.
    pub fn from_affine_codes(rows: usize, cols: usize, codes: Vec<i32>, params: AffineParams) -> Result<Self> {
        params.validate()?;
        if codes.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: codes.len(),
            });
        }
        if let Some(&c) = codes.iter().find(|&&c| !params.range.contains(c)) {
            return Err(Error::CodeOutOfRange {
                code: c as i64,
                lo: params.range.lo() as i64,
                hi: params.range.hi() as i64,
            });
        }
        Ok(Self::from_parts(
            rows,
            cols,
            codes,
            Vec::new(),
            QuantScheme::Affine(params),
        ))
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

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn kind(&self) -> QuantKind {
        match self.scheme {
            QuantScheme::Affine(_) => QuantKind::Affine,
            QuantScheme::Log2(_) => QuantKind::Log2,
            QuantScheme::Trip(_) => QuantKind::Trip,
        }
    }

    /// Layer-wise affine parameters shared by every element: the affine
    /// params themselves, or the base params of a TRIP tensor.
    pub fn layer_params(&self) -> Option<&AffineParams> {
        match &self.scheme {
            QuantScheme::Affine(p) => Some(p),
            QuantScheme::Trip(t) => Some(&t.base),
            QuantScheme::Log2(_) => None,
        }
    }

    /// The code range the codes are constrained to.
    pub fn code_bounds(&self) -> (i32, i32) {
        match &self.scheme {
            QuantScheme::Affine(p) => (p.range.lo(), p.range.hi()),
            QuantScheme::Trip(t) => (t.base.range.lo(), t.base.range.hi()),
            QuantScheme::Log2(p) => (0, p.max_code()),
        }
    }
}

/// Fits unsigned affine parameters over the value range of `x` extended to include zero.
pub fn fit_affine(x: &Tensor2D, bits: u32) -> Result<AffineParams> {
    let range = CodeRange::unsigned(bits)?;
    let (lo, hi) = zero_inclusive_range(x).ok_or(Error::EmptyTensor("fit_affine"))?;
    let scale = (hi - lo).max(SCALE_EPS) / range.hi() as f32;
    let zero_point = range.clamp(round_quotient(-lo as f64 / scale as f64) as i32);
    AffineParams::new(range, scale, zero_point)
}

pub(crate) fn zero_inclusive_range(x: &Tensor2D) -> Option<(f32, f32)> {
    Some((x.min()?.min(0.0), x.max()?.max(0.0)))
}

pub fn quantize_affine(x: &Tensor2D, p: &AffineParams) -> Result<QuantTensor> {
    p.validate()?;
    let codes = x.data().iter().map(|&v| p.quantize_value(v)).collect();
    Ok(QuantTensor::from_parts(
        x.rows(),
        x.cols(),
        codes,
        Vec::new(),
        QuantScheme::Affine(*p),
    ))
}

pub fn dequantize_affine(q: &QuantTensor) -> Result<Tensor2D> {
    let QuantScheme::Affine(p) = &q.scheme else {
        return Err(Error::KindMismatch {
            expected: "affine",
            found: q.kind().name(),
        });
    };
    let data = q.codes.iter().map(|&c| p.dequantize_value(c)).collect();
    Tensor2D::new(q.rows, q.cols, data)
}

/// Log2 quantization: `code = clip(round(-log2(|x| / max|x|)), 0, 2^(bits-1) - 1)`.
///
/// Exact zeros get the largest code and sign 0, so they dequantize to 0.
/// An all-zero tensor yields `max_abs = 0` and zero codes.
pub fn quantize_log2(x: &Tensor2D, bits: u32) -> Result<QuantTensor> {
    // reuse the signed range check for the bit width
    CodeRange::signed(bits)?;
    if x.is_empty() {
        return Err(Error::EmptyTensor("quantize_log2"));
    }
    let max_abs = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let params = Log2Params {
        bits: bits as u8,
        max_abs,
    };
    let hi = params.max_code();
    let n = x.len();
    let (codes, signs) = if max_abs == 0.0 {
        (vec![0; n], vec![0; n])
    } else {
        x.data()
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    (hi, 0)
                } else {
                    let ratio = (v.abs() as f64) / (max_abs as f64);
                    let e = (-ratio.log2()).round_ties_even().clamp(0.0, hi as f64) as i32;
                    (e, if v > 0.0 { 1 } else { -1 })
                }
            })
            .unzip()
    };
    Ok(QuantTensor::from_parts(
        x.rows(),
        x.cols(),
        codes,
        signs,
        QuantScheme::Log2(params),
    ))
}

pub fn dequantize_log2(q: &QuantTensor) -> Result<Tensor2D> {
    let QuantScheme::Log2(p) = &q.scheme else {
        return Err(Error::KindMismatch {
            expected: "log2",
            found: q.kind().name(),
        });
    };
    let data = q
        .codes
        .iter()
        .zip(&q.signs)
        .map(|(&c, &s)| {
            if s == 0 {
                0.0
            } else {
                s as f32 * (p.max_abs as f64 * (-(c as f64)).exp2()) as f32
            }
        })
        .collect();
    Tensor2D::new(q.rows, q.cols, data)
}

/// Dequantizes any scheme.
pub fn dequantize(q: &QuantTensor) -> Result<Tensor2D> {
    match q.kind() {
        QuantKind::Affine => dequantize_affine(q),
        QuantKind::Log2 => dequantize_log2(q),
        QuantKind::Trip => crate::trip::dequantize_trip(q),
    }
}

/// Mean squared error between two equally shaped tensors.
pub fn mse(a: &Tensor2D, b: &Tensor2D) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

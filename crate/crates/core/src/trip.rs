//! Layer-wise activation quantization with per-channel power-of-two step
//! refinement.
//!
//! All channels share one scale `s` and zero point `zp`. Channel `c` uses the
//! step `2^alpha_c * s` with `alpha_c` in `0..=cap`; `s` is anchored so that
//! the coarsest step `2^cap * s` spans the full value range. Each `alpha_c` is
//! the argmin of the channel's quantize-dequantize L2 error, ties resolved to
//! the smaller exponent.
//!
//! Because the refinement is a power of two per input channel, it can be moved
//! onto the weights (`w'[c, j] = w[c, j] * 2^alpha_c`), leaving a single
//! layer-wise integer GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, AffineParams, CodeRange, QuantScheme, QuantTensor, SCALE_EPS};
use crate::tensor::Tensor2D;

/// Largest supported refinement cap.
pub const MAX_CAP: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripParams {
    pub base: AffineParams,
    pub alphas: Vec<u8>,
    pub cap: u8,
}

impl TripParams {
    pub fn new(base: AffineParams, alphas: Vec<u8>, cap: u8) -> Result<Self> {
        let p = Self { base, alphas, cap };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.cap as u32 > MAX_CAP {
            return Err(Error::InvalidParams(format!("cap {} above {MAX_CAP}", self.cap)));
        }
        if let Some(a) = self.alphas.iter().find(|&&a| a > self.cap) {
            return Err(Error::InvalidParams(format!("alpha {a} above cap {}", self.cap)));
        }
        Ok(())
    }

    /// Step of channel `c`: `2^alpha_c * s`.
    #[inline]
    pub fn step(&self, c: usize) -> f32 {
        channel_step(self.base.scale, self.alphas[c])
    }

    pub fn channels(&self) -> usize {
        self.alphas.len()
    }
}

#[inline]
fn channel_step(scale: f32, alpha: u8) -> f32 {
    (1u32 << alpha) as f32 * scale
}

/// Squared L2 error of quantizing then dequantizing `values` with `step` and `zp`.
fn roundtrip_error(values: &[f32], step: f32, zero_point: i32, range: CodeRange) -> f64 {
    values
        .iter()
        .map(|&v| {
            let code = quant::affine_code(v, step, zero_point, range);
            let back = (code - zero_point) as f32 * step;
            let d = v as f64 - back as f64;
            d * d
        })
        .sum()
}

/// Fits shared parameters and per-channel exponents on `x` (tokens x channels).
pub fn fit_trip(x: &Tensor2D, bits: u32, cap: u32) -> Result<TripParams> {
    if cap > MAX_CAP {
        return Err(Error::InvalidParams(format!("cap {cap} above {MAX_CAP}")));
    }
    let range = CodeRange::unsigned(bits)?;
    let (lo, hi) = quant::zero_inclusive_range(x).ok_or(Error::EmptyTensor("fit_trip"))?;
    let coarse = (1u32 << cap) as f32;
    let scale = (hi - lo).max(SCALE_EPS) / (range.hi() as f32 * coarse);
    let zero_point = range.clamp(quant::round_quotient(-lo as f64 / (coarse * scale) as f64) as i32);
    let base = AffineParams::new(range, scale, zero_point)?;

    let alphas = (0..x.cols())
        .map(|c| {
            let column = x.column(c);
            let mut best = (0u8, f64::INFINITY);
            for alpha in 0..=cap as u8 {
                let err = roundtrip_error(&column, channel_step(scale, alpha), zero_point, range);
                if err < best.1 {
                    best = (alpha, err);
                }
            }
            best.0
        })
        .collect();
    TripParams::new(base, alphas, cap as u8)
}

/// Per-channel squared reconstruction error for every candidate exponent.
///
/// `errors[c][alpha]` is the L2 error (squared) of channel `c` under `alpha`.
pub fn channel_errors(x: &Tensor2D, p: &TripParams) -> Result<Vec<Vec<f64>>> {
    check_channels(x, p, "channel_errors")?;
    Ok((0..x.cols())
        .map(|c| {
            let column = x.column(c);
            (0..=p.cap)
                .map(|a| roundtrip_error(&column, channel_step(p.base.scale, a), p.base.zero_point, p.base.range))
                .collect()
        })
        .collect())
}

fn check_channels(x: &Tensor2D, p: &TripParams, op: &'static str) -> Result<()> {
    if x.cols() != p.channels() {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape(),
            right: (p.channels(), 1),
        });
    }
    Ok(())
}

pub fn quantize_trip(x: &Tensor2D, p: &TripParams) -> Result<QuantTensor> {
    p.validate()?;
    check_channels(x, p, "quantize_trip")?;
    let steps: Vec<f32> = (0..p.channels()).map(|c| p.step(c)).collect();
    let cols = x.cols();
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| quant::affine_code(v, steps[i % cols], p.base.zero_point, p.base.range))
        .collect();
    Ok(QuantTensor::from_parts(
        x.rows(),
        x.cols(),
        codes,
        Vec::new(),
        QuantScheme::Trip(p.clone()),
    ))
}

pub fn dequantize_trip(q: &QuantTensor) -> Result<Tensor2D> {
    let QuantScheme::Trip(p) = q.scheme() else {
        return Err(Error::KindMismatch {
            expected: "trip",
            found: q.kind().name(),
        });
    };
    let cols = q.cols();
    let data = q
        .codes()
        .iter()
        .enumerate()
        .map(|(i, &code)| (code - p.base.zero_point) as f32 * p.step(i % cols))
        .collect();
    Tensor2D::new(q.rows(), q.cols(), data)
}

/// Scales weight row `c` (of a channels x out_features matrix) by `2^alpha_c`.
pub fn fold_trip_into_weights(w: &Tensor2D, p: &TripParams) -> Result<Tensor2D> {
    if w.rows() != p.channels() {
        return Err(Error::ShapeMismatch {
            op: "fold_trip_into_weights",
            left: w.shape(),
            right: (p.channels(), w.cols()),
        });
    }
    let factors: Vec<f32> = p.alphas.iter().map(|&a| (1u32 << a) as f32).collect();
    Ok(Tensor2D::from_fn(w.rows(), w.cols(), |r, c| w.get(r, c) * factors[r]))
}

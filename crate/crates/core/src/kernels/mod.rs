//! Matrix-multiplication back ends.
//!
//! * [`gemm_f32`] - FP32 reference, f64 accumulation.
//! * [`gemm_int_affine`] - unsigned activation codes against signed
//!   per-output-channel weight codes, 32-bit accumulation with the zero-point
//!   cross term removed after the integer sum.
//! * [`int4`] - the packed INT4 lane multiplier: two weight nibbles share one
//!   multiply, products are spread into two 16-bit sub-lanes of a 32-bit
//!   accumulator.
//! * [`log2`] - AttnV with log2-coded probabilities evaluated as shifts.
//!
//! All kernels split work by output row; each row is computed independently,
//! so results do not depend on the rayon thread count.

pub mod bench;
pub mod int4;
pub mod log2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantScheme, QuantTensor};
use crate::tensor::Tensor2D;

pub use int4::{
    gemm_int4_packed, gemm_int4_packed_raw, gemm_int4_packed_requant, lane_accumulate, lane_multiply, pack_int4,
    Int4Weights, LaneAccumulator, PackedInt4Matrix, LANE_BUDGET,
};
pub use log2::gemm_log2_attnv;

fn check_inner(op: &'static str, a: (usize, usize), w: (usize, usize)) -> Result<()> {
    if a.1 != w.0 {
        return Err(Error::ShapeMismatch { op, left: a, right: w });
    }
    Ok(())
}

/// `a (m x k) * w (k x n)` with f64 accumulation in ascending `k` order.
pub fn gemm_f32(a: &Tensor2D, w: &Tensor2D) -> Result<Tensor2D> {
    check_inner("gemm_f32", a.shape(), w.shape())?;
    let (m, k, n) = (a.rows(), a.cols(), w.cols());
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(t, row)| {
            let mut acc = vec![0.0f64; n];
            for kk in 0..k {
                let av = a.get(t, kk) as f64;
                for (j, slot) in acc.iter_mut().enumerate() {
                    *slot += av * w.get(kk, j) as f64;
                }
            }
            for (o, v) in row.iter_mut().zip(acc) {
                *o = v as f32;
            }
        });
    }
    Tensor2D::new(m, n, out)
}

/// Weights quantized per output channel (column) with a signed symmetric range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelQuantWeights {
    rows: usize,
    cols: usize,
    bits: u8,
    codes: Vec<i8>,
    scales: Vec<f32>,
}

impl ChannelQuantWeights {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> u32 {
        self.bits as u32
    }

    /// Row-major signed codes.
    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Largest code magnitude, `2^(bits-1) - 1` (the symmetric range never emits `-2^(bits-1)`).
    pub fn max_code(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn dequantize(&self) -> Tensor2D {
        Tensor2D::from_fn(self.rows, self.cols, |r, c| {
            self.codes[r * self.cols + c] as f32 * self.scales[c]
        })
    }
}

/// Symmetric per-column quantization: `s_j = max|w[:, j]| / (2^(bits-1) - 1)`.
pub fn quantize_weights(w: &Tensor2D, bits: u32) -> Result<ChannelQuantWeights> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidBits(bits));
    }
    if w.is_empty() {
        return Err(Error::EmptyTensor("quantize_weights"));
    }
    let qmax = ((1 << (bits - 1)) - 1) as f32;
    let scales: Vec<f32> = (0..w.cols())
        .map(|j| {
            let m = (0..w.rows()).fold(0.0f32, |m, r| m.max(w.get(r, j).abs()));
            m.max(crate::quant::SCALE_EPS) / qmax
        })
        .collect();
    let codes = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / scales[i % w.cols()]).round_ties_even().clamp(-qmax, qmax) as i8)
        .collect();
    Ok(ChannelQuantWeights {
        rows: w.rows(),
        cols: w.cols(),
        bits: bits as u8,
        codes,
        scales,
    })
}

/// Largest inner dimension for which both `sum a*w` and `zp * sum w` stay inside `i32`.
pub fn affine_inner_limit(act_lo: i32, act_hi: i32, zero_point: i32, weight_bits: u32) -> usize {
    let amax = act_lo.unsigned_abs().max(act_hi.unsigned_abs()) as u64;
    let wmax = 1u64 << (weight_bits - 1);
    let per_term = wmax * (amax + zero_point.unsigned_abs() as u64);
    (i32::MAX as u64 / per_term.max(1)) as usize
}

/// Per-inner-channel left shifts carried by TRIP activations, zero for affine ones.
pub(crate) fn refinement_shifts(aq: &QuantTensor) -> Vec<u32> {
    match aq.scheme() {
        QuantScheme::Trip(tp) => tp.alphas.iter().map(|&a| a as u32).collect(),
        _ => vec![0; aq.cols()],
    }
}

/// `Y[t, j] = s_a * s_j * (sum_k a[t,k] * w[k,j] - zp_a * sum_k w[k,j])`.
///
/// For TRIP activations the step of channel `k` is `2^alpha_k * s_a`; the
/// factor is applied as an exact left shift of weight row `k` inside the
/// integer sum, the integer counterpart of
/// [`crate::trip::fold_trip_into_weights`].
pub fn gemm_int_affine(aq: &QuantTensor, wq: &ChannelQuantWeights) -> Result<Tensor2D> {
    let p = aq.layer_params().ok_or(Error::KindMismatch {
        expected: "affine or trip",
        found: aq.kind().name(),
    })?;
    check_inner("gemm_int_affine", aq.shape(), wq.shape())?;
    let (m, k, n) = (aq.rows(), aq.cols(), wq.cols());
    let shifts = refinement_shifts(aq);
    let max_shift = shifts.iter().copied().max().unwrap_or(0);
    let limit = affine_inner_limit(p.range.lo(), p.range.hi(), p.zero_point, wq.bits()) >> max_shift;
    if k > limit {
        return Err(Error::AccumulatorOverflow { inner: k, limit });
    }
    let wsum: Vec<i32> = (0..n)
        .map(|j| (0..k).map(|kk| (wq.codes[kk * n + j] as i32) << shifts[kk]).sum())
        .collect();
    let zp = p.zero_point;
    let sa = p.scale as f64;
    let codes = aq.codes();
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(t, row)| {
            let mut acc = vec![0i32; n];
            let arow = &codes[t * k..(t + 1) * k];
            for (kk, &a) in arow.iter().enumerate() {
                let a = a << shifts[kk];
                let wrow = &wq.codes[kk * n..(kk + 1) * n];
                for (slot, &w) in acc.iter_mut().zip(wrow) {
                    *slot += a * w as i32;
                }
            }
            for j in 0..n {
                let corrected = acc[j] - zp * wsum[j];
                row[j] = (sa * wq.scales[j] as f64 * corrected as f64) as f32;
            }
        });
    }
    Tensor2D::new(m, n, out)
}

/// Matmul sites of a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteName {
    /// The fused query/key/value projection.
    LinearTransform,
    #[serde(rename = "qk")]
    QK,
    AttnV,
    Projection,
    #[serde(rename = "fc1")]
    FC1,
    #[serde(rename = "fc2")]
    FC2,
}

impl SiteName {
    pub const ALL: [SiteName; 6] = [
        SiteName::LinearTransform,
        SiteName::QK,
        SiteName::AttnV,
        SiteName::Projection,
        SiteName::FC1,
        SiteName::FC2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteName::LinearTransform => "linear_transform",
            SiteName::QK => "qk",
            SiteName::AttnV => "attn_v",
            SiteName::Projection => "projection",
            SiteName::FC1 => "fc1",
            SiteName::FC2 => "fc2",
        }
    }

    /// Sites whose second operand is a learned weight matrix.
    pub fn has_weights(self) -> bool {
        !matches!(self, SiteName::QK | SiteName::AttnV)
    }

    /// Sites whose activation input is produced after the attention mixing.
    pub fn is_post_attention(self) -> bool {
        matches!(self, SiteName::Projection | SiteName::FC1 | SiteName::FC2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActQuantizer {
    Affine,
    Trip,
    Log2,
}

/// Precision assignment for one matmul site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmSite {
    pub name: SiteName,
    pub act_bits: u32,
    pub weight_bits: u32,
    pub act_quantizer: ActQuantizer,
}

impl GemmSite {
    pub fn fp(name: SiteName) -> Self {
        Self {
            name,
            act_bits: 32,
            weight_bits: 32,
            act_quantizer: ActQuantizer::Affine,
        }
    }

    pub fn is_fp(&self) -> bool {
        self.act_bits == 32
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("site {}: {msg}", self.name.as_str())));
        if !matches!(self.act_bits, 4 | 8 | 32) {
            return bad(format!("act_bits {} not in {{4, 8, 32}}", self.act_bits));
        }
        if !matches!(self.weight_bits, 4 | 32) {
            return bad(format!("weight_bits {} not in {{4, 32}}", self.weight_bits));
        }
        if self.act_bits <= 8 && self.name.has_weights() && self.weight_bits != 4 {
            return bad("quantized activations require 4-bit weights".into());
        }
        if self.act_bits == 32 && self.weight_bits != 32 {
            return bad("fp activations require fp weights".into());
        }
        if !self.is_fp() {
            let softmax = self.name == SiteName::AttnV;
            if softmax != (self.act_quantizer == ActQuantizer::Log2) {
                return bad("the log2 quantizer is used exactly at the softmax output (attn_v)".into());
            }
            if self.act_bits == 4 && !self.name.is_post_attention() {
                return bad("4-bit activations are restricted to post-attention sites".into());
            }
        }
        Ok(())
    }
}

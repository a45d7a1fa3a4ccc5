//! AttnV with log2-coded probabilities.
//!
//! A probability code `c` stands for `sign * max_abs * 2^-c`, so each
//! product with a value code reduces to a shift. With headroom `K_s` the row
//! sum `sum_j sign * ((v_j - zp) << K_s) >> c_j` is accumulated in `i64` and
//! scaled once by `max_abs * s_v * 2^-K_s`.
//!
//! `K_s` is `2^(bits-1) - 1` (every shift exact) unless that would overflow
//! the accumulator, in which case it is lowered to the largest safe value and
//! codes above it are truncated by the right shift. For 4- and 5-bit
//! probabilities and any realistic sequence length the path is exact.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{QuantScheme, QuantTensor};
use crate::tensor::Tensor2D;

/// Shift headroom used for `k` inner terms with `|v - zp| <= vmax`.
pub fn shift_headroom(max_code: i32, k: usize, vmax: u64) -> u32 {
    let bound = (k as u64).max(1) * vmax.max(1);
    // keep bound * 2^K_s below 2^62
    let used = 64 - bound.leading_zeros();
    (max_code as u32).min(62u32.saturating_sub(used))
}

/// `probs (T x T', log2) * v (T' x d, affine)`.
pub fn gemm_log2_attnv(probs_q: &QuantTensor, vq: &QuantTensor) -> Result<Tensor2D> {
    let QuantScheme::Log2(lp) = probs_q.scheme() else {
        return Err(Error::KindMismatch {
            expected: "log2",
            found: probs_q.kind().name(),
        });
    };
    let vp = vq.layer_params().ok_or(Error::KindMismatch {
        expected: "affine",
        found: vq.kind().name(),
    })?;
    if probs_q.cols() != vq.rows() {
        return Err(Error::ShapeMismatch {
            op: "gemm_log2_attnv",
            left: probs_q.shape(),
            right: vq.shape(),
        });
    }
    let (m, k, n) = (probs_q.rows(), probs_q.cols(), vq.cols());
    let zp = vp.zero_point as i64;
    let vmax = (vp.range.lo() as i64 - zp)
        .unsigned_abs()
        .max((vp.range.hi() as i64 - zp).unsigned_abs());
    let ks = shift_headroom(lp.max_code(), k, vmax);
    let scale = lp.max_abs as f64 * vp.scale as f64 * (-(ks as f64)).exp2();

    let codes = probs_q.codes();
    let signs = probs_q.signs();
    let v = vq.codes();
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let mut acc = vec![0i64; n];
            for j in 0..k {
                let s = signs[i * k + j] as i64;
                if s == 0 {
                    continue;
                }
                let shift = codes[i * k + j] as u32;
                for (slot, &vc) in acc.iter_mut().zip(&v[j * n..(j + 1) * n]) {
                    let centered = vc as i64 - zp;
                    let mag = ((centered.unsigned_abs() << ks) >> shift.min(63)) as i64;
                    *slot += s * centered.signum() * mag;
                }
            }
            for (o, a) in row.iter_mut().zip(acc) {
                *o = (a as f64 * scale) as f32;
            }
        });
    }
    Tensor2D::new(m, n, out)
}

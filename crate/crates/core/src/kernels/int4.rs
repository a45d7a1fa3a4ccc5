//! Packed INT4 GEMM built on a lane multiplier.
//!
//! Two 4-bit weight codes for adjacent output channels share one byte (low
//! nibble = channel `2p`, high nibble = channel `2p + 1`). Widening the byte
//! to 16 bits with the high nibble moved to bits `[8, 12)` lets one multiply
//! by the shared activation code produce both products, one per byte; since
//! `15 * 15 = 225 < 256` nothing carries across the byte boundary.
//!
//! Accumulation spreads the two bytes of each product into the two 16-bit
//! halves of a 32-bit word (`(p | p << 8) & 0x00FF00FF`) and adds words. A
//! half can absorb `2^8` maximal products (`256 * 225 = 57600 < 2^16`), so
//! the inner dimension is processed in groups of at most 256 whose sub-lane
//! totals are combined in plain 32-bit integers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{self, QuantTensor};
use crate::tensor::Tensor2D;

use super::ChannelQuantWeights;

/// Additions a [`LaneAccumulator`] accepts before a sub-lane could overflow.
pub const LANE_BUDGET: u32 = 256;

const SPREAD_MASK: u32 = 0x00FF_00FF;
const NIBBLE_MAX: u8 = 15;

/// Weight codes packed two per byte along row pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInt4Matrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

impl PackedInt4Matrix {
    /// Logical (unpadded) row count.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_pairs(&self) -> usize {
        self.rows.div_ceil(2)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    #[inline]
    pub fn cell(&self, pair: usize, col: usize) -> u8 {
        self.bytes[pair * self.cols + col]
    }

    /// Row-major codes, padding row dropped.
    pub fn unpack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.rows * self.cols];
        for p in 0..self.row_pairs() {
            for c in 0..self.cols {
                let b = self.cell(p, c);
                out[2 * p * self.cols + c] = b & 0x0F;
                if 2 * p + 1 < self.rows {
                    out[(2 * p + 1) * self.cols + c] = b >> 4;
                }
            }
        }
        out
    }
}

/// Packs row-major nibble codes; an odd final row is paired with zeros.
pub fn pack_int4(codes: &[u8], rows: usize, cols: usize) -> Result<PackedInt4Matrix> {
    if codes.len() != rows * cols {
        return Err(Error::LengthMismatch {
            expected: rows * cols,
            actual: codes.len(),
        });
    }
    if let Some(&c) = codes.iter().find(|&&c| c > NIBBLE_MAX) {
        return Err(Error::CodeOutOfRange {
            code: c as i64,
            lo: 0,
            hi: NIBBLE_MAX as i64,
        });
    }
    let pairs = rows.div_ceil(2);
    let mut bytes = Vec::with_capacity(pairs * cols);
    for p in 0..pairs {
        for c in 0..cols {
            let lo = codes[2 * p * cols + c];
            let hi = if 2 * p + 1 < rows {
                codes[(2 * p + 1) * cols + c]
            } else {
                0
            };
            bytes.push(lo | (hi << 4));
        }
    }
    Ok(PackedInt4Matrix { rows, cols, bytes })
}

/// Multiplies both nibbles of `cell` by `act` in one 16-bit multiply.
///
/// Low byte of the result is `lo * act`, high byte is `hi * act`.
#[inline]
pub fn lane_multiply(cell: u8, act: u8) -> u16 {
    debug_assert!(act <= NIBBLE_MAX);
    let widened = (cell & 0x0F) as u16 | (((cell >> 4) as u16) << 8);
    widened * act as u16
}

/// Two 16-bit sub-lanes in one 32-bit word.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LaneAccumulator {
    word: u32,
    adds: u32,
}

impl LaneAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn additions(&self) -> u32 {
        self.adds
    }

    pub fn word(&self) -> u32 {
        self.word
    }

    /// `(bits [0, 16), bits [16, 32))`.
    pub fn lanes(&self) -> (u32, u32) {
        (self.word & 0xFFFF, self.word >> 16)
    }

    #[inline]
    pub fn add(&mut self, product: u16) -> Result<()> {
        if self.adds >= LANE_BUDGET {
            return Err(Error::BudgetExceeded(LANE_BUDGET));
        }
        let p = product as u32;
        self.word = self.word.wrapping_add((p | (p << 8)) & SPREAD_MASK);
        self.adds += 1;
        Ok(())
    }
}

/// Functional form of [`LaneAccumulator::add`].
pub fn lane_accumulate(acc: LaneAccumulator, product: u16) -> Result<LaneAccumulator> {
    let mut acc = acc;
    acc.add(product)?;
    Ok(acc)
}

fn check_act_codes(codes: &[u8]) -> Result<()> {
    match codes.iter().find(|&&c| c > NIBBLE_MAX) {
        Some(&c) => Err(Error::CodeOutOfRange {
            code: c as i64,
            lo: 0,
            hi: NIBBLE_MAX as i64,
        }),
        None => Ok(()),
    }
}

fn check_raw_shapes(a_codes: &[u8], m: usize, k: usize, wp: &PackedInt4Matrix) -> Result<()> {
    if a_codes.len() != m * k {
        return Err(Error::LengthMismatch {
            expected: m * k,
            actual: a_codes.len(),
        });
    }
    if wp.cols != k {
        return Err(Error::ShapeMismatch {
            op: "gemm_int4_packed",
            left: (m, k),
            right: (wp.cols, wp.rows),
        });
    }
    // k * 225 must fit the u32 combination of group totals
    let limit = (u32::MAX / 225) as usize;
    if k > limit {
        return Err(Error::AccumulatorOverflow { inner: k, limit });
    }
    check_act_codes(a_codes)
}

/// Raw integer product `A (m x k) * W^T` where `wp` packs `W` as
/// `n x k` (one row per output channel, pairs of output channels per byte).
///
/// Returns `m x n` row-major sums `sum_k a[t,k] * w[j,k]` of unsigned codes.
pub fn gemm_int4_packed_raw(a_codes: &[u8], m: usize, k: usize, wp: &PackedInt4Matrix) -> Result<Vec<u32>> {
    check_raw_shapes(a_codes, m, k, wp)?;
    let n = wp.rows;
    let mut out = vec![0u32; m * n];
    if n == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(n).enumerate().for_each(|(t, row)| {
        let arow = &a_codes[t * k..(t + 1) * k];
        for p in 0..wp.row_pairs() {
            let cells = &wp.bytes[p * k..(p + 1) * k];
            let (mut lo_total, mut hi_total) = (0u32, 0u32);
            for (agroup, cgroup) in arow
                .chunks(LANE_BUDGET as usize)
                .zip(cells.chunks(LANE_BUDGET as usize))
            {
                let mut acc = LaneAccumulator::new();
                for (&a, &cell) in agroup.iter().zip(cgroup) {
                    acc.add(lane_multiply(cell, a))
                        .expect("group length bounded by lane budget");
                }
                let (lo, hi) = acc.lanes();
                lo_total += lo;
                hi_total += hi;
            }
            row[2 * p] = lo_total;
            if 2 * p + 1 < n {
                row[2 * p + 1] = hi_total;
            }
        }
    });
    Ok(out)
}

/// Word-parallel variant of [`gemm_int4_packed_raw`]: two row pairs (four
/// 16-bit sub-lanes) per `u64`, bit-identical to the scalar model.
#[cfg(feature = "swar")]
pub fn gemm_int4_packed_raw_swar(a_codes: &[u8], m: usize, k: usize, wp: &PackedInt4Matrix) -> Result<Vec<u32>> {
    check_raw_shapes(a_codes, m, k, wp)?;
    let n = wp.rows;
    let pairs = wp.row_pairs();
    let quads = pairs.div_ceil(2);
    // spread[q * k + kk]: nibbles of pairs 2q and 2q+1 in four 16-bit lanes
    let spread: Vec<u64> = (0..quads)
        .flat_map(|q| {
            (0..k).map(move |kk| {
                let lane = |p: usize| -> u64 {
                    if p >= pairs {
                        return 0;
                    }
                    let b = wp.cell(p, kk) as u64;
                    (b & 0x0F) | ((b >> 4) << 16)
                };
                lane(2 * q) | (lane(2 * q + 1) << 32)
            })
        })
        .collect();
    let mut out = vec![0u32; m * n];
    if n == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(n).enumerate().for_each(|(t, row)| {
        let arow = &a_codes[t * k..(t + 1) * k];
        for q in 0..quads {
            let w = &spread[q * k..(q + 1) * k];
            let mut totals = [0u32; 4];
            for (agroup, wgroup) in arow.chunks(LANE_BUDGET as usize).zip(w.chunks(LANE_BUDGET as usize)) {
                let mut acc = 0u64;
                for (&a, &wv) in agroup.iter().zip(wgroup) {
                    acc += wv * a as u64;
                }
                for (lane, total) in totals.iter_mut().enumerate() {
                    *total += ((acc >> (16 * lane)) & 0xFFFF) as u32;
                }
            }
            for (lane, &total) in totals.iter().enumerate() {
                let j = 4 * q + lane;
                if j < n {
                    row[j] = total;
                }
            }
        }
    });
    Ok(out)
}

/// 4-bit weights prepared for the packed kernel.
///
/// Signed codes `c` in `[-7, 7]` are stored as unsigned `c + 8`, the
/// zero point of the unsigned view.
#[derive(Debug, Clone, PartialEq)]
pub struct Int4Weights {
    inner: usize,
    packed: PackedInt4Matrix,
    scales: Vec<f32>,
    col_sums: Vec<i64>,
}

impl Int4Weights {
    pub const ZERO_POINT: i32 = 8;

    pub fn from_quantized(wq: &ChannelQuantWeights) -> Result<Self> {
        if wq.bits() != 4 {
            return Err(Error::InvalidBits(wq.bits()));
        }
        let (k, n) = wq.shape();
        // transpose to one row per output channel
        let mut codes = vec![0u8; n * k];
        for kk in 0..k {
            for j in 0..n {
                codes[j * k + kk] = (wq.codes()[kk * n + j] as i32 + Self::ZERO_POINT) as u8;
            }
        }
        let col_sums = (0..n)
            .map(|j| codes[j * k..(j + 1) * k].iter().map(|&c| c as i64).sum())
            .collect();
        Ok(Self {
            inner: k,
            packed: pack_int4(&codes, n, k)?,
            scales: wq.scales().to_vec(),
            col_sums,
        })
    }

    pub fn packed(&self) -> &PackedInt4Matrix {
        &self.packed
    }

    pub fn inner(&self) -> usize {
        self.inner
    }

    pub fn out_features(&self) -> usize {
        self.packed.rows
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }
}

fn activation_nibbles(aq: &QuantTensor) -> Result<(Vec<u8>, f64, i64)> {
    let p = aq.layer_params().ok_or(Error::KindMismatch {
        expected: "affine or trip",
        found: aq.kind().name(),
    })?;
    if p.range.is_signed() || p.range.bits() != 4 {
        return Err(Error::InvalidParams(
            "packed INT4 path takes unsigned 4-bit activations".into(),
        ));
    }
    Ok((
        aq.codes().iter().map(|&c| c as u8).collect(),
        p.scale as f64,
        p.zero_point as i64,
    ))
}

fn raw_product(codes: &[u8], m: usize, k: usize, wp: &PackedInt4Matrix) -> Result<Vec<u32>> {
    #[cfg(feature = "swar")]
    return gemm_int4_packed_raw_swar(codes, m, k, wp);
    #[cfg(not(feature = "swar"))]
    return gemm_int4_packed_raw(codes, m, k, wp);
}

/// Packed INT4 GEMM, affine-corrected and scaled to FP32:
/// `Y[t,j] = s_a * s_j * sum_k (a - zp_a)(w - 8)` expanded around the raw sum.
///
/// TRIP activations are split by refinement exponent: each group of inner
/// channels sharing one `alpha` runs through the packed kernel on its own and
/// the corrected group sums are combined with `<< alpha`.
pub fn gemm_int4_packed(aq: &QuantTensor, w: &Int4Weights) -> Result<Tensor2D> {
    if aq.cols() != w.inner {
        return Err(Error::ShapeMismatch {
            op: "gemm_int4_packed",
            left: aq.shape(),
            right: (w.inner, w.out_features()),
        });
    }
    let (codes, sa, za) = activation_nibbles(aq)?;
    let (m, k, n) = (aq.rows(), aq.cols(), w.out_features());
    let shifts = super::refinement_shifts(aq);
    let zw = Int4Weights::ZERO_POINT as i64;
    let mut total = vec![0i64; m * n];

    let mut groups: Vec<u32> = shifts.clone();
    groups.sort_unstable();
    groups.dedup();
    for &alpha in &groups {
        let member: Vec<bool> = shifts.iter().map(|&s| s == alpha).collect();
        let single = groups.len() == 1;
        let masked: Vec<u8> = if single {
            codes.clone()
        } else {
            codes
                .iter()
                .enumerate()
                .map(|(i, &c)| if member[i % k] { c } else { 0 })
                .collect()
        };
        let raw = raw_product(&masked, m, k, &w.packed)?;
        let width = member.iter().filter(|&&b| b).count() as i64;
        let col_sums: Vec<i64> = if single {
            w.col_sums.clone()
        } else {
            let unpacked = w.packed.unpack();
            (0..n)
                .map(|j| {
                    (0..k)
                        .filter(|&kk| member[kk])
                        .map(|kk| unpacked[j * k + kk] as i64)
                        .sum()
                })
                .collect()
        };
        for t in 0..m {
            let asum: i64 = masked[t * k..(t + 1) * k].iter().map(|&c| c as i64).sum();
            for j in 0..n {
                let centered = raw[t * n + j] as i64 - zw * asum - za * col_sums[j] + width * za * zw;
                total[t * n + j] += centered << alpha;
            }
        }
    }
    let out = (0..m * n)
        .map(|i| (sa * w.scales[i % n.max(1)] as f64 * total[i] as f64) as f32)
        .collect();
    Tensor2D::new(m, n, out)
}

/// [`gemm_int4_packed`] followed by 4-bit requantization of the output.
pub fn gemm_int4_packed_requant(aq: &QuantTensor, w: &Int4Weights) -> Result<QuantTensor> {
    let y = gemm_int4_packed(aq, w)?;
    let p = quant::fit_affine(&y, 4)?;
    quant::quantize_affine(&y, &p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_layout() {
        let p = pack_int4(&[3, 5], 2, 1).unwrap();
        assert_eq!(p.bytes(), &[0x53]);
        let z = pack_int4(&[0; 12], 4, 3).unwrap();
        assert!(z.bytes().iter().all(|&b| b == 0));
        let odd = pack_int4(&[1, 2, 3, 4, 5, 6], 3, 2).unwrap();
        assert_eq!(odd.bytes(), &[0x31, 0x42, 0x05, 0x06]);
        assert_eq!(odd.unpack(), vec![1, 2, 3, 4, 5, 6]);
        assert!(matches!(pack_int4(&[16], 1, 1), Err(Error::CodeOutOfRange { .. })));
    }

    #[test]
    fn lane_multiply_examples() {
        let v = lane_multiply(0x53, 7);
        assert_eq!(v, 8981);
        assert_eq!((v & 0xFF, v >> 8), (21, 35));
        assert_eq!(lane_multiply(0x53, 0), 0);
        let m = lane_multiply(0xFF, 15);
        assert_eq!(m, 57825);
        assert_eq!((m & 0xFF, m >> 8), (225, 225));
    }

    #[test]
    fn accumulator_examples() {
        assert_eq!(LaneAccumulator::new().lanes(), (0, 0));
        let acc = lane_accumulate(LaneAccumulator::new(), 8981).unwrap();
        assert_eq!(acc.lanes(), (21, 35));

        let mut acc = LaneAccumulator::new();
        for _ in 0..LANE_BUDGET {
            acc.add(lane_multiply(0xFF, 15)).unwrap();
        }
        assert_eq!(acc.lanes(), (57600, 57600));
        assert!(matches!(acc.add(0), Err(Error::BudgetExceeded(256))));
        assert_eq!(acc.additions(), 256);
    }

    #[test]
    fn rejects_wide_activation_codes() {
        let wp = pack_int4(&[1, 2], 1, 2).unwrap();
        assert!(matches!(
            gemm_int4_packed_raw(&[1, 16], 1, 2, &wp),
            Err(Error::CodeOutOfRange { .. })
        ));
        assert!(matches!(
            gemm_int4_packed_raw(&[1, 2, 3], 1, 3, &wp),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}

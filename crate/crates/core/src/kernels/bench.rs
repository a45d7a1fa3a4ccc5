//! Latency harness for the GEMM kernels.
//!
//! Inputs come from a fixed-seed generator and are quantized once up front;
//! only the kernel call is timed. Reported numbers are host wall-clock and
//! informational.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quant::{fit_affine, quantize_affine};
use crate::tensor::Tensor2D;

use super::{gemm_f32, gemm_int4_packed, gemm_int_affine, quantize_weights, Int4Weights};

pub const BENCH_SEED: u64 = 0x5eed_0001;
pub const MIN_REPEATS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    F32,
    Int8,
    Int4,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [KernelKind::F32, KernelKind::Int8, KernelKind::Int4];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::F32 => "f32",
            KernelKind::Int8 => "int8",
            KernelKind::Int4 => "int4",
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(KernelKind::F32),
            "int8" => Ok(KernelKind::Int8),
            "int4" => Ok(KernelKind::Int4),
            other => Err(Error::UnknownKernel(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub kernel: &'static str,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub repeats: usize,
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    /// FNV-1a over the bit patterns of both generated operands.
    pub input_checksum: u64,
}

fn fnv1a(values: impl Iterator<Item = f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Deterministic operands `(a: m x k, w: k x n)` in `[-1, 1)`.
pub fn bench_inputs(m: usize, k: usize, n: usize, seed: u64) -> (Tensor2D, Tensor2D) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor2D::from_fn(m, k, |_, _| rng.random_range(-1.0f32..1.0));
    let w = Tensor2D::from_fn(k, n, |_, _| rng.random_range(-1.0f32..1.0));
    (a, w)
}

/// Nearest-rank quantile of sorted samples.
fn quantile(sorted: &[u64], q: f64) -> u64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub fn bench_gemm(m: usize, k: usize, n: usize, kernel: KernelKind, repeats: usize) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::InvalidConfig(format!(
            "repeats {repeats} below minimum {MIN_REPEATS}"
        )));
    }
    let (a, w) = bench_inputs(m, k, n, BENCH_SEED);
    let input_checksum = fnv1a(a.data().iter().chain(w.data()).copied());

    let mut run: Box<dyn FnMut() -> Result<Tensor2D>> = match kernel {
        KernelKind::F32 => Box::new(move || gemm_f32(&a, &w)),
        KernelKind::Int8 => {
            let aq = quantize_affine(&a, &fit_affine(&a, 8)?)?;
            let wq = quantize_weights(&w, 4)?;
            Box::new(move || gemm_int_affine(&aq, &wq))
        }
        KernelKind::Int4 => {
            let aq = quantize_affine(&a, &fit_affine(&a, 4)?)?;
            let wq = Int4Weights::from_quantized(&quantize_weights(&w, 4)?)?;
            Box::new(move || gemm_int4_packed(&aq, &wq))
        }
    };

    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let y = run()?;
        samples.push(start.elapsed().as_nanos() as u64);
        std::hint::black_box(y);
    }
    samples.sort_unstable();
    Ok(BenchReport {
        kernel: kernel.as_str(),
        m,
        k,
        n,
        repeats,
        median_ns: quantile(&samples, 0.5),
        p10_ns: quantile(&samples, 0.1),
        p90_ns: quantile(&samples, 0.9),
        input_checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_ordered() {
        let r = bench_gemm(64, 64, 64, KernelKind::F32, 5).unwrap();
        assert!(r.p10_ns <= r.median_ns && r.median_ns <= r.p90_ns);
        assert_eq!(r.repeats, 5);
    }

    #[test]
    fn inputs_deterministic() {
        let a = bench_gemm(8, 8, 8, KernelKind::Int8, 3).unwrap();
        let b = bench_gemm(8, 8, 8, KernelKind::Int4, 3).unwrap();
        assert_eq!(a.input_checksum, b.input_checksum);
    }

    #[test]
    fn validation() {
        assert!(bench_gemm(4, 4, 4, KernelKind::F32, 2).is_err());
        assert!(matches!("int2".parse::<KernelKind>(), Err(Error::UnknownKernel(_))));
        assert_eq!("int4".parse::<KernelKind>().unwrap(), KernelKind::Int4);
    }

    #[test]
    fn nearest_rank() {
        let s: Vec<u64> = (1..=10).collect();
        assert_eq!(quantile(&s, 0.1), 1);
        assert_eq!(quantile(&s, 0.5), 5);
        assert_eq!(quantile(&s, 0.9), 9);
    }
}

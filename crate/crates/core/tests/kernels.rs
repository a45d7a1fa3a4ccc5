use agq_core::kernels::{
    gemm_f32, gemm_int4_packed, gemm_int4_packed_raw, gemm_int_affine, gemm_log2_attnv, lane_multiply, pack_int4,
    quantize_weights, Int4Weights, LaneAccumulator, LANE_BUDGET,
};
use agq_core::quant::{dequantize, fit_affine, quantize_affine, quantize_log2, QuantTensor};
use agq_core::trip::{fit_trip, quantize_trip};
use agq_core::{Error, Tensor2D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_raw(a: &[u8], m: usize, k: usize, w: &[u8], n: usize) -> Vec<u32> {
    let mut out = vec![0u32; m * n];
    for t in 0..m {
        for j in 0..n {
            out[t * n + j] = (0..k).map(|kk| a[t * k + kk] as u32 * w[j * k + kk] as u32).sum();
        }
    }
    out
}

fn nibbles(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..16u8)).collect()
}

fn normal_like(rng: &mut ChaCha8Rng, rows: usize, cols: usize, mag: f32) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| (rng.random::<f32>() - 0.5) * 2.0 * mag)
}

#[test]
fn lane_multiply_every_triple() {
    for cell in 0..=255u8 {
        for a in 0..16u8 {
            let p = lane_multiply(cell, a);
            assert_eq!((p & 0xFF) as u32, (cell & 0x0F) as u32 * a as u32);
            assert_eq!((p >> 8) as u32, (cell >> 4) as u32 * a as u32);
        }
    }
}

#[test]
fn lane_budget_is_exact() {
    let max = lane_multiply(0xFF, 15);
    assert_eq!(max, 225 | (225 << 8));
    let mut acc = LaneAccumulator::new();
    for _ in 0..LANE_BUDGET {
        acc.add(max).unwrap();
    }
    assert_eq!(acc.lanes(), (57600, 57600));
    assert_eq!(acc.additions(), 256);
    assert!(matches!(acc.add(max), Err(Error::BudgetExceeded(_))));
    // one lane never leaks into the other
    let mut lo_only = LaneAccumulator::new();
    for _ in 0..LANE_BUDGET {
        lo_only.add(lane_multiply(0x0F, 15)).unwrap();
    }
    assert_eq!(lo_only.lanes(), (57600, 0));
}

#[test]
fn packing_roundtrips_with_odd_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (rows, cols) in [(1, 1), (3, 5), (4, 2), (7, 9)] {
        let codes = nibbles(&mut rng, rows * cols);
        let p = pack_int4(&codes, rows, cols).unwrap();
        assert_eq!(p.row_pairs(), rows.div_ceil(2));
        assert_eq!(p.bytes().len(), p.row_pairs() * cols);
        assert_eq!(p.unpack(), codes);
    }
    assert!(pack_int4(&[16], 1, 1).is_err());
    assert!(pack_int4(&[1, 2], 1, 1).is_err());
}

#[test]
fn packed_raw_matches_naive_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbeef);
    for _ in 0..1000 {
        let (m, k, n) = (
            rng.random_range(1..=64),
            rng.random_range(1..=64),
            rng.random_range(1..=64),
        );
        let a = nibbles(&mut rng, m * k);
        let w = nibbles(&mut rng, n * k);
        let wp = pack_int4(&w, n, k).unwrap();
        assert_eq!(
            gemm_int4_packed_raw(&a, m, k, &wp).unwrap(),
            naive_raw(&a, m, k, &w, n),
            "{m}x{k}x{n}"
        );
    }
}

#[test]
fn packed_raw_splits_long_inner_dimension() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for (m, n) in [(1, 1), (3, 7), (5, 16)] {
        let k = 300;
        // saturated operands stress the group boundary at 256
        for fill in [None, Some(15u8)] {
            let a = fill.map_or_else(|| nibbles(&mut rng, m * k), |v| vec![v; m * k]);
            let w = fill.map_or_else(|| nibbles(&mut rng, n * k), |v| vec![v; n * k]);
            let wp = pack_int4(&w, n, k).unwrap();
            assert_eq!(gemm_int4_packed_raw(&a, m, k, &wp).unwrap(), naive_raw(&a, m, k, &w, n));
        }
    }
}

#[cfg(feature = "swar")]
#[test]
fn swar_equals_scalar() {
    use agq_core::kernels::int4::gemm_int4_packed_raw_swar;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..300 {
        let (m, k, n) = (
            rng.random_range(1..=20),
            rng.random_range(1..=600),
            rng.random_range(1..=20),
        );
        let a = nibbles(&mut rng, m * k);
        let w = nibbles(&mut rng, n * k);
        let wp = pack_int4(&w, n, k).unwrap();
        assert_eq!(
            gemm_int4_packed_raw_swar(&a, m, k, &wp).unwrap(),
            gemm_int4_packed_raw(&a, m, k, &wp).unwrap()
        );
    }
}

/// `s_a * s_j * sum_k (a - zp) * 2^alpha_k * w` in f64.
fn integer_oracle(aq: &QuantTensor, w: &agq_core::kernels::ChannelQuantWeights, alphas: &[u8]) -> Vec<f64> {
    let p = aq.layer_params().unwrap();
    let (m, k, n) = (aq.rows(), aq.cols(), w.cols());
    let mut out = vec![0.0; m * n];
    for t in 0..m {
        for j in 0..n {
            let s: i64 = (0..k)
                .map(|kk| {
                    ((aq.codes()[t * k + kk] - p.zero_point) as i64 * (w.codes()[kk * n + j] as i64)) << alphas[kk]
                })
                .sum();
            out[t * n + j] = p.scale as f64 * w.scales()[j] as f64 * s as f64;
        }
    }
    out
}

fn assert_close(got: &Tensor2D, want: &[f64], rel: f64) {
    let scale = want.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
        assert!((g as f64 - w).abs() <= rel * scale, "element {i}: {g} vs {w}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn int_affine_matches_oracle(seed in any::<u64>(), m in 1usize..12, k in 1usize..40, n in 1usize..12, bits in prop::sample::select(vec![4u32, 8])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_like(&mut rng, m, k, 3.0);
        let w = quantize_weights(&normal_like(&mut rng, k, n, 0.5), 4).unwrap();
        let aq = quantize_affine(&x, &fit_affine(&x, bits).unwrap()).unwrap();
        let got = gemm_int_affine(&aq, &w).unwrap();
        assert_close(&got, &integer_oracle(&aq, &w, &vec![0; k]), 1e-6);
        // and against the dequantized float path
        let fp = gemm_f32(&dequantize(&aq).unwrap(), &w.dequantize()).unwrap();
        let fpv: Vec<f64> = fp.data().iter().map(|&v| v as f64).collect();
        assert_close(&got, &fpv, 1e-5);
        if bits == 4 {
            let packed = gemm_int4_packed(&aq, &Int4Weights::from_quantized(&w).unwrap()).unwrap();
            prop_assert_eq!(packed.data(), got.data());
        }
    }

    #[test]
    fn trip_integer_paths_match_oracle(seed in any::<u64>(), m in 1usize..12, k in 2usize..40, n in 1usize..12, bits in prop::sample::select(vec![4u32, 8])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = normal_like(&mut rng, m, k, 1.0);
        let hot = rng.random_range(0..k);
        x = Tensor2D::from_fn(m, k, |r, c| x.get(r, c) * if c == hot { 20.0 } else { 1.0 });
        let w = quantize_weights(&normal_like(&mut rng, k, n, 0.5), 4).unwrap();
        let cap = if bits == 4 { 2 } else { 3 };
        let tp = fit_trip(&x, bits, cap).unwrap();
        let aq = quantize_trip(&x, &tp).unwrap();
        let want = integer_oracle(&aq, &w, &tp.alphas);
        let got = gemm_int_affine(&aq, &w).unwrap();
        assert_close(&got, &want, 1e-6);
        let fp = gemm_f32(&dequantize(&aq).unwrap(), &w.dequantize()).unwrap();
        let fpv: Vec<f64> = fp.data().iter().map(|&v| v as f64).collect();
        assert_close(&got, &fpv, 1e-5);
        if bits == 4 {
            let packed = gemm_int4_packed(&aq, &Int4Weights::from_quantized(&w).unwrap()).unwrap();
            assert_close(&packed, &want, 1e-6);
        }
    }

    #[test]
    fn log2_attnv_matches_dequantized_path(seed in any::<u64>(), t in 1usize..24, d in 1usize..16, bits in prop::sample::select(vec![4u32, 5, 8])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = Tensor2D::from_fn(t, t, |i, j| if j <= i { rng.random::<f32>() } else { 0.0 });
        let v = normal_like(&mut rng, t, d, 2.0);
        let pq = quantize_log2(&probs, bits).unwrap();
        let vq = quantize_affine(&v, &fit_affine(&v, 8).unwrap()).unwrap();
        let got = gemm_log2_attnv(&pq, &vq).unwrap();
        let want = gemm_f32(&dequantize(&pq).unwrap(), &dequantize(&vq).unwrap()).unwrap();
        let wantv: Vec<f64> = want.data().iter().map(|&x| x as f64).collect();
        assert_close(&got, &wantv, 1e-5);
    }
}

#[test]
fn int4_rejects_wide_activations() {
    let x = Tensor2D::from_fn(2, 4, |r, c| (r + c) as f32);
    let w = quantize_weights(&Tensor2D::from_fn(4, 3, |r, c| r as f32 - c as f32), 4).unwrap();
    let aq = quantize_affine(&x, &fit_affine(&x, 8).unwrap()).unwrap();
    assert!(gemm_int4_packed(&aq, &Int4Weights::from_quantized(&w).unwrap()).is_err());
    let w8 = quantize_weights(&Tensor2D::from_fn(4, 3, |r, c| r as f32 - c as f32), 8).unwrap();
    assert!(Int4Weights::from_quantized(&w8).is_err());
}

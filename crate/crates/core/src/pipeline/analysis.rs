use serde::Serialize;

use crate::error::{Error, Result};
use crate::pruning::AttentionMap;
use crate::tensor::Tensor2D;

/// Number of preceding positions counted as "local" by [`attention_locality`].
pub const LOCALITY_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutlierReport {
    pub k_sigma: f64,
    pub mean_abs: f64,
    pub std_abs: f64,
    /// `mean_abs + k_sigma * std_abs`; an element is an outlier when strictly above it.
    pub threshold: f64,
    pub counts: Vec<usize>,
    /// Channels by descending count, ties by ascending index.
    pub ranking: Vec<usize>,
}

impl OutlierReport {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn analyze_outliers(x: &Tensor2D, k_sigma: f64) -> Result<OutlierReport> {
    if x.is_empty() {
        return Err(Error::EmptyTensor("analyze_outliers"));
    }
    if !(k_sigma > 0.0 && k_sigma.is_finite()) {
        return Err(Error::InvalidParams(format!("k_sigma {k_sigma} must be positive")));
    }
    let n = x.len() as f64;
    let mean_abs = x.data().iter().map(|&v| (v as f64).abs()).sum::<f64>() / n;
    let var = x
        .data()
        .iter()
        .map(|&v| ((v as f64).abs() - mean_abs).powi(2))
        .sum::<f64>()
        / n;
    let std_abs = var.sqrt();
    let threshold = mean_abs + k_sigma * std_abs;

    let mut counts = vec![0usize; x.cols()];
    for r in 0..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            if (v as f64).abs() > threshold {
                counts[c] += 1;
            }
        }
    }
    let mut ranking: Vec<usize> = (0..x.cols()).collect();
    ranking.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    Ok(OutlierReport {
        k_sigma,
        mean_abs,
        std_abs,
        threshold,
        counts,
        ranking,
    })
}

/// Share of each token's attention to earlier positions that lands on the
/// [`LOCALITY_WINDOW`] immediately preceding ones, averaged over tokens
/// `1..T` and heads.
///
/// A token whose whole row sits on itself counts as fully local. Uniform
/// causal attention yields `min(2, i) / i` for token `i`; a stripe on column
/// 0 yields 0 for every `i > 2`.
pub fn attention_locality(map: &AttentionMap) -> Result<f64> {
    map.validate()?;
    let t = map.tokens();
    if t < 2 {
        return Err(Error::InvalidMap("locality needs at least two tokens".into()));
    }
    let mut total = 0.0;
    for p in map.heads() {
        for i in 1..t {
            let row = p.row(i);
            let earlier: f64 = row[..i].iter().map(|&v| v as f64).sum();
            let lo = i.saturating_sub(LOCALITY_WINDOW);
            let near: f64 = row[lo..i].iter().map(|&v| v as f64).sum();
            total += if earlier > 0.0 { near / earlier } else { 1.0 };
        }
    }
    Ok(total / (map.num_heads() * (t - 1)) as f64)
}

/// Cosine of the angle between two tensors viewed as flat vectors.
///
/// Two all-zero tensors compare as identical (1.0); one zero tensor against a
/// nonzero one gives 0.0.
pub fn cosine_similarity(a: &Tensor2D, b: &Tensor2D) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 && nb == 0.0 {
        return Ok(1.0);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    // sqrt of the product, so identical inputs give exactly 1; f32-sourced
    // magnitudes keep na * nb far from f64 overflow
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

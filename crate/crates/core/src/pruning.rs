//! Token pruning guided by attentivity to the start token.
//!
//! A token's importance is the head-averaged probability it assigns to
//! position 0. Pruning runs as a cascade over `m` layers with a constant
//! per-layer ratio `gamma = 1 - (1 - beta)^(1/m)`, so the surviving fraction
//! after the last prune layer is `1 - beta`. The start token is never pruned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{slice_rows, Tensor2D};

/// Tolerance of the row-sum check on attention probabilities.
pub const ROW_SUM_TOL: f64 = 1e-4;

/// Per-head causal attention probabilities, each `T x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    heads: Vec<Tensor2D>,
}

impl AttentionMap {
    pub fn new(heads: Vec<Tensor2D>) -> Result<Self> {
        let map = Self { heads };
        map.validate()?;
        Ok(map)
    }

    pub fn heads(&self) -> &[Tensor2D] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn tokens(&self) -> usize {
        self.heads.first().map_or(0, Tensor2D::rows)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.heads.first() else {
            return Err(Error::InvalidMap("no heads".into()));
        };
        let t = first.rows();
        for (h, p) in self.heads.iter().enumerate() {
            if p.shape() != (t, t) {
                return Err(Error::InvalidMap(format!(
                    "head {h} has shape {:?}, expected {t}x{t}",
                    p.shape()
                )));
            }
            for i in 0..t {
                let row = p.row(i);
                if let Some(j) = (i + 1..t).find(|&j| row[j] != 0.0) {
                    return Err(Error::InvalidMap(format!("head {h}: non-causal entry ({i}, {j})")));
                }
                if row.iter().any(|&v| !(0.0..=1.0 + ROW_SUM_TOL as f32).contains(&v)) {
                    return Err(Error::InvalidMap(format!(
                        "head {h}: row {i} has a value outside [0, 1]"
                    )));
                }
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidMap(format!("head {h}: row {i} sums to {sum}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenImportance {
    pub scores: Vec<f32>,
}

/// Head-mean of column 0.
pub fn score_tokens(map: &AttentionMap) -> Result<TokenImportance> {
    map.validate()?;
    let t = map.tokens();
    let h = map.num_heads() as f64;
    let scores = (0..t)
        .map(|i| (map.heads.iter().map(|p| p.get(i, 0) as f64).sum::<f64>() / h) as f32)
        .collect();
    Ok(TokenImportance { scores })
}

/// Survivor ratio `gamma` for `m` prune layers reaching overall ratio `beta`.
pub fn progressive_ratio(beta: f64, m: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidSchedule(format!("beta {beta} outside [0, 1)")));
    }
    if m == 0 {
        return Err(Error::InvalidSchedule("m must be at least 1".into()));
    }
    Ok(1.0 - (1.0 - beta).powf(1.0 / m as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub total_layers: usize,
    pub start_layer: usize,
    pub prune_layers: Vec<usize>,
    pub final_ratio: f64,
    pub per_layer_ratio: f64,
}

impl PruneSchedule {
    pub fn is_prune_layer(&self, layer: usize) -> bool {
        self.prune_layers.binary_search(&layer).is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        let gamma = progressive_ratio(self.final_ratio, self.prune_layers.len())?;
        if (gamma - self.per_layer_ratio).abs() > 1e-12 {
            return Err(Error::InvalidSchedule(format!(
                "per-layer ratio {} does not match {gamma}",
                self.per_layer_ratio
            )));
        }
        if self.prune_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSchedule("prune layers not strictly increasing".into()));
        }
        if self.prune_layers.first().is_some_and(|&l| l < self.start_layer)
            || self.prune_layers.last().is_some_and(|&l| l >= self.total_layers)
        {
            return Err(Error::InvalidSchedule("prune layer outside [start_layer, n)".into()));
        }
        Ok(())
    }
}

/// Default first prune layer: `n / 4`, at least 1.
pub fn default_start_layer(n: usize) -> usize {
    (n / 4).max(1)
}

/// `m` prune layers spaced evenly over `start_layer..n`, the last at `n - 1`.
pub fn make_schedule(n: usize, start_layer: usize, beta: f64, m: usize) -> Result<PruneSchedule> {
    let per_layer_ratio = progressive_ratio(beta, m)?;
    if start_layer + m > n {
        return Err(Error::InvalidSchedule(format!(
            "{m} prune layers do not fit between layer {start_layer} and {n}"
        )));
    }
    let last = n - 1;
    let prune_layers = if m == 1 {
        vec![last]
    } else {
        (0..m)
            .map(|j| start_layer + j * (last - start_layer) / (m - 1))
            .collect()
    };
    let s = PruneSchedule {
        total_layers: n,
        start_layer,
        prune_layers,
        final_ratio: beta,
        per_layer_ratio,
    };
    s.validate()?;
    Ok(s)
}

/// Number of tokens one prune step drops from `tokens` rows.
pub fn drop_count(tokens: usize, gamma: f64) -> usize {
    if tokens <= 1 {
        return 0;
    }
    // the epsilon absorbs representation error in gamma (e.g. 0.3 * 10)
    ((gamma * (tokens - 1) as f64) + 1e-9).floor() as usize
}

/// Indices kept by one prune step, ascending.
///
/// Drops the `floor(gamma * (T - 1))` lowest-scoring tokens among `1..T`;
/// equal scores drop the later position first.
pub fn select_kept(scores: &TokenImportance, gamma: f64) -> Vec<usize> {
    let t = scores.scores.len();
    let drop = drop_count(t, gamma);
    let mut candidates: Vec<usize> = (1..t).collect();
    candidates.sort_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]).then(b.cmp(&a)));
    let mut dropped = vec![false; t];
    for &i in candidates.iter().take(drop) {
        dropped[i] = true;
    }
    (0..t).filter(|&i| !dropped[i]).collect()
}

pub fn prune_step(x: &Tensor2D, scores: &TokenImportance, gamma: f64) -> Result<(Tensor2D, Vec<usize>)> {
    if scores.scores.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "prune_step",
            left: x.shape(),
            right: (scores.scores.len(), 1),
        });
    }
    if x.rows() == 0 {
        return Err(Error::EmptyTensor("prune_step"));
    }
    let kept = select_kept(scores, gamma);
    Ok((slice_rows(x, &kept)?, kept))
}

/// Token sparsity `1 - mean(r_i)` over per-layer remaining fractions.
pub fn sparsity(kept_fractions: &[f64]) -> Result<f64> {
    if kept_fractions.is_empty() {
        return Err(Error::InvalidSchedule("no layers".into()));
    }
    if let Some(r) = kept_fractions.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::InvalidSchedule(format!("remaining fraction {r} outside (0, 1]")));
    }
    Ok(1.0 - kept_fractions.iter().sum::<f64>() / kept_fractions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_causal(t: usize) -> Tensor2D {
        Tensor2D::from_fn(t, t, |i, j| if j <= i { 1.0 / (i + 1) as f32 } else { 0.0 })
    }

    #[test]
    fn scores_uniform_and_one_hot() {
        let map = AttentionMap::new(vec![uniform_causal(4)]).unwrap();
        let s = score_tokens(&map).unwrap().scores;
        assert_eq!(s, vec![1.0, 0.5, 1.0 / 3.0, 0.25]);

        let hot = Tensor2D::from_fn(5, 5, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let map = AttentionMap::new(vec![hot.clone(), hot]).unwrap();
        assert!(score_tokens(&map).unwrap().scores.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scores_read_column_zero() {
        let p = Tensor2D::new(3, 3, vec![1.0, 0.0, 0.0, 0.6, 0.4, 0.0, 0.2, 0.3, 0.5]).unwrap();
        let s = score_tokens(&AttentionMap::new(vec![p]).unwrap()).unwrap();
        assert_eq!(s.scores, vec![1.0, 0.6, 0.2]);
    }

    #[test]
    fn invalid_maps() {
        let non_causal = Tensor2D::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(AttentionMap::new(vec![non_causal]).is_err());
        let unnormalized = Tensor2D::new(2, 2, vec![1.0, 0.0, 0.3, 0.3]).unwrap();
        assert!(AttentionMap::new(vec![unnormalized]).is_err());
        assert!(AttentionMap::new(vec![]).is_err());
    }

    #[test]
    fn schedule_values() {
        let s = make_schedule(8, 2, 0.3, 4).unwrap();
        assert!((s.per_layer_ratio - 0.08531).abs() < 1e-5);
        assert_eq!(s.prune_layers, vec![2, 3, 5, 7]);
        assert_eq!(make_schedule(8, 2, 0.0, 3).unwrap().per_layer_ratio, 0.0);
        assert!((make_schedule(8, 2, 0.25, 1).unwrap().per_layer_ratio - 0.25).abs() < 1e-15);
        assert!(make_schedule(8, 2, 1.0, 3).is_err());
        assert!(make_schedule(8, 2, 0.2, 0).is_err());
        assert!(make_schedule(4, 2, 0.2, 3).is_err());
        assert_eq!(default_start_layer(2), 1);
        assert_eq!(default_start_layer(8), 2);
    }

    #[test]
    fn prune_step_examples() {
        let x = Tensor2D::from_fn(5, 2, |r, c| (r * 2 + c) as f32);
        let scores = TokenImportance {
            scores: vec![1.0, 0.9, 0.1, 0.5, 0.3],
        };
        let (y, kept) = prune_step(&x, &scores, 0.0).unwrap();
        assert_eq!(kept, vec![0, 1, 2, 3, 4]);
        assert_eq!(y, x);
        let (y, kept) = prune_step(&x, &scores, 0.5).unwrap();
        assert_eq!(kept, vec![0, 1, 3]);
        assert_eq!(y.row(2), x.row(3));

        let ties = TokenImportance {
            scores: vec![1.0, 0.2, 0.2, 0.2, 0.2],
        };
        assert_eq!(prune_step(&x, &ties, 0.5).unwrap().1, vec![0, 1, 2]);

        let short = TokenImportance { scores: vec![1.0] };
        assert!(matches!(prune_step(&x, &short, 0.5), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn start_token_kept_even_when_lowest() {
        let scores = TokenImportance {
            scores: vec![0.0, 0.9, 0.8],
        };
        assert_eq!(select_kept(&scores, 0.99), vec![0, 1]);
    }

    #[test]
    fn sparsity_values() {
        assert_eq!(sparsity(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((sparsity(&[1.0, 0.8]).unwrap() - 0.1).abs() < 1e-15);
        assert!(sparsity(&[]).is_err());
        assert!(sparsity(&[0.0]).is_err());
    }
}

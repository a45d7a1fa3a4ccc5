//! Seeded hidden-state generators for tests, benches and the CLI.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::{gemm_f32, SiteName};
use crate::pruning::{score_tokens, select_kept};
use crate::tensor::{NamedTensorStore, Tensor2D};

use super::block::{forward_fp, layer_norm, Block};

/// `T x d` standard-normal hidden states.
pub fn gaussian_tokens(tokens: usize, d: usize, seed: u64) -> Tensor2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor2D::from_fn(tokens, d, |_, _| StandardNormal.sample(&mut rng))
}

/// Overwrites `x[t, c]` with `amplitude` (keeping the original sign) for
/// every listed token and channel.
pub fn inject_outliers(x: &Tensor2D, tokens: &[usize], channels: &[usize], amplitude: f32) -> Result<Tensor2D> {
    if let Some(&t) = tokens.iter().find(|&&t| t >= x.rows()) {
        return Err(Error::InvalidIndices(format!(
            "token {t} out of range for {} rows",
            x.rows()
        )));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= x.cols()) {
        return Err(Error::InvalidIndices(format!(
            "channel {c} out of range for {} cols",
            x.cols()
        )));
    }
    let mut hit = vec![false; x.len()];
    for &t in tokens {
        for &c in channels {
            hit[t * x.cols() + c] = true;
        }
    }
    let cols = x.cols();
    Ok(Tensor2D::from_fn(x.rows(), cols, |r, c| {
        let v = x.get(r, c);
        if hit[r * cols + c] {
            if v < 0.0 {
                -amplitude
            } else {
                amplitude
            }
        } else {
            v
        }
    }))
}

/// Tokens sharing outlier `channels` at `amplitude`, plus a start token whose
/// key points along the mean query of the rest under `block`'s weights.
///
/// The FP attention of `block` on this input has a strong column-0 stripe.
pub fn stripe_tokens(block: &Block, tokens: usize, channels: &[usize], amplitude: f32, seed: u64) -> Result<Tensor2D> {
    let x = shared_channel_tokens(block, tokens, channels, amplitude, seed)?;
    with_aligned_start(block, &x)
}

fn shared_channel_tokens(
    block: &Block,
    tokens: usize,
    channels: &[usize],
    amplitude: f32,
    seed: u64,
) -> Result<Tensor2D> {
    let d = block.config().d_model;
    if tokens < 2 {
        return Err(Error::InvalidParams("stripe fixture needs at least two tokens".into()));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= d) {
        return Err(Error::InvalidIndices(format!("channel {c} out of range for {d} cols")));
    }
    let base = gaussian_tokens(tokens, d, seed);
    Ok(Tensor2D::from_fn(tokens, d, |r, c| {
        base.get(r, c) + if channels.contains(&c) { amplitude } else { 0.0 }
    }))
}

/// Replaces row 0 of `x` with `W_k * mean_q`, the mean taken over rows `1..`.
fn with_aligned_start(block: &Block, x: &Tensor2D) -> Result<Tensor2D> {
    let (tokens, d) = x.shape();
    let w = block.weight(SiteName::LinearTransform).expect("block has qkv weights");
    let q = gemm_f32(&layer_norm(x), &w.column_block(0, d)?)?;
    let mean_q = Tensor2D::from_fn(1, d, |_, j| {
        ((1..tokens).map(|r| q.get(r, j) as f64).sum::<f64>() / (tokens - 1) as f64) as f32
    });
    // k_0 . mean_q = |W_k mean_q|^2 before normalization
    let x0 = gemm_f32(&mean_q, &w.column_block(d, d)?.transpose())?;
    Ok(Tensor2D::from_fn(tokens, d, |r, c| {
        if r == 0 {
            x0.get(0, c)
        } else {
            x.get(r, c)
        }
    }))
}

/// Input for a block placed after `first`: `first`'s FP output with outliers
/// written into `channels` of the tokens a prune step at ratio `gamma` would
/// drop, judged by `first`'s attention.
///
/// Returns the tensor and the kept token indices.
pub fn low_importance_outliers(
    first: &Block,
    x: &Tensor2D,
    gamma: f64,
    channels: &[usize],
    amplitude: f32,
) -> Result<(Tensor2D, Vec<usize>)> {
    let (h, map) = forward_fp(first, x)?;
    let kept = select_kept(&score_tokens(&map)?, gamma);
    let dropped: Vec<usize> = (0..h.rows()).filter(|i| kept.binary_search(i).is_err()).collect();
    Ok((inject_outliers(&h, &dropped, channels, amplitude)?, kept))
}

/// Column group of the fused QKV weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkvPart {
    Query,
    Key,
    Value,
}

/// Copy of `block` whose fused QKV weight row `channel` is multiplied by
/// `gain` in the listed column groups.
///
/// This is where a large normalization gain on one hidden channel ends up
/// once folded into the next projection: any token carrying that channel
/// produces a massive query, key or value.
pub fn amplify_channel(block: &Block, channel: usize, gain: f32, parts: &[QkvPart]) -> Result<Block> {
    let d = block.config().d_model;
    if channel >= d {
        return Err(Error::InvalidIndices(format!(
            "channel {channel} out of range for {d} cols"
        )));
    }
    let w = block.weight(SiteName::LinearTransform).expect("block has qkv weights");
    let scaled = Tensor2D::from_fn(w.rows(), w.cols(), |r, c| {
        let part = [QkvPart::Query, QkvPart::Key, QkvPart::Value][c / d];
        if r == channel && parts.contains(&part) {
            w.get(r, c) * gain
        } else {
            w.get(r, c)
        }
    });
    let mut store = NamedTensorStore::new();
    for (name, t) in block.weight_store().iter() {
        match name {
            "w_qkv" => store.insert(name, scaled.clone())?,
            _ => store.insert(name, t.clone())?,
        }
    }
    Block::from_weights(*block.config(), &store, "")
}

/// [`stripe_tokens`] plus a start token that alone carries `sink_amplitude`
/// in `sink_channel`.
///
/// Every other row is re-centred with `sink_channel` set to zero, so its
/// normalized value there is exactly zero and a gain on that channel only
/// ever reaches the start token.
pub fn attention_sink_tokens(
    block: &Block,
    tokens: usize,
    stripe_channels: &[usize],
    amplitude: f32,
    sink_channel: usize,
    sink_amplitude: f32,
    seed: u64,
) -> Result<Tensor2D> {
    let d = block.config().d_model;
    if sink_channel >= d || stripe_channels.contains(&sink_channel) {
        return Err(Error::InvalidIndices(format!(
            "sink channel {sink_channel} must be below {d} and outside the stripe channels"
        )));
    }
    let shared = shared_channel_tokens(block, tokens, stripe_channels, amplitude, seed)?;
    let rest = Tensor2D::from_fn(tokens, d, |r, c| {
        if c == sink_channel {
            return 0.0;
        }
        let s: f64 = (0..d)
            .filter(|&j| j != sink_channel)
            .map(|j| shared.get(r, j) as f64)
            .sum();
        shared.get(r, c) - (s / (d - 1) as f64) as f32
    });
    // the sink channel is zero in every row here, so the gain cannot reach the design
    let x = with_aligned_start(block, &rest)?;
    Ok(Tensor2D::from_fn(tokens, d, |r, c| {
        if r == 0 && c == sink_channel {
            sink_amplitude
        } else {
            x.get(r, c)
        }
    }))
}

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{
    gemm_f32, gemm_int4_packed, gemm_int_affine, gemm_log2_attnv, quantize_weights, ActQuantizer, ChannelQuantWeights,
    GemmSite, Int4Weights, SiteName,
};
use crate::pruning::AttentionMap;
use crate::quant::{self, fit_affine, quantize_affine, quantize_log2, QuantTensor};
use crate::tensor::{NamedTensorStore, Tensor2D};
use crate::trip::{fit_trip, quantize_trip};

use super::{BlockConfig, QuantConfig};

const LN_EPS: f64 = 1e-5;

/// One pre-norm causal decoder block: attention then a SiLU MLP, each with a residual.
#[derive(Debug, Clone)]
pub struct Block {
    cfg: BlockConfig,
    w_qkv: Tensor2D,
    w_o: Tensor2D,
    w_fc1: Tensor2D,
    w_fc2: Tensor2D,
    cache: BTreeMap<SiteName, (ChannelQuantWeights, Int4Weights)>,
}

impl Block {
    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn weight(&self, site: SiteName) -> Option<&Tensor2D> {
        match site {
            SiteName::LinearTransform => Some(&self.w_qkv),
            SiteName::Projection => Some(&self.w_o),
            SiteName::FC1 => Some(&self.w_fc1),
            SiteName::FC2 => Some(&self.w_fc2),
            SiteName::QK | SiteName::AttnV => None,
        }
    }

    /// Precomputed per-output-channel 4-bit codes of a weighted site.
    pub fn quantized_weight(&self, site: SiteName) -> Option<&ChannelQuantWeights> {
        self.cache.get(&site).map(|(q, _)| q)
    }

    /// FP32 weights keyed `w_qkv`, `w_o`, `w_fc1`, `w_fc2`.
    pub fn weight_store(&self) -> NamedTensorStore {
        let mut s = NamedTensorStore::new();
        for (name, w) in [
            ("w_qkv", &self.w_qkv),
            ("w_o", &self.w_o),
            ("w_fc1", &self.w_fc1),
            ("w_fc2", &self.w_fc2),
        ] {
            s.insert(name, w.clone()).expect("fixed names are unique");
        }
        s
    }

    /// Rebuilds a block from stored weights, checking shapes against `cfg`.
    pub fn from_weights(cfg: BlockConfig, store: &NamedTensorStore, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let fetch = |name: &str, shape: (usize, usize)| -> Result<Tensor2D> {
            let key = format!("{prefix}{name}");
            let t = store
                .get_f32(&key)
                .ok_or_else(|| Error::InvalidConfig(format!("missing f32 tensor {key:?}")))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "from_weights",
                    left: t.shape(),
                    right: shape,
                });
            }
            Ok(t.clone())
        };
        Self::assemble(
            cfg,
            fetch("w_qkv", (d, 3 * d))?,
            fetch("w_o", (d, d))?,
            fetch("w_fc1", (d, cfg.d_ff))?,
            fetch("w_fc2", (cfg.d_ff, d))?,
        )
    }

    fn assemble(cfg: BlockConfig, w_qkv: Tensor2D, w_o: Tensor2D, w_fc1: Tensor2D, w_fc2: Tensor2D) -> Result<Self> {
        let mut block = Self {
            cfg,
            w_qkv,
            w_o,
            w_fc1,
            w_fc2,
            cache: BTreeMap::new(),
        };
        for site in [
            SiteName::LinearTransform,
            SiteName::Projection,
            SiteName::FC1,
            SiteName::FC2,
        ] {
            let q = quantize_weights(block.weight(site).unwrap(), 4)?;
            let packed = Int4Weights::from_quantized(&q)?;
            block.cache.insert(site, (q, packed));
        }
        Ok(block)
    }
}

/// Deterministic normal initialization with standard deviation `1 / sqrt(d_model)`.
pub fn init_block(cfg: &BlockConfig) -> Result<Block> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f32, 1.0 / (cfg.d_model as f32).sqrt()).expect("positive std");
    let mut draw = |rows: usize, cols: usize| Tensor2D::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
    let d = cfg.d_model;
    let w_qkv = draw(d, 3 * d);
    let w_o = draw(d, d);
    let w_fc1 = draw(d, cfg.d_ff);
    let w_fc2 = draw(cfg.d_ff, d);
    Block::assemble(*cfg, w_qkv, w_o, w_fc1, w_fc2)
}

/// Quantization error of one site's activation within a block.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDiagnostic {
    pub site: SiteName,
    pub act_bits: u32,
    pub quantizer: ActQuantizer,
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct BlockDiagnostics {
    pub sites: Vec<SiteDiagnostic>,
    /// Dequantized log2 probabilities actually applied to V, per head.
    pub applied_attention: Vec<Tensor2D>,
}

impl BlockDiagnostics {
    /// Row-normalized view of [`Self::applied_attention`].
    pub fn applied_attention_map(&self) -> Result<AttentionMap> {
        let heads = self
            .applied_attention
            .iter()
            .map(|p| {
                Tensor2D::from_fn(p.rows(), p.cols(), |i, j| {
                    let sum: f64 = p.row(i).iter().map(|&v| v as f64).sum();
                    if sum > 0.0 {
                        (p.get(i, j) as f64 / sum) as f32
                    } else if j == i {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        AttentionMap::new(heads)
    }
}

pub(crate) fn layer_norm(x: &Tensor2D) -> Tensor2D {
    let d = x.cols() as f64;
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        data.extend(row.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
    }
    Tensor2D::new(x.rows(), x.cols(), data).expect("layer norm output is finite")
}

pub(crate) fn causal_softmax(logits: &Tensor2D) -> Tensor2D {
    let t = logits.rows();
    Tensor2D::from_fn(t, t, |i, j| {
        if j > i {
            return 0.0;
        }
        let row = &logits.row(i)[..=i];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        ((row[j] as f64 - max).exp() / denom) as f32
    })
}

pub(crate) fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

fn add(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    a.zip_map(b, |x, y| x + y)
}

/// Executes the matmul sites of one forward pass, FP32 when `cfg` is `None`.
struct SiteRunner<'a> {
    block: &'a Block,
    cfg: Option<&'a QuantConfig>,
    diag: Vec<SiteDiagnostic>,
    applied: Vec<Tensor2D>,
}

impl<'a> SiteRunner<'a> {
    fn site(&self, name: SiteName) -> Result<Option<&'a GemmSite>> {
        match self.cfg {
            None => Ok(None),
            Some(cfg) => {
                let s = cfg.site(name)?;
                s.validate()?;
                Ok(if s.is_fp() { None } else { Some(s) })
            }
        }
    }

    fn record(&mut self, site: &GemmSite, mse: f64) {
        self.diag.push(SiteDiagnostic {
            site: site.name,
            act_bits: site.act_bits,
            quantizer: site.act_quantizer,
            mse,
        });
    }

    fn quantize_act(&self, a: &Tensor2D, site: &GemmSite) -> Result<(QuantTensor, f64)> {
        let cfg = self.cfg.expect("quantized site implies config");
        let bits = site.act_bits;
        let q = match site.act_quantizer {
            ActQuantizer::Affine => quantize_affine(a, &fit_affine(a, bits)?)?,
            ActQuantizer::Trip => quantize_trip(a, &fit_trip(a, bits, cfg.cap_for(bits))?)?,
            ActQuantizer::Log2 => {
                return Err(Error::InvalidConfig(format!(
                    "site {}: log2 activations only feed attn_v",
                    site.name.as_str()
                )))
            }
        };
        let mse = quant::mse(a, &quant::dequantize(&q)?)?;
        Ok((q, mse))
    }

    /// `a * w` for a site with learned weights.
    fn linear(&mut self, name: SiteName, a: &Tensor2D) -> Result<Tensor2D> {
        let Some(site) = self.site(name)? else {
            return gemm_f32(a, self.block.weight(name).expect("weighted site"));
        };
        let (aq, mse) = self.quantize_act(a, site)?;
        self.record(site, mse);
        let (wq, packed) = &self.block.cache[&name];
        if site.act_bits == 4 {
            gemm_int4_packed(&aq, packed)
        } else {
            gemm_int_affine(&aq, wq)
        }
    }

    /// `q * k^T` for one head.
    fn qk(&mut self, q: &Tensor2D, k: &Tensor2D) -> Result<(Tensor2D, Option<f64>)> {
        let kt = k.transpose();
        let Some(site) = self.site(SiteName::QK)? else {
            return Ok((gemm_f32(q, &kt)?, None));
        };
        let key_bits = self.cfg.expect("quantized").key_bits;
        let (aq, mse) = self.quantize_act(q, site)?;
        Ok((gemm_int_affine(&aq, &quantize_weights(&kt, key_bits)?)?, Some(mse)))
    }

    /// `probs * v` for one head.
    fn attn_v(&mut self, probs: &Tensor2D, v: &Tensor2D) -> Result<(Tensor2D, Option<f64>)> {
        let Some(site) = self.site(SiteName::AttnV)? else {
            return Ok((gemm_f32(probs, v)?, None));
        };
        let value_bits = self.cfg.expect("quantized").value_bits;
        let pq = quantize_log2(probs, site.act_bits)?;
        let applied = quant::dequantize_log2(&pq)?;
        let mse = quant::mse(probs, &applied)?;
        self.applied.push(applied);
        let vq = quantize_affine(v, &fit_affine(v, value_bits)?)?;
        Ok((gemm_log2_attnv(&pq, &vq)?, Some(mse)))
    }

    fn record_mean(&mut self, name: SiteName, errs: &[f64]) -> Result<()> {
        if let (Some(site), false) = (self.site(name)?, errs.is_empty()) {
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            self.record(site, mean);
        }
        Ok(())
    }
}

fn forward_impl(
    block: &Block,
    x: &Tensor2D,
    cfg: Option<&QuantConfig>,
) -> Result<(Tensor2D, AttentionMap, Option<BlockDiagnostics>)> {
    let c = &block.cfg;
    if x.cols() != c.d_model {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: x.shape(),
            right: (x.rows(), c.d_model),
        });
    }
    if x.rows() == 0 {
        return Err(Error::EmptyTensor("forward"));
    }
    if let Some(cfg) = cfg {
        cfg.validate()?;
    }
    let mut run = SiteRunner {
        block,
        cfg,
        diag: Vec::new(),
        applied: Vec::new(),
    };

    let qkv = run.linear(SiteName::LinearTransform, &layer_norm(x))?;
    let inv_sqrt = 1.0 / (c.d_head as f32).sqrt();
    let mut heads_out = Vec::with_capacity(c.n_heads);
    let mut maps = Vec::with_capacity(c.n_heads);
    let (mut qk_err, mut av_err) = (Vec::new(), Vec::new());
    for h in 0..c.n_heads {
        let q = qkv.column_block(h * c.d_head, c.d_head)?;
        let k = qkv.column_block(c.d_model + h * c.d_head, c.d_head)?;
        let v = qkv.column_block(2 * c.d_model + h * c.d_head, c.d_head)?;
        let (logits, e) = run.qk(&q, &k)?;
        qk_err.extend(e);
        let probs = causal_softmax(&logits.map(|l| l * inv_sqrt));
        let (out, e) = run.attn_v(&probs, &v)?;
        av_err.extend(e);
        heads_out.push(out);
        maps.push(probs);
    }
    run.record_mean(SiteName::QK, &qk_err)?;
    run.record_mean(SiteName::AttnV, &av_err)?;

    let attn = Tensor2D::hconcat(&heads_out)?;
    let h1 = add(x, &run.linear(SiteName::Projection, &attn)?)?;
    let f1 = run.linear(SiteName::FC1, &layer_norm(&h1))?.map(silu);
    let y = add(&h1, &run.linear(SiteName::FC2, &f1)?)?;

    let diag = cfg.map(|_| BlockDiagnostics {
        sites: run.diag,
        applied_attention: run.applied,
    });
    Ok((y, AttentionMap::new(maps)?, diag))
}

/// FP32 forward pass; returns the block output and its attention map.
pub fn forward_fp(block: &Block, x: &Tensor2D) -> Result<(Tensor2D, AttentionMap)> {
    let (y, map, _) = forward_impl(block, x, None)?;
    Ok((y, map))
}

/// Forward pass with per-site precision from `cfg`.
///
/// The returned attention map holds the softmax probabilities computed from
/// the quantized QK product; the diagnostics carry the log2-coded
/// probabilities that were applied to V.
pub fn forward_quant(
    block: &Block,
    x: &Tensor2D,
    cfg: &QuantConfig,
) -> Result<(Tensor2D, AttentionMap, BlockDiagnostics)> {
    let (y, map, diag) = forward_impl(block, x, Some(cfg))?;
    Ok((y, map, diag.expect("config supplied")))
}

use crate::error::{Error, Result};
use crate::pruning::{prune_step, score_tokens, sparsity, AttentionMap, PruneSchedule};
use crate::tensor::{NamedTensorStore, Tensor2D};

use super::block::{forward_fp, forward_quant, init_block, Block, BlockDiagnostics};
use super::{BlockConfig, QuantConfig};

/// Blocks applied in sequence.
#[derive(Debug, Clone)]
pub struct Stack {
    blocks: Vec<Block>,
}

fn layer_seed(base: u64, layer: usize) -> u64 {
    // splitmix64 step keeps neighbouring layers uncorrelated
    let mut z = base.wrapping_add((layer as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Stack {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::InvalidConfig("stack needs at least one block".into()));
        };
        let d = first.config().d_model;
        if blocks.iter().any(|b| b.config().d_model != d) {
            return Err(Error::InvalidConfig("blocks disagree on d_model".into()));
        }
        Ok(Self { blocks })
    }

    /// `layers` blocks sharing `cfg` shape, each seeded from `cfg.seed` and its index.
    pub fn init(cfg: &BlockConfig, layers: usize) -> Result<Self> {
        let blocks = (0..layers)
            .map(|l| {
                init_block(&BlockConfig {
                    seed: layer_seed(cfg.seed, l),
                    ..*cfg
                })
            })
            .collect::<Result<_>>()?;
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Weights of every block keyed `layer{i}.w_*`.
    pub fn weight_store(&self) -> NamedTensorStore {
        let mut out = NamedTensorStore::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.weight_store().iter() {
                out.insert(format!("layer{i}.{name}"), t.clone())
                    .expect("prefixed names are unique");
            }
        }
        out
    }

    pub fn from_weights(cfg: &BlockConfig, layers: usize, store: &NamedTensorStore) -> Result<Self> {
        let blocks = (0..layers)
            .map(|l| Block::from_weights(*cfg, store, &format!("layer{l}.")))
            .collect::<Result<_>>()?;
        Self::new(blocks)
    }
}

#[derive(Debug, Clone)]
pub enum Pruning {
    None,
    Schedule(PruneSchedule),
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub layer: usize,
    /// Original positions of the tokens this layer processed.
    pub input_tokens: Vec<usize>,
    /// Original positions surviving into the next layer.
    pub kept: Vec<usize>,
    pub attention: AttentionMap,
    pub diagnostics: Option<BlockDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct StackRun {
    pub output: Tensor2D,
    /// Original positions of the output rows.
    pub kept: Vec<usize>,
    pub layers: Vec<LayerTrace>,
}

impl StackRun {
    /// Per-layer processed token count over the input length.
    pub fn kept_fractions(&self) -> Vec<f64> {
        let t0 = self.layers.first().map_or(1, |l| l.input_tokens.len()) as f64;
        self.layers.iter().map(|l| l.input_tokens.len() as f64 / t0).collect()
    }

    pub fn sparsity(&self) -> Result<f64> {
        sparsity(&self.kept_fractions())
    }
}

/// Runs every block, FP32 when `cfg` is `None`.
///
/// At a prune layer the tokens are scored from that layer's attention map and
/// the lowest-importance ones are removed from its output, so later layers
/// see the shorter sequence.
pub fn run_stack(stack: &Stack, x: &Tensor2D, cfg: Option<&QuantConfig>, pruning: &Pruning) -> Result<StackRun> {
    if let Pruning::Schedule(s) = pruning {
        s.validate()?;
        if s.total_layers != stack.len() {
            return Err(Error::InvalidSchedule(format!(
                "schedule covers {} layers, stack has {}",
                s.total_layers,
                stack.len()
            )));
        }
    }
    let mut h = x.clone();
    let mut positions: Vec<usize> = (0..x.rows()).collect();
    let mut layers = Vec::with_capacity(stack.len());
    for (l, block) in stack.blocks.iter().enumerate() {
        let (y, attention, diagnostics) = match cfg {
            None => {
                let (y, a) = forward_fp(block, &h)?;
                (y, a, None)
            }
            Some(c) => {
                let (y, a, d) = forward_quant(block, &h, c)?;
                (y, a, Some(d))
            }
        };
        let input_tokens = positions.clone();
        h = y;
        if let Pruning::Schedule(s) = pruning {
            if s.is_prune_layer(l) {
                let scores = score_tokens(&attention)?;
                let (pruned, local) = prune_step(&h, &scores, s.per_layer_ratio)?;
                h = pruned;
                positions = local.iter().map(|&i| positions[i]).collect();
            }
        }
        layers.push(LayerTrace {
            layer: l,
            input_tokens,
            kept: positions.clone(),
            attention,
            diagnostics,
        });
    }
    Ok(StackRun {
        output: h,
        kept: positions,
        layers,
    })
}

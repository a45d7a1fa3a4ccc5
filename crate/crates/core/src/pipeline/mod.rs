//! Toy causal decoder blocks wired through the quantized kernels.
//!
//! Per-site precision follows a [`QuantConfig`]: the QKV projection, QK and
//! the MLP run W4A8 by default, the softmax output is always log2-coded,
//! and selected post-attention sites may drop to 4-bit activations through
//! the packed INT4 kernel. Layer norm, softmax and the MLP activation stay
//! in FP32.

mod analysis;
mod block;
mod stack;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{ActQuantizer, GemmSite, SiteName};

pub use analysis::{analyze_outliers, attention_locality, cosine_similarity, OutlierReport, LOCALITY_WINDOW};
pub use block::{forward_fp, forward_quant, init_block, Block, BlockDiagnostics, SiteDiagnostic};
pub use stack::{run_stack, LayerTrace, Pruning, Stack, StackRun};

/// Shape and seed of one decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl BlockConfig {
    /// Derives `d_head = d_model / n_heads`.
    pub fn new(d_model: usize, n_heads: usize, d_ff: usize, seed: u64) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let cfg = Self {
            d_model,
            n_heads,
            d_head: d_model / n_heads,
            d_ff,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// d_model 64, 4 heads, d_ff 256.
    pub fn toy(seed: u64) -> Self {
        Self::new(64, 4, 256, seed).expect("toy dimensions are consistent")
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig("block dimensions must be positive".into()));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }
}

/// Refinement cap for 8-bit TRIP sites.
pub const DEFAULT_CAP_8BIT: u32 = 3;
/// Refinement cap for 4-bit TRIP sites.
pub const DEFAULT_CAP_4BIT: u32 = 2;
/// Post-attention sites moved to 4-bit activations in the W4A4 preset.
pub const DEFAULT_A4_SITES: [SiteName; 2] = [SiteName::Projection, SiteName::FC1];

/// Precision assignment for every matmul site of a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub sites: BTreeMap<SiteName, GemmSite>,
    pub cap_8bit: u32,
    pub cap_4bit: u32,
    /// Bit width of the signed per-key quantization of K in the QK product.
    pub key_bits: u32,
    /// Bit width of the affine V operand of AttnV.
    pub value_bits: u32,
}

impl QuantConfig {
    pub fn fp() -> Self {
        Self {
            sites: SiteName::ALL.iter().map(|&s| (s, GemmSite::fp(s))).collect(),
            cap_8bit: DEFAULT_CAP_8BIT,
            cap_4bit: DEFAULT_CAP_4BIT,
            key_bits: 8,
            value_bits: 8,
        }
    }

    /// 4-bit weights and 8-bit activations at every site; `quantizer`
    /// (affine or trip) applies to all non-softmax activations.
    pub fn w4a8(quantizer: ActQuantizer) -> Self {
        let sites = SiteName::ALL
            .iter()
            .map(|&name| {
                let act_quantizer = if name == SiteName::AttnV {
                    ActQuantizer::Log2
                } else {
                    quantizer
                };
                (
                    name,
                    GemmSite {
                        name,
                        act_bits: 8,
                        weight_bits: 4,
                        act_quantizer,
                    },
                )
            })
            .collect();
        Self { sites, ..Self::fp() }
    }

    /// [`QuantConfig::w4a8`] with `a4_sites` switched to 4-bit activations.
    pub fn w4a4(quantizer: ActQuantizer, a4_sites: &[SiteName]) -> Self {
        let mut cfg = Self::w4a8(quantizer);
        for s in a4_sites {
            if let Some(site) = cfg.sites.get_mut(s) {
                site.act_bits = 4;
            }
        }
        cfg
    }

    pub fn site(&self, name: SiteName) -> Result<&GemmSite> {
        self.sites
            .get(&name)
            .ok_or_else(|| Error::InvalidConfig(format!("site {} unassigned", name.as_str())))
    }

    pub fn is_fp(&self) -> bool {
        self.sites.values().all(GemmSite::is_fp)
    }

    pub fn validate(&self) -> Result<()> {
        for name in SiteName::ALL {
            let site = self.site(name)?;
            if site.name != name {
                return Err(Error::InvalidConfig(format!(
                    "site {} assigned under {}",
                    site.name.as_str(),
                    name.as_str()
                )));
            }
            site.validate()?;
        }
        if self.cap_8bit > crate::trip::MAX_CAP || self.cap_4bit > crate::trip::MAX_CAP {
            return Err(Error::InvalidConfig("refinement cap too large".into()));
        }
        for (what, bits) in [("key_bits", self.key_bits), ("value_bits", self.value_bits)] {
            if !(2..=8).contains(&bits) {
                return Err(Error::InvalidConfig(format!("{what} {bits} outside 2..=8")));
            }
        }
        Ok(())
    }

    pub(crate) fn cap_for(&self, bits: u32) -> u32 {
        if bits <= 4 {
            self.cap_4bit
        } else {
            self.cap_8bit
        }
    }
}

//! Run configuration: JSON text is checked against the bundled schema, then
//! deserialized with unknown keys rejected a second time by serde.

use std::path::{Path, PathBuf};

use agq_core::kernels::{ActQuantizer, SiteName};
use agq_core::pipeline::{BlockConfig, QuantConfig, DEFAULT_A4_SITES, DEFAULT_CAP_4BIT, DEFAULT_CAP_8BIT};
use agq_core::pruning::{default_start_layer, make_schedule, PruneSchedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub block: BlockSection,
    #[serde(default)]
    pub quant: QuantSection,
    #[serde(default)]
    pub prune: Option<PruneSection>,
    pub seeds: Seeds,
    pub tokens: usize,
    #[serde(default)]
    pub synthetic: Option<Synthetic>,
    #[serde(default)]
    pub analysis: Analysis,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub outputs: Outputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_layers() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fp,
    W4a8,
    W4a4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub mode: Mode,
    pub quantizer: ActQuantizer,
    pub a4_sites: Vec<SiteName>,
    pub cap_8bit: u32,
    pub cap_4bit: u32,
    pub key_bits: u32,
    pub value_bits: u32,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            mode: Mode::W4a8,
            quantizer: ActQuantizer::Affine,
            a4_sites: DEFAULT_A4_SITES.to_vec(),
            cap_8bit: DEFAULT_CAP_8BIT,
            cap_4bit: DEFAULT_CAP_4BIT,
            key_bits: 8,
            value_bits: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub beta: f64,
    pub m: usize,
    #[serde(default)]
    pub start_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub weights: u64,
    pub input: u64,
}

/// Outlier injection applied to generated hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Synthetic {
    pub channels: Vec<usize>,
    /// Tokens receiving outliers; every token when absent.
    #[serde(default)]
    pub tokens: Option<Vec<usize>>,
    pub amplitude: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Analysis {
    pub k_sigma: f64,
}

impl Default for Analysis {
    fn default() -> Self {
        Self { k_sigma: 3.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub min_cosine: Option<f64>,
    pub max_site_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outputs {
    pub report: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
            CliError::Config(format!(
                "malformed JSON at line {} column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        check_schema(&value)?;
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.block_config().map_err(CliError::config)?;
        self.quant_config().validate().map_err(CliError::config)?;
        self.schedule()?;
        if let Some(s) = &self.synthetic {
            if let Some(&c) = s.channels.iter().find(|&&c| c >= self.block.d_model) {
                return Err(CliError::Config(format!(
                    "synthetic channel {c} outside d_model {}",
                    self.block.d_model
                )));
            }
            if let Some(&t) = s.tokens.iter().flatten().find(|&&t| t >= self.tokens) {
                return Err(CliError::Config(format!(
                    "synthetic token {t} outside {} tokens",
                    self.tokens
                )));
            }
        }
        Ok(())
    }

    pub fn block_config(&self) -> agq_core::Result<BlockConfig> {
        BlockConfig::new(
            self.block.d_model,
            self.block.n_heads,
            self.block.d_ff,
            self.seeds.weights,
        )
    }

    pub fn quant_config(&self) -> QuantConfig {
        let q = &self.quant;
        let mut cfg = match q.mode {
            Mode::Fp => QuantConfig::fp(),
            Mode::W4a8 => QuantConfig::w4a8(q.quantizer),
            Mode::W4a4 => QuantConfig::w4a4(q.quantizer, &q.a4_sites),
        };
        cfg.cap_8bit = q.cap_8bit;
        cfg.cap_4bit = q.cap_4bit;
        cfg.key_bits = q.key_bits;
        cfg.value_bits = q.value_bits;
        cfg
    }

    pub fn schedule(&self) -> Result<Option<PruneSchedule>, CliError> {
        let Some(p) = &self.prune else {
            return Ok(None);
        };
        let n = self.block.layers;
        let start = p.start_layer.unwrap_or_else(|| default_start_layer(n));
        make_schedule(n, start, p.beta, p.m).map(Some).map_err(CliError::config)
    }
}

fn check_schema(value: &serde_json::Value) -> Result<(), CliError> {
    let schema: serde_json::Value = serde_json::from_str(RUN_CONFIG_SCHEMA).expect("bundled schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(value)
        .map(|e| {
            let at = e.instance_path.to_string();
            format!("{}: {e}", if at.is_empty() { "/" } else { at.as_str() })
        })
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!("schema violation: {}", errors.join("; "))))
    }
}

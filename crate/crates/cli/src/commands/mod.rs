pub mod analyze;
pub mod bench;
pub mod eval;
pub mod init;
pub mod quantize;

use std::path::Path;

use agq_core::pipeline::synthetic::{gaussian_tokens, inject_outliers};
use agq_core::pipeline::{attention_locality, Stack, StackRun};
use agq_core::tensor::{load_store, NamedTensorStore};
use agq_core::Tensor2D;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub fn read_store(path: &Path) -> Result<NamedTensorStore, CliError> {
    load_store(path).map_err(|e| CliError::io(path, e))
}

pub fn load_stack(cfg: &RunConfig, path: &Path) -> Result<Stack, CliError> {
    let store = read_store(path)?;
    let block = cfg.block_config().map_err(CliError::config)?;
    Stack::from_weights(&block, cfg.block.layers, &store)
        .map_err(|e| CliError::Config(format!("{} does not match the configured block: {e}", path.display())))
}

/// Seeded hidden states with the configured outlier injection.
pub fn hidden_states(cfg: &RunConfig, seed: u64) -> Result<Tensor2D, CliError> {
    let x = gaussian_tokens(cfg.tokens, cfg.block.d_model, seed);
    match &cfg.synthetic {
        None => Ok(x),
        Some(s) => {
            let all: Vec<usize> = (0..cfg.tokens).collect();
            let tokens = s.tokens.as_deref().unwrap_or(&all);
            Ok(inject_outliers(&x, tokens, &s.channels, s.amplitude)?)
        }
    }
}

/// Mean attention locality over a run's layers; `None` below two tokens.
pub fn mean_locality(run: &StackRun) -> Result<Option<f64>, CliError> {
    if run.layers.iter().any(|l| l.attention.tokens() < 2) {
        return Ok(None);
    }
    let mut total = 0.0;
    for l in &run.layers {
        total += attention_locality(&l.attention)?;
    }
    Ok(Some(total / run.layers.len() as f64))
}

/// Pretty JSON plus trailing newline, to `path` or stdout.
pub fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

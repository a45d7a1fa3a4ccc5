//! Fixture generators: seeded block weights and hidden states.

use std::path::Path;

use agq_core::pipeline::Stack;
use agq_core::tensor::{save_store, NamedTensorStore};

use crate::config::RunConfig;
use crate::error::CliError;

pub fn init_weights(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let block = cfg.block_config().map_err(CliError::config)?;
    let stack = Stack::init(&block, cfg.block.layers)?;
    save_store(&stack.weight_store(), out).map_err(|e| CliError::io(out, e))
}

/// Writes the hidden states `eval` would generate for `seed` as tensor `x`.
pub fn synth_input(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let x = super::hidden_states(cfg, seed.unwrap_or(cfg.seeds.input))?;
    let mut store = NamedTensorStore::new();
    store.insert("x", x)?;
    save_store(&store, out).map_err(|e| CliError::io(out, e))
}

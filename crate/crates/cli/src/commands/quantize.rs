use std::path::{Path, PathBuf};

use agq_core::kernels::{quantize_weights, Int4Weights};
use agq_core::tensor::{save_store, CodeMatrix, NamedTensorStore, StoredTensor};
use serde::Serialize;

use crate::error::CliError;

pub const WEIGHT_BITS: u32 = 4;

#[derive(Debug, Serialize)]
pub struct ParamsSidecar {
    pub weight_bits: u32,
    /// Stored code `u` stands for the signed code `u - zero_point`.
    pub zero_point: i32,
    pub tensors: Vec<TensorParams>,
}

#[derive(Debug, Serialize)]
pub struct TensorParams {
    pub name: String,
    pub codes: String,
    pub rows: usize,
    pub cols: usize,
    /// Per-output-channel (column) scales.
    pub scales: Vec<f32>,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".params.json");
    PathBuf::from(s)
}

/// Quantizes every f32 tensor of the input store to 4-bit per-channel codes.
///
/// Writes `<name>.codes` tensors to `out` and their scales to the
/// `<out>.params.json` sidecar.
pub fn run(input: &Path, out: &Path) -> Result<(), CliError> {
    let store = super::read_store(input)?;
    let mut codes_store = NamedTensorStore::new();
    let mut tensors = Vec::new();
    for (name, t) in store.iter() {
        let StoredTensor::F32(w) = t else {
            continue;
        };
        let q = quantize_weights(w, WEIGHT_BITS).map_err(|e| CliError::Numeric(format!("{name}: {e}")))?;
        let offset = Int4Weights::ZERO_POINT;
        let unsigned = q.codes().iter().map(|&c| (c as i32 + offset) as u8).collect();
        let codes_name = format!("{name}.codes");
        codes_store.insert(codes_name.clone(), CodeMatrix::new(q.rows(), q.cols(), unsigned)?)?;
        tensors.push(TensorParams {
            name: name.to_owned(),
            codes: codes_name,
            rows: q.rows(),
            cols: q.cols(),
            scales: q.scales().to_vec(),
        });
    }
    if tensors.is_empty() {
        return Err(CliError::Numeric(format!(
            "{}: no f32 tensors to quantize",
            input.display()
        )));
    }
    save_store(&codes_store, out).map_err(|e| CliError::io(out, e))?;
    let sidecar = ParamsSidecar {
        weight_bits: WEIGHT_BITS,
        zero_point: Int4Weights::ZERO_POINT,
        tensors,
    };
    super::emit_json(&sidecar, Some(&sidecar_path(out)))
}

use std::fmt::Write as _;
use std::path::Path;

use agq_core::pipeline::{analyze_outliers, attention_locality, run_stack, OutlierReport, Pruning};
use agq_core::tensor::StoredTensor;
use agq_core::Tensor2D;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct LayerLocality {
    pub layer: usize,
    pub locality_fp: Option<f64>,
    pub locality_q: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct AnalyzeReport {
    pub command: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub outliers: OutlierReport,
    pub locality_fp: Option<f64>,
    pub locality_q: Option<f64>,
    pub layers: Vec<LayerLocality>,
}

/// The tensor named `x`, or the only f32 tensor of the store.
fn input_tensor(path: &Path) -> Result<Tensor2D, CliError> {
    let store = super::read_store(path)?;
    if let Some(x) = store.get_f32("x") {
        return Ok(x.clone());
    }
    let mut f32s = store.iter().filter_map(|(_, t)| match t {
        StoredTensor::F32(t) => Some(t),
        StoredTensor::Codes(_) => None,
    });
    match (f32s.next(), f32s.next()) {
        (Some(t), None) => Ok(t.clone()),
        _ => Err(CliError::Io(format!(
            "{}: expected a tensor named \"x\" or exactly one f32 tensor",
            path.display()
        ))),
    }
}

fn locality(map: &agq_core::pruning::AttentionMap) -> Result<Option<f64>, CliError> {
    if map.tokens() < 2 {
        return Ok(None);
    }
    Ok(Some(attention_locality(map)?))
}

pub fn run(cfg: &RunConfig, store: &Path, input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let stack = super::load_stack(cfg, store)?;
    let x = input_tensor(input)?;
    if x.cols() != cfg.block.d_model {
        return Err(CliError::Config(format!(
            "input has {} channels, block expects d_model {}",
            x.cols(),
            cfg.block.d_model
        )));
    }
    let outliers = analyze_outliers(&x, cfg.analysis.k_sigma)?;
    let fp = run_stack(&stack, &x, None, &Pruning::None)?;
    let q = run_stack(&stack, &x, Some(&cfg.quant_config()), &Pruning::None)?;
    let layers = fp
        .layers
        .iter()
        .zip(&q.layers)
        .map(|(a, b)| {
            Ok(LayerLocality {
                layer: a.layer,
                locality_fp: locality(&a.attention)?,
                locality_q: locality(&b.attention)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = AnalyzeReport {
        command: "analyze",
        rows: x.rows(),
        cols: x.cols(),
        locality_fp: super::mean_locality(&fp)?,
        locality_q: super::mean_locality(&q)?,
        outliers,
        layers,
    };
    if let Some(csv) = &cfg.outputs.csv {
        let mut text = String::from("channel,count\n");
        for (c, n) in report.outliers.counts.iter().enumerate() {
            writeln!(text, "{c},{n}").expect("writing to a String");
        }
        std::fs::write(csv, text).map_err(|e| CliError::io(csv, e))?;
    }
    super::emit_json(&report, out.or(cfg.outputs.report.as_deref()))
}

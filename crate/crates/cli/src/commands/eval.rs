use std::path::Path;

use agq_core::kernels::{ActQuantizer, SiteName};
use agq_core::pipeline::{cosine_similarity, run_stack, Pruning, Stack, StackRun};
use agq_core::pruning::PruneSchedule;
use agq_core::tensor::slice_rows;
use serde::Serialize;

use crate::config::{Mode, RunConfig, Thresholds};
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct SiteRecord {
    pub layer: usize,
    pub site: SiteName,
    pub act_bits: u32,
    pub quantizer: ActQuantizer,
    pub mse: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalRecord {
    pub label: String,
    pub pruned: bool,
    /// Cosine between quantized and FP32 stack outputs over the tokens both keep.
    pub cosine: f64,
    pub locality_fp: Option<f64>,
    pub locality_q: Option<f64>,
    /// Measured from the tokens each layer processed.
    pub sparsity: f64,
    /// Schedule value with fractional survivors, for reference.
    pub sparsity_ideal: f64,
    pub kept_fractions: Vec<f64>,
    pub output_tokens: usize,
    pub sites: Vec<SiteRecord>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub command: &'static str,
    pub seed: u64,
    pub tokens: usize,
    pub layers: usize,
    pub mode: Mode,
    pub quantizer: ActQuantizer,
    pub records: Vec<EvalRecord>,
    pub thresholds: Thresholds,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Sparsity with survivors `(1 - gamma)^j` after `j` prune layers.
pub fn ideal_sparsity(schedule: Option<&PruneSchedule>, layers: usize) -> f64 {
    let Some(s) = schedule else {
        return 0.0;
    };
    let keep = 1.0 - s.per_layer_ratio;
    let total: f64 = (0..layers)
        .map(|l| keep.powi(s.prune_layers.iter().filter(|&&p| p < l).count() as i32))
        .sum();
    1.0 - total / layers as f64
}

fn record(
    label: &str,
    cfg: &RunConfig,
    stack: &Stack,
    x: &agq_core::Tensor2D,
    schedule: Option<&PruneSchedule>,
) -> Result<EvalRecord, CliError> {
    let pruning = schedule.map_or(Pruning::None, |s| Pruning::Schedule(s.clone()));
    let fp = run_stack(stack, x, None, &pruning)?;
    let q = run_stack(stack, x, Some(&cfg.quant_config()), &pruning)?;
    Ok(EvalRecord {
        label: label.to_owned(),
        pruned: schedule.is_some(),
        cosine: common_cosine(&fp, &q)?,
        locality_fp: super::mean_locality(&fp)?,
        locality_q: super::mean_locality(&q)?,
        sparsity: q.sparsity()?,
        sparsity_ideal: ideal_sparsity(schedule, stack.len()),
        kept_fractions: q.kept_fractions(),
        output_tokens: q.kept.len(),
        sites: q
            .layers
            .iter()
            .flat_map(|l| {
                l.diagnostics.iter().flat_map(move |d| {
                    d.sites.iter().map(move |s| SiteRecord {
                        layer: l.layer,
                        site: s.site,
                        act_bits: s.act_bits,
                        quantizer: s.quantizer,
                        mse: s.mse,
                    })
                })
            })
            .collect(),
    })
}

/// Cosine over output tokens present in both runs (pruning may keep different sets).
fn common_cosine(fp: &StackRun, q: &StackRun) -> Result<f64, CliError> {
    if fp.kept == q.kept {
        return Ok(cosine_similarity(&fp.output, &q.output)?);
    }
    let rows = |run: &StackRun| -> Vec<usize> {
        run.kept
            .iter()
            .enumerate()
            .filter(|(_, t)| fp.kept.contains(t) && q.kept.contains(t))
            .map(|(i, _)| i)
            .collect()
    };
    Ok(cosine_similarity(
        &slice_rows(&fp.output, &rows(fp))?,
        &slice_rows(&q.output, &rows(q))?,
    )?)
}

fn check(records: &[EvalRecord], t: &Thresholds) -> Vec<String> {
    let mut failures = Vec::new();
    for r in records {
        if let Some(min) = t.min_cosine {
            if r.cosine < min {
                failures.push(format!("{}: cosine {} below min_cosine {min}", r.label, r.cosine));
            }
        }
        if let Some(max) = t.max_site_mse {
            for s in r.sites.iter().filter(|s| s.mse > max) {
                failures.push(format!(
                    "{}: layer {} site {} mse {} above max_site_mse {max}",
                    r.label,
                    s.layer,
                    s.site.as_str(),
                    s.mse
                ));
            }
        }
    }
    failures
}

pub fn run(cfg: &RunConfig, store: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let stack = super::load_stack(cfg, store)?;
    let seed = seed.unwrap_or(cfg.seeds.input);
    let x = super::hidden_states(cfg, seed)?;
    let label = match cfg.quant.mode {
        Mode::Fp => "fp",
        Mode::W4a8 => "w4a8",
        Mode::W4a4 => "w4a4",
    };
    let mut records = vec![record(label, cfg, &stack, &x, None)?];
    if let Some(s) = cfg.schedule()? {
        records.push(record(&format!("{label}+prune"), cfg, &stack, &x, Some(&s))?);
    }
    let failures = check(&records, &cfg.thresholds);
    let report = EvalReport {
        command: "eval",
        seed,
        tokens: cfg.tokens,
        layers: cfg.block.layers,
        mode: cfg.quant.mode,
        quantizer: cfg.quant.quantizer,
        records,
        thresholds: cfg.thresholds.clone(),
        passed: failures.is_empty(),
        failures,
    };
    super::emit_json(&report, out.or(cfg.outputs.report.as_deref()))?;
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Threshold(report.failures.join("; ")))
    }
}

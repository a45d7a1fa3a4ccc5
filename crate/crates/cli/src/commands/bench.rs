use std::io::Write;
use std::path::Path;

use agq_core::kernels::bench::{bench_gemm, BenchReport, KernelKind, MIN_REPEATS};
use serde::Serialize;

use crate::error::CliError;

/// Default iteration count per (kernel, size) cell.
pub const DEFAULT_REPEATS: usize = 50;
pub const DEFAULT_SIZES: &str = "64,256,512";
pub const DEFAULT_KERNELS: &str = "f32,int8,int4";

/// One JSON line. `contract` is deterministic; `informational` holds timings.
#[derive(Debug, Serialize)]
pub struct BenchLine {
    pub contract: Contract,
    pub informational: Timings,
}

#[derive(Debug, Serialize)]
pub struct Contract {
    pub kernel: &'static str,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub repeats: usize,
    pub input_checksum: u64,
}

#[derive(Debug, Serialize)]
pub struct Timings {
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
}

impl From<BenchReport> for BenchLine {
    fn from(r: BenchReport) -> Self {
        Self {
            contract: Contract {
                kernel: r.kernel,
                m: r.m,
                k: r.k,
                n: r.n,
                repeats: r.repeats,
                input_checksum: r.input_checksum,
            },
            informational: Timings {
                median_ns: r.median_ns,
                p10_ns: r.p10_ns,
                p90_ns: r.p90_ns,
            },
        }
    }
}

fn parse_sizes(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|v| match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("invalid size {v:?}"))),
        })
        .collect()
}

fn parse_kernels(s: &str) -> Result<Vec<KernelKind>, CliError> {
    s.split(',')
        .map(|k| k.trim().parse().map_err(CliError::config))
        .collect()
}

/// Square `size x size x size` GEMMs for every kernel and size.
pub fn run(sizes: &str, kernels: &str, repeats: usize, out: Option<&Path>) -> Result<(), CliError> {
    if repeats < MIN_REPEATS {
        return Err(CliError::Config(format!(
            "repeats must be at least {MIN_REPEATS}, got {repeats}"
        )));
    }
    let sizes = parse_sizes(sizes)?;
    let kernels = parse_kernels(kernels)?;
    let mut text = String::new();
    for &s in &sizes {
        for &k in &kernels {
            let line = BenchLine::from(bench_gemm(s, s, s, k, repeats)?);
            text.push_str(&serde_json::to_string(&line).map_err(|e| CliError::Numeric(e.to_string()))?);
            text.push('\n');
        }
    }
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Io(e.to_string())),
    }
}

//! CSV emission.
//!
//! Numbers are written in Rust's shortest round-trip form (switching to
//! exponent notation for very large or small magnitudes), so equal traces
//! give byte-identical files and parsing a file recovers the exact values.
//! Missing optional values are empty fields.

use std::io::Write;

use gnpolicy::experiments::diagnostics::HessianDiagnostics;
use gnpolicy::optimizers::IterationRecord;

use crate::error::CliError;
use crate::run::RepeatOutput;

pub const TRACE_HEADER: [&str; 9] = [
    "iteration",
    "return",
    "grad_norm",
    "step_size",
    "direction_norm",
    "h12_norm",
    "a1_norm",
    "wall_ms",
    "seed",
];

pub const AGGREGATE_HEADER: [&str; 11] = [
    "iteration",
    "return",
    "return_se",
    "grad_norm",
    "step_size",
    "direction_norm",
    "h12_norm",
    "a1_norm",
    "wall_ms",
    "seed",
    "repeats",
];

pub const HESSIAN_HEADER: [&str; 8] = [
    "iteration",
    "distance",
    "h12_norm",
    "a1_norm",
    "log_h12_norm",
    "log_a1_norm",
    "ratio",
    "seed",
];

pub(crate) fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn write_trace<W: Write>(out: W, repeat: &RepeatOutput) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in &repeat.trace.records {
        w.write_record([
            r.iteration.to_string(),
            num(r.ret),
            num(r.grad_norm),
            num(r.step_size),
            num(r.direction_norm),
            opt(r.h12_norm),
            opt(r.a1_norm),
            num(r.wall_ms),
            repeat.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-iteration mean over the repeats that reached that iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub iteration: usize,
    pub ret: f64,
    /// Standard error of the mean return; 0 with a single repeat.
    pub return_se: f64,
    pub grad_norm: f64,
    pub step_size: f64,
    pub direction_norm: f64,
    pub h12_norm: Option<f64>,
    pub a1_norm: Option<f64>,
    pub wall_ms: f64,
    pub repeats: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn mean_opt(rows: &[&IterationRecord], get: impl Fn(&IterationRecord) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = rows.iter().map(|r| get(r)).collect();
    vals.map(|v| mean(&v))
}

pub fn aggregate(repeats: &[RepeatOutput]) -> Vec<AggregateRow> {
    let longest = repeats.iter().map(|r| r.trace.records.len()).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let rows: Vec<&IterationRecord> = repeats.iter().filter_map(|r| r.trace.records.get(i)).collect();
            let col = |get: fn(&IterationRecord) -> f64| mean(&rows.iter().map(|r| get(r)).collect::<Vec<_>>());
            let rets: Vec<f64> = rows.iter().map(|r| r.ret).collect();
            let m = mean(&rets);
            let n = rets.len();
            let return_se = if n > 1 {
                let var = rets.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                iteration: i,
                ret: m,
                return_se,
                grad_norm: col(|r| r.grad_norm),
                step_size: col(|r| r.step_size),
                direction_norm: col(|r| r.direction_norm),
                h12_norm: mean_opt(&rows, |r| r.h12_norm),
                a1_norm: mean_opt(&rows, |r| r.a1_norm),
                wall_ms: col(|r| r.wall_ms),
                repeats: n,
            }
        })
        .collect()
}

pub fn write_aggregate<W: Write>(out: W, rows: &[AggregateRow], master_seed: u64) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            num(r.ret),
            num(r.return_se),
            num(r.grad_norm),
            num(r.step_size),
            num(r.direction_norm),
            opt(r.h12_norm),
            opt(r.a1_norm),
            num(r.wall_ms),
            master_seed.to_string(),
            r.repeats.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_hessian<W: Write>(out: W, diag: &HessianDiagnostics, seed: u64) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HESSIAN_HEADER)?;
    for r in &diag.rows {
        w.write_record([
            r.iteration.to_string(),
            num(r.distance),
            num(r.h12_norm),
            num(r.a1_norm),
            num(r.log_h12()),
            num(r.log_a1()),
            opt(r.ratio()),
            seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

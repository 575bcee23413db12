use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{set_path, ExperimentConfig};
use crate::error::CliError;
use crate::output::{aggregate, num, write_aggregate, AggregateRow, write_hessian, write_trace};
use crate::run::{run_diagnostics, run_experiment};
use crate::validate::run_suite;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Prints the report and returns whether every property passed.
pub fn validate(suite: &str, seed: u64, out: &mut impl Write) -> Result<bool, CliError> {
    let results = run_suite(suite, seed)?;
    for r in &results {
        writeln!(out, "{r}")?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(out, "{} properties, {failed} failed", results.len())?;
    Ok(failed == 0)
}

/// Writes `repeat_{i}.csv` per repeat and `aggregate.csv` into `out_dir`,
/// or the aggregate to `stdout` when no directory is given.
pub fn train(config_path: &Path, out_dir: Option<&Path>, stdout: &mut impl Write) -> Result<(), CliError> {
    let config = ExperimentConfig::load(config_path)?;
    train_config(&config, out_dir, stdout)
}

fn train_config(config: &ExperimentConfig, out_dir: Option<&Path>, stdout: &mut impl Write) -> Result<(), CliError> {
    let rows = execute(config, out_dir)?;
    if out_dir.is_none() {
        write_aggregate(&mut *stdout, &rows, config.seed)?;
    }
    Ok(())
}

/// Runs every repeat and, given a directory, writes the per-repeat traces,
/// the aggregate and the resolved configuration into it.
fn execute(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<AggregateRow>, CliError> {
    let repeats = run_experiment(config)?;
    let rows = aggregate(&repeats);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        for r in &repeats {
            write_trace(create(dir, &format!("repeat_{}.csv", r.repeat))?, r)?;
        }
        write_aggregate(create(dir, "aggregate.csv")?, &rows, config.seed)?;
        let resolved = serde_json::to_string_pretty(config).map_err(|e| CliError::Numerical(e.to_string()))?;
        fs::write(dir.join("config.json"), resolved + "\n")?;
    }
    Ok(rows)
}

pub fn diagnose_hessian(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let (seed, diag) = run_diagnostics(&config)?;
    fs::create_dir_all(out_dir)?;
    write_hessian(create(out_dir, "hessian.csv")?, &diag, seed)
}

/// Parses a comma-separated list of JSON scalars; bare words are strings.
pub fn parse_values(list: &str) -> Result<Vec<serde_json::Value>, CliError> {
    let values: Vec<serde_json::Value> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| serde_json::from_str(s).unwrap_or_else(|_| serde_json::Value::String(s.to_string())))
        .collect();
    if values.is_empty() {
        return Err(CliError::Config("values: the list is empty".into()));
    }
    Ok(values)
}

/// Runs the configuration once per value of `param`. Each value gets its own
/// `value_{i}` directory under `out_dir`; `sweep.csv` lists the final
/// aggregate row of every value.
pub fn sweep(
    config_path: &Path,
    param: &str,
    values: &str,
    out_dir: Option<&Path>,
    stdout: &mut impl Write,
) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let values = parse_values(values)?;
    // Every variant is validated before anything runs.
    let configs = values
        .iter()
        .map(|v| {
            let mut d = doc.clone();
            set_path(&mut d, param, v.clone())?;
            ExperimentConfig::from_json(&d.to_string())
                .map_err(|e| CliError::Config(format!("{param}={v}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut table = Vec::new();
    for (i, (value, config)) in values.iter().zip(&configs).enumerate() {
        let dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("value_{i}")));
        let rows = execute(config, dir.as_deref())?;
        let last = rows.last().expect("every run has an initial row");
        table.push((value.to_string(), last.clone(), config.seed));
    }

    let sink: Box<dyn Write + '_> = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Box::new(create(d, "sweep.csv")?)
        }
        None => Box::new(&mut *stdout),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["param", "value", "iteration", "return", "return_se", "grad_norm", "seed"])?;
    for (value, row, seed) in &table {
        w.write_record([
            param.to_string(),
            value.clone(),
            row.iteration.to_string(),
            num(row.ret),
            num(row.return_se),
            num(row.grad_norm),
            seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

//! Experiment files, run artifacts and the strategy comparison table.
//!
//! An experiment file is JSON:
//!
//! ```json
//! {
//!   "version": "1",
//!   "defaults": { "model": { ... }, "rounds": 100, ... },
//!   "entries": [ { "name": "fedavg", "strategy": { "kind": "fedavg" } } ]
//! }
//! ```
//!
//! Each entry is deep-merged over `defaults` (objects merge, everything else
//! replaces) and must then form a complete [`RunConfig`]. When `data.seed` is
//! absent it is taken from the run `seed`; `--seed` overrides both.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::engine::{self, RoundMetrics, RunConfig, RunOutput};

pub const SCHEMA_VERSION: &str = "1";
pub const BYTES_PER_MB: f64 = 1e6;
pub const MS_PER_HOUR: f64 = 3.6e6;

/// Parameters `sweep` may vary.
pub const SWEEP_PARAMETERS: &[&str] = &[
    "partition.beta",
    "compression.k_fraction",
    "strategy.alpha0",
    "lr",
    "local_epochs",
];

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation, unreadable or invalid configuration.
    #[error("{0}")]
    Usage(String),
    /// Failure while running or writing results.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(context: impl std::fmt::Display) -> impl FnOnce(crate::Error) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

/// One resolved entry of an experiment file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedRun {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    version: String,
    #[serde(default)]
    defaults: Map<String, Value>,
    entries: Vec<Map<String, Value>>,
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Raw (unvalidated) entries after merging with defaults and applying the
/// seed rules.
fn resolve_values(text: &str, seed_override: Option<u64>) -> Result<Vec<(String, Value)>, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ExperimentFile = serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Usage(format!("config schema error at `{}`: {}", e.path(), e.inner())))?;
    if file.version != SCHEMA_VERSION {
        return Err(CliError::Usage(format!(
            "config field `version`: unsupported {:?}, expected {SCHEMA_VERSION:?}",
            file.version
        )));
    }
    if file.entries.is_empty() {
        return Err(CliError::Usage("config field `entries`: at least one entry required".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(file.entries.len());
    for (i, mut entry) in file.entries.into_iter().enumerate() {
        let name = match entry.remove("name") {
            Some(Value::String(s)) if valid_name(&s) => s,
            Some(_) => {
                return Err(CliError::Usage(format!(
                    "config field `entries[{i}].name`: must be a nonempty string of [A-Za-z0-9._=-]"
                )))
            }
            None => return Err(CliError::Usage(format!("config field `entries[{i}].name`: missing"))),
        };
        if !seen.insert(name.clone()) {
            return Err(CliError::Usage(format!("config field `entries[{i}].name`: duplicate {name:?}")));
        }
        let mut value = Value::Object(file.defaults.clone());
        merge(&mut value, Value::Object(entry));
        apply_seed(&mut value, seed_override);
        out.push((name, value));
    }
    Ok(out)
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '='))
}

fn apply_seed(value: &mut Value, seed_override: Option<u64>) {
    let Value::Object(obj) = value else { return };
    if let Some(seed) = seed_override {
        obj.insert("seed".into(), seed.into());
        if let Some(Value::Object(data)) = obj.get_mut("data") {
            data.insert("seed".into(), seed.into());
        }
        return;
    }
    let seed = obj.get("seed").cloned();
    if let (Some(seed), Some(Value::Object(data))) = (seed, obj.get_mut("data")) {
        data.entry("seed").or_insert(seed);
    }
}

fn to_config(name: &str, value: Value) -> Result<RunConfig, CliError> {
    let config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        CliError::Usage(format!("entry {name:?}: config schema error at `{}`: {}", e.path(), e.inner()))
    })?;
    config
        .validate()
        .map_err(|e| CliError::Usage(format!("entry {name:?}: {e}")))?;
    Ok(config)
}

fn read_config_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))
}

/// Parses and validates every entry of an experiment file.
pub fn load_experiment(path: &Path, seed_override: Option<u64>) -> Result<Vec<NamedRun>, CliError> {
    parse_experiment(&read_config_text(path)?, seed_override)
}

pub fn parse_experiment(text: &str, seed_override: Option<u64>) -> Result<Vec<NamedRun>, CliError> {
    resolve_values(text, seed_override)?
        .into_iter()
        .map(|(name, value)| Ok(NamedRun { config: to_config(&name, value)?, name }))
        .collect()
}

/// Column names of the metrics CSV for `platforms` platforms.
pub fn metrics_header(platforms: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "round",
        "eval_loss",
        "eval_accuracy",
        "round_bytes",
        "cumulative_bytes",
        "simulated_ms",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..platforms).map(|i| format!("per_platform_loss_{i}")));
    cols
}

/// Writes one row per record. Floats use the shortest representation that
/// parses back to the same value, so the file round-trips byte for byte.
pub fn write_metrics_csv<W: Write>(metrics: &[RoundMetrics], platforms: usize, writer: W) -> crate::Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    out.write_record(metrics_header(platforms))?;
    for m in metrics {
        let mut row = vec![
            m.round.to_string(),
            m.eval_loss.to_string(),
            m.eval_accuracy.to_string(),
            m.round_bytes.to_string(),
            m.cumulative_bytes.to_string(),
            m.simulated_ms.to_string(),
        ];
        row.extend(m.per_platform_losses.iter().map(f64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(reader: R) -> crate::Result<Vec<RoundMetrics>> {
    let mut input = csv::Reader::from_reader(reader);
    let headers = input.headers()?.clone();
    let platforms = headers.len().saturating_sub(6);
    if headers.iter().collect::<Vec<_>>() != metrics_header(platforms) {
        return Err(crate::Error::invalid("metrics header", "unexpected columns"));
    }
    let bad = |row: usize| crate::Error::invalid(format!("metrics row {row}"), "unparseable value");
    let mut out = Vec::new();
    for (i, record) in input.records().enumerate() {
        let r = record?;
        let f = |j: usize| r.get(j).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad(i + 1));
        let u = |j: usize| r.get(j).and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| bad(i + 1));
        out.push(RoundMetrics {
            round: u(0)? as usize,
            eval_loss: f(1)?,
            eval_accuracy: f(2)?,
            round_bytes: u(3)?,
            cumulative_bytes: u(4)?,
            simulated_ms: f(5)?,
            per_platform_losses: (6..6 + platforms).map(f).collect::<crate::Result<_>>()?,
        });
    }
    Ok(out)
}

/// Per-run summary written next to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub strategy: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: usize,
    pub final_loss: f64,
    pub cumulative_bytes: u64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub messages: u64,
    /// Modelled time on the simulated clock, not wall-clock.
    pub total_simulated_ms: f64,
    pub config: RunConfig,
}

impl Summary {
    pub fn from_output(name: &str, config: &RunConfig, output: &RunOutput) -> Self {
        let last = output.metrics.last().expect("runs record at least one round");
        let best = output
            .metrics
            .iter()
            .fold(last, |best, m| if m.eval_accuracy > best.eval_accuracy { m } else { best });
        let best = output
            .metrics
            .iter()
            .find(|m| m.eval_accuracy == best.eval_accuracy)
            .unwrap_or(best);
        Summary {
            name: name.to_string(),
            strategy: config.strategy.name().to_string(),
            seed: config.seed,
            rounds: output.metrics.len(),
            final_accuracy: last.eval_accuracy,
            best_accuracy: best.eval_accuracy,
            best_round: best.round,
            final_loss: last.eval_loss,
            cumulative_bytes: last.cumulative_bytes,
            upload_bytes: output.ledger.upload_bytes(),
            download_bytes: output.ledger.download_bytes(),
            messages: output.ledger.messages(),
            total_simulated_ms: last.simulated_ms,
            config: config.clone(),
        }
    }
}

/// Files produced for one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Summary,
}

pub fn metrics_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(format!("{name}.metrics.csv"))
}

pub fn summary_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(format!("{name}.summary.json"))
}

fn execute(run: &NamedRun, out_dir: &Path) -> Result<RunArtifacts, CliError> {
    let output = engine::run(&run.config).map_err(runtime(format!("entry {:?}", run.name)))?;
    let metrics_path = metrics_path(out_dir, &run.name);
    let summary_path = summary_path(out_dir, &run.name);
    let mut csv_bytes = Vec::new();
    write_metrics_csv(&output.metrics, run.config.fleet.platforms.len(), &mut csv_bytes)
        .map_err(runtime("serializing metrics"))?;
    fs::write(&metrics_path, csv_bytes)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", metrics_path.display())))?;
    let summary = Summary::from_output(&run.name, &run.config, &output);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&summary_path, json + "\n")
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", summary_path.display())))?;
    Ok(RunArtifacts {
        metrics_path,
        summary_path,
        summary,
    })
}

/// Runs entries in parallel; results keep entry order.
pub fn execute_all(runs: &[NamedRun], out_dir: &Path) -> Result<Vec<RunArtifacts>, CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out_dir.display())))?;
    runs.par_iter().map(|r| execute(r, out_dir)).collect()
}

/// `run <config> --out <dir> [--seed N]`
pub fn cmd_run(config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<Vec<RunArtifacts>, CliError> {
    let runs = load_experiment(config_path, seed_override)?;
    execute_all(&runs, out_dir)
}

/// `validate <config>`: returns the resolved entry names.
pub fn cmd_validate(config_path: &Path) -> Result<Vec<String>, CliError> {
    Ok(load_experiment(config_path, None)?.into_iter().map(|r| r.name).collect())
}

/// One row of the comparison table, in report units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub strategy: String,
    pub cumulative_mb: f64,
    pub simulated_hours: f64,
    pub final_accuracy_pct: f64,
    pub final_loss: f64,
    pub best_accuracy_pct: f64,
}

impl From<&Summary> for CompareRow {
    fn from(s: &Summary) -> Self {
        CompareRow {
            strategy: s.name.clone(),
            cumulative_mb: s.cumulative_bytes as f64 / BYTES_PER_MB,
            simulated_hours: s.total_simulated_ms / MS_PER_HOUR,
            final_accuracy_pct: s.final_accuracy * 100.0,
            final_loss: s.final_loss,
            best_accuracy_pct: s.best_accuracy * 100.0,
        }
    }
}

pub fn read_summary(out_dir: &Path, name: &str) -> Result<Summary, CliError> {
    let path = summary_path(out_dir, name);
    let text = fs::read_to_string(&path)
        .map_err(|_| CliError::Usage(format!("missing summary for {name:?} ({})", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("unreadable summary {}: {e}", path.display())))
}

pub fn render_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    out.push_str("Time is simulated (modelled clock), not wall-clock. MB = 10^6 bytes.\n\n");
    out.push_str("| Strategy | Cumulative MB | Simulated Hours | Final Accuracy % | Final Loss | Best Accuracy % |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.3} | {:.4} | {:.2} | {:.4} | {:.2} |",
            r.strategy, r.cumulative_mb, r.simulated_hours, r.final_accuracy_pct, r.final_loss, r.best_accuracy_pct
        );
    }
    out
}

fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<(), CliError> {
    let fail = |e: csv::Error| CliError::Runtime(format!("writing {}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(fail)?;
    w.write_record([
        "strategy",
        "cumulative_mb",
        "simulated_hours",
        "final_accuracy_pct",
        "final_loss",
        "best_accuracy_pct",
    ])
    .map_err(fail)?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.cumulative_mb.to_string(),
            r.simulated_hours.to_string(),
            r.final_accuracy_pct.to_string(),
            r.final_loss.to_string(),
            r.best_accuracy_pct.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

/// `compare --out <dir> <names...>`: returns the markdown table and writes
/// `compare.csv` into `out_dir`.
pub fn cmd_compare(out_dir: &Path, names: &[String]) -> Result<String, CliError> {
    if names.is_empty() {
        return Err(CliError::Usage("compare needs at least one entry name".into()));
    }
    let summaries = names
        .iter()
        .map(|n| read_summary(out_dir, n))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<CompareRow> = summaries.iter().map(CompareRow::from).collect();
    write_compare_csv(&rows, &out_dir.join("compare.csv"))?;
    Ok(render_table(&rows))
}

fn canonical_parameter(param: &str) -> Option<&'static str> {
    let short = |p: &str| p.rsplit('.').next().map(str::to_string);
    SWEEP_PARAMETERS
        .iter()
        .copied()
        .find(|&p| p == param || short(p).as_deref() == Some(param))
}

fn set_sweep_value(value: &mut Value, param: &'static str, raw: &str, entry: &str) -> Result<(), CliError> {
    let usage = |msg: String| CliError::Usage(format!("entry {entry:?}: {msg}"));
    let number: Value = if param == "local_epochs" {
        raw.parse::<u64>()
            .map_err(|_| usage(format!("sweep value {raw:?} is not a positive integer")))?
            .into()
    } else {
        let v = raw
            .parse::<f64>()
            .map_err(|_| usage(format!("sweep value {raw:?} is not a number")))?;
        serde_json::Number::from_f64(v)
            .ok_or_else(|| usage(format!("sweep value {raw:?} is not finite")))?
            .into()
    };
    let obj = value.as_object_mut().ok_or_else(|| usage("entry is not an object".into()))?;
    let kind_of = |v: Option<&Value>| v.and_then(|v| v.get("kind")).and_then(Value::as_str).map(str::to_string);
    match param {
        "lr" | "local_epochs" => {
            obj.insert(param.into(), number);
        }
        "compression.k_fraction" => {
            let mut c = Map::new();
            c.insert("k_fraction".into(), number);
            obj.insert("compression".into(), Value::Object(c));
        }
        "partition.beta" => {
            let partition = obj
                .get_mut("fleet")
                .and_then(|f| f.get_mut("partition"))
                .filter(|p| kind_of(Some(p)).as_deref() == Some("dirichlet"))
                .ok_or_else(|| usage("partition.beta requires a dirichlet partition".into()))?;
            partition["beta"] = number;
        }
        "strategy.alpha0" => {
            if kind_of(obj.get("strategy")).as_deref() != Some("async") {
                return Err(usage("strategy.alpha0 requires an async strategy".into()));
            }
            obj.get_mut("strategy").expect("checked")["alpha0"] = number;
        }
        _ => unreachable!("allow-list checked"),
    }
    Ok(())
}

/// Name given to the run of `entry` with `param` set to `raw`.
pub fn sweep_entry_name(entry: &str, param: &str, raw: &str) -> String {
    let short = param.rsplit('.').next().unwrap_or(param);
    format!("{entry}__{short}={raw}")
}

/// Result of a sweep: the per-value artifacts and the rendered table.
#[derive(Debug)]
pub struct SweepReport {
    pub artifacts: Vec<RunArtifacts>,
    pub table: String,
}

/// `sweep <config> --param <name> --values v1,v2,... --out <dir>`
pub fn cmd_sweep(config_path: &Path, param: &str, values: &[String], out_dir: &Path) -> Result<SweepReport, CliError> {
    let param = canonical_parameter(param).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown sweep parameter {param:?}; allowed: {}",
            SWEEP_PARAMETERS.join(", ")
        ))
    })?;
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let base = resolve_values(&read_config_text(config_path)?, None)?;
    let mut runs = Vec::new();
    for (entry, value) in &base {
        for raw in values {
            let mut v = value.clone();
            set_sweep_value(&mut v, param, raw, entry)?;
            let name = sweep_entry_name(entry, param, raw);
            if !valid_name(&name) {
                return Err(CliError::Usage(format!("sweep value {raw:?} yields invalid name {name:?}")));
            }
            runs.push(NamedRun {
                config: to_config(&name, v)?,
                name,
            });
        }
    }
    let artifacts = execute_all(&runs, out_dir)?;
    let names: Vec<String> = runs.into_iter().map(|r| r.name).collect();
    let table = cmd_compare(out_dir, &names)?;
    Ok(SweepReport { artifacts, table })
}

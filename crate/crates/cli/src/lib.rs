//! Command implementations behind the `fledgesim` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use fledgesim_core::config::{apply_override, get_path, parse_value, set_path, ExperimentConfig};
use fledgesim_core::model::PhaseTimings;
use fledgesim_core::profiles::Profiles;
use fledgesim_core::sim::{run_experiment, ExperimentSummary};
use fledgesim_core::viability::{assess_named, ViabilityReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "FLEDGESIM_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<fledgesim_core::Error> for CliError {
    fn from(e: fledgesim_core::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, CliError>;

/// Reads the config file and applies the seed environment variable and
/// `key=value` overrides, in that order.
pub fn load_config(path: &Path, overrides: &[String], env_seed: Option<&str>) -> CliResult<(toml::Table, ExperimentConfig)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = env_seed {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{seed}`")))?;
        set_path(&mut table, "seed", toml::Value::Integer(seed as i64))?;
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config = ExperimentConfig::from_table(table.clone())?;
    Ok((table, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub output_dir: PathBuf,
    pub overrides: Vec<String>,
    pub config: ExperimentConfig,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

/// One row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub repeat: usize,
    pub seed: u64,
    pub round: u64,
    pub selected: usize,
    pub survivors: usize,
    pub failed: bool,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub t_computation_s: f64,
    pub t_communication_s: f64,
    pub granularity: f64,
    /// `inf` when no finite guarantee holds.
    pub epsilon: f64,
    pub noise_sigma: f64,
    pub eta_e: f64,
    pub computation_kwh: f64,
    pub communication_kwh: f64,
}

/// One row of `timings.csv` (wall-clock, not reproducible).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub repeat: usize,
    pub round: u64,
    pub client_id: usize,
    pub batch_load: f64,
    pub forward: f64,
    pub loss: f64,
    pub backward: f64,
    pub optimizer: f64,
}

impl TimingRow {
    fn new(repeat: usize, round: u64, client_id: usize, t: &PhaseTimings) -> Self {
        Self {
            repeat,
            round,
            client_id,
            batch_load: t.batch_load,
            forward: t.forward,
            loss: t.loss,
            backward: t.backward,
            optimizer: t.optimizer,
        }
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes `summary.json`, `rounds.csv`, `timings.csv` and `manifest.json`.
pub fn write_outputs(out: &Path, summary: &ExperimentSummary, manifest: &RunManifest) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_json(&out.join("summary.json"), summary)?;
    let rounds = summary.runs.iter().enumerate().flat_map(|(i, run)| {
        run.rounds.iter().map(move |r| RoundRow {
            repeat: i,
            seed: run.seed,
            round: r.round_index,
            selected: r.selected.len(),
            survivors: r.survivors.len(),
            failed: r.failed(),
            val_accuracy: r.val_accuracy,
            val_loss: r.val_loss,
            t_computation_s: r.t_computation_s,
            t_communication_s: r.t_communication_s,
            granularity: r.granularity,
            epsilon: r.epsilon,
            noise_sigma: r.noise_sigma,
            eta_e: r.energy.eta_e,
            computation_kwh: r.energy.computation_kwh,
            communication_kwh: r.energy.communication_kwh,
        })
    });
    write_csv(&out.join("rounds.csv"), rounds)?;
    let timings = summary.runs.iter().enumerate().flat_map(|(i, run)| {
        run.rounds.iter().flat_map(move |r| {
            r.client_timings
                .iter()
                .map(move |c| TimingRow::new(i, r.round_index, c.client_id, &c.timings))
        })
    });
    write_csv(&out.join("timings.csv"), timings)?;
    write_json(&out.join("manifest.json"), manifest)
}

fn execute(config_path: &Path, out: &Path, overrides: &[String], config: &ExperimentConfig) -> CliResult<ExperimentSummary> {
    let started_at = now();
    let summary = run_experiment(config, config.repeats)?;
    let manifest = RunManifest {
        config_path: config_path.to_path_buf(),
        output_dir: out.to_path_buf(),
        overrides: overrides.to_vec(),
        config: config.normalized(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: now(),
    };
    write_outputs(out, &summary, &manifest)?;
    Ok(summary)
}

fn check_not_aborted(summary: &ExperimentSummary) -> CliResult<()> {
    if summary.aborted {
        return Err(CliError::Runtime(
            "run aborted after too many consecutive failed rounds (outputs were written)".into(),
        ));
    }
    Ok(())
}

/// `run`: one experiment into `out`.
pub fn cmd_run(config_path: &Path, out: &Path, overrides: &[String], env_seed: Option<&str>) -> CliResult<ExperimentSummary> {
    let (_, config) = load_config(config_path, overrides, env_seed)?;
    config.resolve()?;
    let summary = execute(config_path, out, overrides, &config)?;
    check_not_aborted(&summary)?;
    Ok(summary)
}

/// One row of the sweep matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub axis: String,
    pub value: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
    /// First repeat's final epsilon; `inf` without a finite guarantee.
    pub epsilon: f64,
    pub failed_rounds: u64,
    pub computation_kwh: f64,
    pub communication_kwh: f64,
    pub total_kwh: f64,
}

fn sweep_dir_name(axis: &str, value: &str) -> String {
    let clean = |s: &str| s.replace(|c: char| !(c.is_ascii_alphanumeric() || c == '.' || c == '-'), "_");
    format!("{}={}", clean(axis), clean(value))
}

/// `sweep`: one sub-run per value plus `matrix.csv`. All sub-configs are
/// validated before anything is written.
pub fn cmd_sweep(
    config_path: &Path,
    axis: &str,
    values: &[String],
    out: &Path,
    overrides: &[String],
    env_seed: Option<&str>,
) -> CliResult<Vec<MatrixRow>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let (base, _) = load_config(config_path, overrides, env_seed)?;
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let parsed = parse_value(v);
        if !(parsed.is_integer() || parsed.is_float()) {
            return Err(CliError::Config(format!("sweep value `{v}` is not a number")));
        }
        let mut table = base.clone();
        set_path(&mut table, axis, parsed)?;
        let config = ExperimentConfig::from_table(table)?;
        let snapshot = toml::Table::try_from(config.normalized()).map_err(|e| CliError::Config(e.to_string()))?;
        match get_path(&snapshot, axis) {
            Some(toml::Value::Integer(_) | toml::Value::Float(_)) => {}
            _ => return Err(CliError::Config(format!("`{axis}` is not a numeric configuration field"))),
        }
        config.resolve()?;
        let mut sub_overrides = overrides.to_vec();
        sub_overrides.push(format!("{axis}={v}"));
        configs.push((v.clone(), config, sub_overrides));
    }

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let summaries = configs
        .par_iter()
        .map(|(v, config, sub_overrides)| execute(config_path, &out.join(sweep_dir_name(axis, v)), sub_overrides, config))
        .collect::<CliResult<Vec<_>>>()?;

    let rows: Vec<MatrixRow> = configs
        .iter()
        .zip(&summaries)
        .map(|((v, _, _), s)| MatrixRow {
            axis: axis.to_string(),
            value: v.clone(),
            accuracy_mean: s.final_accuracy.mean,
            accuracy_std: s.final_accuracy.std,
            loss_mean: s.final_loss.mean,
            loss_std: s.final_loss.std,
            epsilon: s.runs[0].final_epsilon,
            failed_rounds: s.runs.iter().map(|r| r.failed_rounds).sum(),
            computation_kwh: s.computation_kwh,
            communication_kwh: s.communication_kwh,
            total_kwh: s.total_kwh,
        })
        .collect();
    write_csv(&out.join("matrix.csv"), rows.iter())?;
    for s in &summaries {
        check_not_aborted(s)?;
    }
    Ok(rows)
}

/// `viability`: cost estimate for one model size, network and device.
pub fn cmd_viability(params: usize, network: &str, device: &str, samples: usize) -> CliResult<ViabilityReport> {
    Ok(assess_named(params, samples, network, device, &Profiles::builtin())?)
}

pub fn print_viability(r: &ViabilityReport, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "model parameters      {}", r.params)?;
    writeln!(w, "network / device      {} / {}", r.network, r.device)?;
    writeln!(w, "payload               {} bits ({:.4} MB)", r.payload_bits, r.payload_mb)?;
    writeln!(w, "communication time    {:.6} s per round", r.t_communication_s)?;
    match (r.t_computation_s, r.granularity) {
        (Some(t), Some(g)) => {
            writeln!(w, "computation time      {:.6} s per round ({} samples)", t, r.samples)?;
            writeln!(w, "granularity G         {g:.4}")?;
        }
        _ => {
            writeln!(w, "computation time      OOM (model exceeds device memory)")?;
            writeln!(w, "granularity G         n/a")?;
        }
    }
    writeln!(w, "transmission energy   {:.6e} J ({:.6e} kWh) per client per round", r.transmission_j, r.transmission_kwh)?;
    writeln!(w, "verdict: {}", r.verdict_label())
}

//! Command-line front end: validate configs, run deterministic training with
//! an optional serial-oracle check, simulate batch timelines, sweep
//! hyperparameters to CSV, and print the per-worker memory ledger.
//!
//! Exit codes: 0 success, 1 validation failure, 2 tolerance failure,
//! 3 I/O error.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pipegrid::analytics::{
    comm_comp_counters, memory_ledger, simulate_batch, MemoryLedger, PerfReport,
};
use pipegrid::config::{load_config, validate, ConfigFileError, RunConfig, ValidatedRun};
use pipegrid::data::SyntheticStream;
use pipegrid::engine::serial::SerialTrainer;
use pipegrid::engine::HybridEngine;

#[derive(Parser)]
#[command(
    name = "pipegrid",
    version,
    about = "Hybrid-parallel training engine and simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration file and print the normalized run.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-key overrides, e.g. --set parallel.g_inter=4
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train on the synthetic task and write a JSONL loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for train_log.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run the serial reference and compare per-step losses.
        #[arg(long)]
        oracle: bool,
        /// Maximum allowed relative loss difference under --oracle.
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
        /// Also dump the run's fabric event log (requires --out).
        #[arg(long)]
        trace: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Simulate one batch and report the timeline, counters and ledger.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Simulate across one axis and write a CSV, one row per point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the per-worker memory ledger.
    Memory {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    #[value(name = "g_inter")]
    GInter,
    K,
    Bsize,
    Ac,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::GInter => "g_inter",
            Axis::K => "k",
            Axis::Bsize => "bsize",
            Axis::Ac => "ac",
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Tolerance(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Tolerance(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Tolerance(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<ConfigFileError> for CliError {
    fn from(e: ConfigFileError) -> Self {
        match e {
            ConfigFileError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { config, set } => cmd_validate(&config, &set),
        Command::Train {
            config,
            steps,
            seed,
            out,
            oracle,
            tolerance,
            trace,
            set,
        } => cmd_train(
            &config,
            steps,
            seed,
            out.as_deref(),
            oracle,
            tolerance,
            trace,
            &set,
        ),
        Command::Simulate {
            config,
            seed,
            out,
            set,
        } => cmd_simulate(&config, seed, out.as_deref(), &set),
        Command::Sweep {
            config,
            axis,
            values,
            seed,
            out,
            set,
        } => cmd_sweep(&config, axis, &values, seed, out.as_deref(), &set),
        Command::Memory { config, seed, out, set } => cmd_memory(&config, seed, out.as_deref(), &set),
    }
}

fn load_validated(config: &Path, overrides: &[String]) -> Result<ValidatedRun, CliError> {
    let raw = load_config(config, overrides)?;
    validated_from_raw(&raw)
}

fn validated_from_raw(raw: &RunConfig) -> Result<ValidatedRun, CliError> {
    validate(raw).map_err(|violations| {
        let lines: Vec<String> = violations.iter().map(|v| format!("  - {v}")).collect();
        CliError::Validation(format!("configuration invalid:\n{}", lines.join("\n")))
    })
}

fn ensure_out_dir(out: Option<&Path>) -> Result<(), CliError> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MetaRecord<'a> {
    kind: &'static str,
    seed: u64,
    config: &'a ValidatedRun,
}

fn meta_line(seed: u64, run: &ValidatedRun) -> String {
    serde_json::to_string(&MetaRecord {
        kind: "meta",
        seed,
        config: run,
    })
    .expect("config serializes")
}

fn cmd_validate(config: &Path, overrides: &[String]) -> Result<(), CliError> {
    let run = load_validated(config, overrides)?;
    println!("valid: {run}");
    println!("workers: {}", run.workers);
    println!("checkpoint_interval: {}", run.checkpoint_interval);
    println!("pipeline_limit: {}", run.pipeline_limit);
    Ok(())
}

#[derive(Serialize)]
struct TrainRecord {
    kind: &'static str,
    step: u64,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_rel_diff: Option<f64>,
    skipped_overflow: bool,
    loss_scale: f64,
    sim_batch_time_s: f64,
    p2p_bytes_sent_total: u64,
    allreduce_bytes_total: u64,
    in_flight_peak: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    steps: u64,
    seed: u64,
    out: Option<&Path>,
    oracle: bool,
    tolerance: f64,
    trace: bool,
    overrides: &[String],
) -> Result<(), CliError> {
    let run = load_validated(config, overrides)?;
    ensure_out_dir(out)?;
    let sim_batch_time_s = simulate_batch(&run).batch_time_s;

    let mut engine: HybridEngine<f64> = HybridEngine::new(&run, seed);
    let mut reference = oracle.then(|| SerialTrainer::<f64>::new(&run, seed));
    let stream: SyntheticStream<f64> = SyntheticStream::new(&run.net, run.batch.batch_size, seed);

    let mut lines = vec![meta_line(seed, &run)];
    let mut max_rel_diff: f64 = 0.0;
    for step in 0..steps {
        let batch = stream.batch(step);
        let result = engine
            .train_step(&batch)
            .map_err(|e| CliError::Validation(format!("training failed at step {step}: {e}")))?;
        let (oracle_loss, oracle_rel_diff) = match reference.as_mut() {
            Some(serial) => {
                let s = serial.step(&batch).map_err(|e| {
                    CliError::Validation(format!("oracle failed at step {step}: {e}"))
                })?;
                let rel = (result.loss - s.loss).abs() / s.loss.abs().max(1e-12);
                max_rel_diff = max_rel_diff.max(rel);
                (Some(s.loss), Some(rel))
            }
            None => (None, None),
        };
        let stats_total: u64 = engine
            .fabric()
            .all_stats()
            .iter()
            .map(|s| s.allreduce_bytes)
            .sum();
        lines.push(
            serde_json::to_string(&TrainRecord {
                kind: "step",
                step,
                loss: result.loss,
                oracle_loss,
                oracle_rel_diff,
                skipped_overflow: result.skipped_overflow,
                loss_scale: engine.loss_scale(),
                sim_batch_time_s,
                p2p_bytes_sent_total: engine.fabric().total_bytes_sent(),
                allreduce_bytes_total: stats_total,
                in_flight_peak: engine.in_flight_peak(),
            })
            .expect("record serializes"),
        );
    }
    if oracle {
        lines.push(format!(
            "{{\"kind\":\"oracle-summary\",\"max_rel_diff\":{},\"tolerance\":{}}}",
            serde_json::to_string(&max_rel_diff).unwrap(),
            serde_json::to_string(&tolerance).unwrap()
        ));
    }
    let body = lines.join("\n") + "\n";
    match out {
        Some(dir) => fs::write(dir.join("train_log.jsonl"), &body)?,
        None => print!("{body}"),
    }
    if trace {
        let Some(dir) = out else {
            return Err(CliError::Validation("--trace requires --out".into()));
        };
        let mut file = fs::File::create(dir.join("fabric_trace.jsonl"))?;
        engine
            .fabric()
            .write_trace(&mut file)
            .map_err(|e| CliError::Io(format!("writing fabric trace: {e}")))?;
    }
    eprintln!("trained {steps} steps ({})", run);
    if oracle && max_rel_diff > tolerance {
        return Err(CliError::Tolerance(format!(
            "oracle loss diverged: max relative difference {max_rel_diff:e} exceeds tolerance {tolerance:e}"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    seed: u64,
    config: &'a ValidatedRun,
    perf: &'a PerfReport,
    counters: pipegrid::analytics::CommCompCounters,
    ledger_unoptimized: MemoryLedger,
    ledger_optimized: MemoryLedger,
}

fn cmd_simulate(
    config: &Path,
    seed: u64,
    out: Option<&Path>,
    overrides: &[String],
) -> Result<(), CliError> {
    let run = load_validated(config, overrides)?;
    ensure_out_dir(out)?;
    let perf = simulate_batch(&run);
    let report = SimulateReport {
        seed,
        config: &run,
        perf: &perf,
        counters: comm_comp_counters(&run),
        ledger_unoptimized: memory_ledger(&run, false),
        ledger_optimized: memory_ledger(&run, true),
    };
    let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match out {
        Some(dir) => fs::write(dir.join("simulate_report.json"), &body)?,
        None => print!("{body}"),
    }
    eprintln!(
        "simulated batch: {:.6} s total ({:.6} s inter-layer, {:.6} s reduce+opt)",
        perf.batch_time_s, perf.inter_layer_time_s, perf.reduce_opt_combined_s
    );
    Ok(())
}

const SWEEP_COLUMNS: &str =
    "axis,value,status,error,g_inter,g_data,batch_time_s,inter_layer_time_s,\
allreduce_time_s,optimizer_time_s,reduce_opt_combined_s,warmup_idle_s,collective_calls,\
p2p_bytes_per_worker,flops_per_worker,allreduce_bytes_per_worker,device_model_state_bytes_unopt,\
device_model_state_bytes_opt,activation_units";

fn sweep_point(raw: &RunConfig, axis: Axis, value: usize) -> Result<RunConfig, String> {
    let mut cfg = raw.clone();
    match axis {
        Axis::GInter => {
            let workers = raw.parallel.g_inter * raw.parallel.g_data;
            if value == 0 || workers % value != 0 {
                return Err(format!(
                    "g_inter {value} does not divide worker count {workers}"
                ));
            }
            cfg.parallel.g_inter = value;
            cfg.parallel.g_data = workers / value;
            cfg.parallel.workers = Some(workers);
            cfg.parallel.pipeline_limit = None;
        }
        Axis::K => cfg.parallel.coarsening_k = value,
        Axis::Bsize => cfg.parallel.bucket_size = value,
        Axis::Ac => cfg.parallel.checkpoint_interval = Some(value),
    }
    Ok(cfg)
}

fn sweep_row(axis: Axis, value: usize, run: &ValidatedRun) -> String {
    let perf = simulate_batch(run);
    let counters = comm_comp_counters(run);
    let unopt = memory_ledger(run, false);
    let opt = memory_ledger(run, true);
    format!(
        "{},{},ok,,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        axis,
        value,
        run.g_inter,
        run.g_data,
        perf.batch_time_s,
        perf.inter_layer_time_s,
        perf.allreduce_time_s,
        perf.optimizer_time_s,
        perf.reduce_opt_combined_s,
        perf.warmup_idle_s,
        perf.collective_calls,
        counters.p2p_bytes_per_worker,
        counters.flops_per_worker,
        perf.allreduce_bytes_per_worker,
        unopt.device_model_state_bytes,
        opt.device_model_state_bytes,
        unopt.activation_units,
    )
}

fn cmd_sweep(
    config: &Path,
    axis: Axis,
    values: &[usize],
    seed: u64,
    out: Option<&Path>,
    overrides: &[String],
) -> Result<(), CliError> {
    let raw = load_config(config, overrides)?;
    // The base config must itself be valid before sweeping.
    let base = validated_from_raw(&raw)?;
    ensure_out_dir(out)?;

    let mut lines = vec![
        format!("# seed={seed}"),
        format!(
            "# config={}",
            serde_json::to_string(&base).expect("config serializes")
        ),
        SWEEP_COLUMNS.to_string(),
    ];
    for &value in values {
        let row = match sweep_point(&raw, axis, value).and_then(|cfg| {
            validate(&cfg).map_err(|v| {
                v.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; ")
            })
        }) {
            Ok(run) => sweep_row(axis, value, &run),
            Err(msg) => format!(
                "{},{},error,\"{}\",,,,,,,,,,,,,,,",
                axis,
                value,
                msg.replace('"', "'"),
            ),
        };
        lines.push(row);
    }
    let body = lines.join("\n") + "\n";
    match out {
        Some(dir) => fs::write(dir.join("sweep.csv"), &body)?,
        None => print!("{body}"),
    }
    eprintln!("swept {} over {} points", axis, values.len());
    Ok(())
}

fn ledger_table(ledger: &MemoryLedger, title: &str, out: &mut String) {
    use fmt::Write as _;
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "  {:<16} {:<8} {:>16}",
        "component", "residency", "bytes"
    );
    for row in &ledger.rows {
        let residency = match row.residency {
            pipegrid::analytics::Residency::Device => "device",
            pipegrid::analytics::Residency::Host => "host",
            pipegrid::analytics::Residency::Deleted => "deleted",
        };
        let _ = writeln!(
            out,
            "  {:<16} {:<8} {:>16}",
            row.component, residency, row.bytes
        );
    }
    let _ = writeln!(
        out,
        "  model-state device total: {}",
        ledger.device_model_state_bytes
    );
    let _ = writeln!(
        out,
        "  activation device total:  {}",
        ledger.device_activation_bytes
    );
    let _ = writeln!(
        out,
        "  device total:             {}",
        ledger.device_total_bytes
    );
    let _ = writeln!(out, "  host total:               {}", ledger.host_bytes);
}

fn cmd_memory(config: &Path, seed: u64, out: Option<&Path>, overrides: &[String]) -> Result<(), CliError> {
    let run = load_validated(config, overrides)?;
    ensure_out_dir(out)?;
    let unopt = memory_ledger(&run, false);
    let opt = memory_ledger(&run, true);

    let mut body = String::new();
    {
        use fmt::Write as _;
        let _ = writeln!(body, "per-worker memory ledger ({run})");
        let _ = writeln!(body, "{}", meta_line(seed, &run));
        let _ = writeln!(body, "phi (max per-worker parameters): {}", unopt.phi);
        let _ = writeln!(
            body,
            "activation units: {} (interval {}), unit bytes: {}",
            unopt.activation_units, run.checkpoint_interval, unopt.activation_unit_bytes
        );
        let _ = writeln!(body);
        ledger_table(
            &unopt,
            "without offload optimization (20 phi model state):",
            &mut body,
        );
        let _ = writeln!(body);
        ledger_table(
            &opt,
            "with offload optimization (4 phi + 16 bsize model state):",
            &mut body,
        );
        let _ = writeln!(body);
        let ratio = unopt.device_model_state_bytes as f64 / opt.device_model_state_bytes as f64;
        let _ = writeln!(body, "model-state saving ratio: {ratio:.4}");
        let total_ratio = unopt.device_total_bytes as f64 / opt.device_total_bytes as f64;
        let _ = writeln!(body, "device total saving ratio: {total_ratio:.4}");
    }
    match out {
        Some(dir) => {
            fs::write(dir.join("memory_report.txt"), &body)?;
            // Also echo to stdout for interactive use.
            let mut stdout = std::io::stdout();
            stdout.write_all(body.as_bytes())?;
        }
        None => print!("{body}"),
    }
    Ok(())
}

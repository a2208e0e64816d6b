//! `mlvamp`: synthetic experiments, state evolution and diagnostics for
//! multi-layer VAMP.

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlvamp::engine::run;
use mlvamp::harness::{
    aggregate, compare, monotonicity_violations, read_rows, run_sweep, run_trials, se_rows, sweep_summary, trace_rows, write_rows, write_summary,
    Aggregation, ExperimentConfig, ResultRow,
};
use mlvamp::model::{forward_generate, NetworkSpec, SignalSet};
use mlvamp::state_evolution::{run_se, ExpectationMethod, PerturbationLaw};
use mlvamp::{fixed_point_report, Error, Mode, Result};
use nalgebra::DVector;
use serde_json::json;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mlvamp", version, about = "Multi-layer VAMP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a network and one signal from the recipe.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Run ML-VAMP, either on a given network and measurement or on fresh
    /// synthetic trials, and write the trace CSV.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        given: Given,
        /// Also write the per-cell summary to this path.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Write the state-evolution prediction CSV.
    Se {
        #[command(flatten)]
        common: Common,
        /// Network JSON; drawn from the recipe when absent.
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Vary the measurement count and report the final NMSE per count.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Inversions larger than this many dB are flagged.
        #[arg(long, default_value_t = 0.5)]
        slack_db: f64,
    },
    /// Join empirical and predicted NMSE and report the largest gap.
    Compare {
        /// CSV with empirical values.
        #[arg(long)]
        empirical: PathBuf,
        /// CSV with predicted values; defaults to the empirical file.
        #[arg(long)]
        predicted: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_enum, default_value_t = AggregationArg::Mean)]
        aggregation: AggregationArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run to convergence and print the fixed-point residuals as JSON.
    Fixedpoint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        given: Given,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Measurement count, or a comma separated list for `sweep`.
    #[arg(long, value_delimiter = ',')]
    measurements: Vec<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Output file, or directory for `generate`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    se_method: Option<SeMethodArg>,
    /// Sample count for the Monte Carlo expectation method.
    #[arg(long)]
    se_samples: Option<usize>,
}

#[derive(Args)]
struct Given {
    /// Network JSON.
    #[arg(long, requires = "measurement")]
    network: Option<PathBuf>,
    /// Measurement vector as a JSON array.
    #[arg(long, requires = "network")]
    measurement: Option<PathBuf>,
    /// Signals JSON (`{"z": [[...], ...]}`) used to score the estimates.
    #[arg(long, requires = "network")]
    signals: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Map,
    Mmse,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeMethodArg {
    Quadrature,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Mean,
    Median,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    if let [m] = c.measurements[..] {
        cfg.recipe.measurements = m;
    }
    if let Some(m) = c.mode {
        cfg.engine.mode = match m {
            ModeArg::Map => Mode::Map,
            ModeArg::Mmse => Mode::Mmse,
        };
    }
    if let Some(k) = c.max_iters {
        cfg.engine.max_iters = k;
    }
    let samples = c.se_samples;
    match (c.se_method, &mut cfg.se_method) {
        (Some(SeMethodArg::Quadrature), m) => *m = ExpectationMethod::default(),
        (Some(SeMethodArg::Mc), m) => *m = ExpectationMethod::MonteCarlo { samples: samples.unwrap_or(200_000), seed: cfg.master_seed },
        (None, ExpectationMethod::MonteCarlo { samples: s, .. }) => {
            if let Some(n) = samples {
                *s = n;
            }
        }
        (None, _) if samples.is_some() => return Err(Error::Config("--se-samples needs the mc expectation method".into())),
        _ => {}
    }
    if c.out.is_some() {
        cfg.output = c.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_json_vec(path: &Path) -> Result<DVector<f64>> {
    let v: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(DVector::from_vec(v))
}

fn read_signals(path: &Path) -> Result<SignalSet> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let z: Vec<Vec<f64>> = serde_json::from_value(v["z"].clone())?;
    Ok(SignalSet { z: z.into_iter().map(DVector::from_vec).collect() })
}

fn signals_json(s: &SignalSet) -> serde_json::Value {
    json!({ "z": s.z.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>() })
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    Ok(())
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

/// Network, measurement and (when known) signals of a single instance.
fn instance(cfg: &ExperimentConfig, given: &Given) -> Result<(NetworkSpec, DVector<f64>, Option<SignalSet>)> {
    match (&given.network, &given.measurement) {
        (Some(n), Some(m)) => {
            let spec = NetworkSpec::load(n)?;
            let y = read_json_vec(m)?;
            let sig = given.signals.as_deref().map(read_signals).transpose()?;
            Ok((spec, y, sig))
        }
        _ => {
            let spec = cfg.recipe.build(cfg.master_seed)?;
            let sig = forward_generate(&spec, cfg.master_seed);
            Ok((spec, sig.measurement().clone(), Some(sig)))
        }
    }
}

fn cmd_generate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = c.out.clone().ok_or_else(|| Error::Config("generate needs --out DIR".into()))?;
    std::fs::create_dir_all(&dir)?;
    let spec = cfg.recipe.build(cfg.master_seed)?;
    let sig = forward_generate(&spec, cfg.master_seed);
    spec.save(&dir.join("network.json"))?;
    write_json(&dir.join("signals.json"), &signals_json(&sig))?;
    write_json(&dir.join("measurement.json"), &sig.measurement().as_slice())?;
    Ok(())
}

fn cmd_run(c: &Common, given: &Given, summary: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let rows: Vec<ResultRow> = if given.network.is_some() {
        let (spec, y, sig) = instance(&cfg, given)?;
        let eng = run(&spec, &y, &cfg.engine, sig.as_ref())?;
        let se = if cfg.with_se { Some(run_se(&PerturbationLaw::from_network(&spec), &cfg.se_config())?) } else { None };
        trace_rows(&cfg.id, cfg.master_seed, &eng, se.as_ref(), 2 * cfg.engine.max_iters, 0.0)
    } else {
        let set = run_trials(&cfg)?;
        for f in &set.failures {
            eprintln!("trial {} failed: {}", f.trial_seed, f.error);
        }
        set.rows
    };
    write_rows(&rows, sink(cfg.output.as_deref())?)?;
    if let Some(p) = summary.or(cfg.summary_output.as_deref()) {
        write_summary(&aggregate(&rows), sink(Some(p))?)?;
    }
    Ok(())
}

fn cmd_se(c: &Common, network: Option<&Path>) -> Result<()> {
    let cfg = load_config(c)?;
    let spec = match network {
        Some(p) => NetworkSpec::load(p)?,
        None => cfg.recipe.build(cfg.master_seed)?,
    };
    let se = run_se(&PerturbationLaw::from_network(&spec), &cfg.se_config())?;
    write_rows(&se_rows(&cfg.id, cfg.master_seed, &se, 2 * cfg.engine.max_iters), sink(cfg.output.as_deref())?)
}

fn cmd_sweep(c: &Common, slack_db: f64) -> Result<()> {
    let cfg = load_config(c)?;
    let ms = if c.measurements.is_empty() { vec![10, 50, 100, 200, 300] } else { c.measurements.clone() };
    let set = run_sweep(&cfg, &ms)?;
    if let Some(p) = &cfg.output {
        write_rows(&set.rows, sink(Some(p))?)?;
    }
    if let Some(p) = &cfg.summary_output {
        write_summary(&aggregate(&set.rows), sink(Some(p))?)?;
    }
    let points = sweep_summary(&cfg.id, &set.rows, &ms);
    let flagged = monotonicity_violations(&points, slack_db);
    print_json(&json!({ "points": points, "inversions": flagged, "failures": set.failures }))
}

fn cmd_compare(empirical: &Path, predicted: Option<&Path>, layer: usize, how: AggregationArg, out: Option<&Path>) -> Result<()> {
    let e = read_rows(File::open(empirical)?)?;
    let p = match predicted {
        Some(p) => read_rows(File::open(p)?)?,
        None => e.clone(),
    };
    let how = match how {
        AggregationArg::Mean => Aggregation::Mean,
        AggregationArg::Median => Aggregation::Median,
    };
    let report = compare(&e, &p, layer, how)?;
    match out {
        Some(path) => write_json(path, &report),
        None => print_json(&json!({
            "aggregation": report.aggregation,
            "layer": report.layer,
            "cells": report.cells,
            "max_abs_gap_db": report.max_abs_gap_db,
            "worst": report.worst,
        })),
    }
}

fn cmd_fixedpoint(c: &Common, given: &Given, tol: f64) -> Result<()> {
    let mut cfg = load_config(c)?;
    cfg.engine.convergence_tol = tol;
    if c.max_iters.is_none() {
        cfg.engine.max_iters = cfg.engine.max_iters.max(500);
    }
    let (spec, y, sig) = instance(&cfg, given)?;
    let eng = run(&spec, &y, &cfg.engine, sig.as_ref())?;
    let report = fixed_point_report(&spec, &y, &eng.state, cfg.engine.mode);
    print_json(&json!({
        "converged": eng.converged,
        "iterations": eng.state.iterations,
        "max_residual": report.max_residual(),
        "report": report,
    }))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => cmd_generate(&common),
        Command::Run { common, given, summary } => cmd_run(&common, &given, summary.as_deref()),
        Command::Se { common, network } => cmd_se(&common, network.as_deref()),
        Command::Sweep { common, slack_db } => cmd_sweep(&common, slack_db),
        Command::Compare { empirical, predicted, layer, aggregation, out } => cmd_compare(&empirical, predicted.as_deref(), layer, aggregation, out.as_deref()),
        Command::Fixedpoint { common, given, tol } => cmd_fixedpoint(&common, &given, tol),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

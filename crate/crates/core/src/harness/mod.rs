//! Experiment orchestration: synthetic problems, engine and state evolution
//! side by side, measurement sweeps and result tables.

mod recipe;
mod results;

pub use recipe::{quantile_sorted, Recipe};
pub use results::{aggregate, compare, mean, median, read_rows, read_summary, write_rows, write_summary, Aggregation, CompareReport, GapRow, ResultRow, SummaryRow, SCHEMA_LINE};

use crate::engine::{run, EngineConfig, EngineRun, HalfIterRecord};
use crate::error::{Error, Result};
use crate::model::{forward_generate, Layer, NetworkSpec};
use crate::rng::trial_seed;
use crate::state_evolution::{run_se, ExpectationMethod, PerturbationLaw, SeConfig, SeRun};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

pub const THREADS_ENV: &str = "MLVAMP_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub recipe: Recipe,
    pub engine: EngineConfig,
    pub se_method: ExpectationMethod,
    /// Also evaluate the state evolution of every drawn network.
    pub with_se: bool,
    pub trials: usize,
    pub master_seed: u64,
    /// Record wall-clock time per trial; off by default so that outputs are
    /// reproducible byte for byte.
    pub timing: bool,
    pub output: Option<PathBuf>,
    pub summary_output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "synthetic".into(),
            recipe: Recipe::default(),
            engine: EngineConfig { max_iters: 50, convergence_tol: 0.0, ..EngineConfig::default() },
            se_method: ExpectationMethod::default(),
            with_se: true,
            trials: 50,
            master_seed: 1,
            timing: false,
            output: None,
            summary_output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.engine.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        self.recipe.validate()?;
        self.engine.validate()?;
        self.se_config().validate()
    }

    pub fn se_config(&self) -> SeConfig {
        SeConfig { method: self.se_method, ..SeConfig::from_engine(&self.engine) }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn trial_seeds(&self) -> Vec<u64> {
        (0..self.trials as u64).map(|t| trial_seed(self.master_seed, t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub experiment_id: String,
    pub trial_seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialSet {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<TrialFailure>,
}

/// Worker pool sized by `MLVAMP_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be positive")));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Record of every half-iteration up to `2 * max_iters`; a run that stopped
/// early keeps its last forward and backward records.
fn padded<'a>(records: &'a [HalfIterRecord], half_iters: usize) -> impl Iterator<Item = (usize, &'a HalfIterRecord)> + 'a {
    (0..half_iters).map(move |h| {
        let r = records.get(h).unwrap_or_else(|| {
            let last = records.len() - 1;
            if (last % 2) == (h % 2) {
                &records[last]
            } else {
                &records[last - 1]
            }
        });
        (h, r)
    })
}

/// Rows of one engine run, with the state-evolution prediction when given.
pub fn trace_rows(id: &str, seed: u64, eng: &EngineRun, se: Option<&SeRun>, half_iters: usize, wall_ms: f64) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for (h, rec) in padded(&eng.trace.records, half_iters) {
        let pred = se.and_then(|s| s.at(h));
        for (l, snap) in rec.layers.iter().enumerate() {
            rows.push(ResultRow {
                experiment_id: id.to_string(),
                trial_seed: seed,
                half_iter: h,
                layer: l,
                nmse_db_empirical: snap.nmse_db,
                nmse_db_se: pred.map(|p| p.layers[l].nmse_db),
                gamma_plus: snap.gamma_plus,
                gamma_minus: snap.gamma_minus,
                alpha_plus: snap.alpha_plus,
                alpha_minus: snap.alpha_minus,
                residual_consistency: snap.consistency,
                wall_ms,
            });
        }
    }
    rows
}

/// Prediction-only rows for a network, with the recursion's own parameters.
pub fn se_rows(id: &str, seed: u64, se: &SeRun, half_iters: usize) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for h in 0..half_iters {
        let Some(rec) = se.at(h) else { break };
        for (l, p) in rec.layers.iter().enumerate() {
            rows.push(ResultRow {
                experiment_id: id.to_string(),
                trial_seed: seed,
                half_iter: h,
                layer: l,
                nmse_db_empirical: None,
                nmse_db_se: Some(p.nmse_db),
                gamma_plus: p.gamma_plus,
                gamma_minus: p.gamma_minus,
                alpha_plus: p.alpha_plus,
                alpha_minus: p.alpha_minus,
                residual_consistency: f64::NAN,
                wall_ms: 0.0,
            });
        }
    }
    rows
}

/// Engine (and state evolution) on one network with one signal draw.
pub fn run_instance(id: &str, spec: &NetworkSpec, seed: u64, cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let signals = forward_generate(spec, seed);
    let start = Instant::now();
    let eng = run(spec, signals.measurement(), &cfg.engine, Some(&signals))?;
    let wall_ms = if cfg.timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let se = if cfg.with_se { Some(run_se(&PerturbationLaw::from_network(spec), &cfg.se_config())?) } else { None };
    Ok(trace_rows(id, seed, &eng, se.as_ref(), 2 * cfg.engine.max_iters, wall_ms))
}

fn collect(results: Vec<(String, u64, Result<Vec<ResultRow>>)>) -> Result<TrialSet> {
    let mut set = TrialSet::default();
    for (id, seed, r) in results {
        match r {
            Ok(rows) => set.rows.extend(rows),
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => set.failures.push(TrialFailure { experiment_id: id, trial_seed: seed, error: e.to_string() }),
        }
    }
    if set.rows.is_empty() {
        let first = set.failures.first().map_or_else(String::new, |f| f.error.clone());
        return Err(Error::Diverged { layer: 0, iteration: 0, detail: format!("every trial failed; first failure: {first}") });
    }
    Ok(set)
}

/// Independent trials, each drawing a fresh network and signal. Rows come
/// out in trial order regardless of scheduling.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<TrialSet> {
    cfg.validate()?;
    let seeds = cfg.trial_seeds();
    let pool = thread_pool()?;
    let results: Vec<_> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let r = cfg.recipe.build(seed).and_then(|spec| run_instance(&cfg.id, &spec, seed, cfg));
                (cfg.id.clone(), seed, r)
            })
            .collect()
    });
    collect(results)
}

pub fn sweep_id(id: &str, m: usize) -> String {
    format!("{id}/m={m}")
}

/// Trials over several measurement counts. Each trial draws one prior and
/// one signal and measures it with a separate matrix per count.
pub fn run_sweep(cfg: &ExperimentConfig, measurements: &[usize]) -> Result<TrialSet> {
    cfg.validate()?;
    if measurements.is_empty() {
        return Err(Error::Config("need at least one measurement count".into()));
    }
    for &m in measurements {
        Recipe { measurements: m, ..cfg.recipe.clone() }.validate()?;
    }
    let seeds = cfg.trial_seeds();
    let pool = thread_pool()?;
    let jobs: Vec<(usize, u64)> = measurements.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let priors: Vec<Result<Vec<Layer>>> = pool.install(|| seeds.par_iter().map(|&s| cfg.recipe.build_prior(s)).collect());
    let results: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, seed)| {
                let id = sweep_id(&cfg.id, m);
                let t = seeds.iter().position(|&s| s == seed).expect("seed from list");
                let recipe = Recipe { measurements: m, ..cfg.recipe.clone() };
                let r = match &priors[t] {
                    Ok(prior) => recipe.attach_measurement(prior, seed).and_then(|spec| run_instance(&id, &spec, seed, cfg)),
                    Err(e) => Err(Error::NumericFailure(format!("prior construction failed: {e}"))),
                };
                (id, seed, r)
            })
            .collect()
    });
    collect(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub measurements: usize,
    pub half_iter: usize,
    pub trials: usize,
    pub mean_nmse_db_empirical: Option<f64>,
    pub median_nmse_db_empirical: Option<f64>,
    pub mean_nmse_db_se: Option<f64>,
    pub median_nmse_db_se: Option<f64>,
}

/// Final-iteration NMSE of the network input for every measurement count.
pub fn sweep_summary(id: &str, rows: &[ResultRow], measurements: &[usize]) -> Vec<SweepPoint> {
    let summary = aggregate(rows);
    measurements
        .iter()
        .filter_map(|&m| {
            let sid = sweep_id(id, m);
            summary.iter().filter(|s| s.experiment_id == sid && s.layer == 0).max_by_key(|s| s.half_iter).map(|s| SweepPoint {
                measurements: m,
                half_iter: s.half_iter,
                trials: s.trials,
                mean_nmse_db_empirical: s.mean_nmse_db_empirical,
                median_nmse_db_empirical: s.median_nmse_db_empirical,
                mean_nmse_db_se: s.mean_nmse_db_se,
                median_nmse_db_se: s.median_nmse_db_se,
            })
        })
        .collect()
}

/// Measurement counts at which the median NMSE rises by more than `slack`
/// dB over the previous count.
pub fn monotonicity_violations(points: &[SweepPoint], slack: f64) -> Vec<usize> {
    points
        .windows(2)
        .filter_map(|w| match (w[0].median_nmse_db_empirical, w[1].median_nmse_db_empirical) {
            (Some(a), Some(b)) if b > a + slack => Some(w[1].measurements),
            _ => None,
        })
        .collect()
}

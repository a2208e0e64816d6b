//! Tidy result tables and their aggregation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

pub const SCHEMA_LINE: &str = "# schema_version=1";

/// One row per trial, half-iteration and signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub trial_seed: u64,
    pub half_iter: usize,
    pub layer: usize,
    pub nmse_db_empirical: Option<f64>,
    pub nmse_db_se: Option<f64>,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    pub residual_consistency: f64,
    pub wall_ms: f64,
}

/// Trial statistics of one `(experiment, half-iteration, signal)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment_id: String,
    pub half_iter: usize,
    pub layer: usize,
    pub trials: usize,
    pub mean_nmse_db_empirical: Option<f64>,
    pub median_nmse_db_empirical: Option<f64>,
    pub mean_nmse_db_se: Option<f64>,
    pub median_nmse_db_se: Option<f64>,
    pub mean_gamma_plus: f64,
    pub mean_gamma_minus: f64,
    pub mean_alpha_plus: f64,
    pub mean_alpha_minus: f64,
}

fn write_csv<T: Serialize, W: Write>(rows: &[T], mut out: W) -> Result<()> {
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;
    if first.trim_end() != SCHEMA_LINE {
        return Err(Error::Config(format!("unsupported result file: expected `{SCHEMA_LINE}`, found `{}`", first.trim_end())));
    }
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_rows<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    write_csv(rows, out)
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    read_csv(input)
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    write_csv(rows, out)
}

pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    read_csv(input)
}

/// Mean of values summed in sorted order, so the result does not depend on
/// the order of the trials.
pub fn mean(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum::<f64>() / s.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn opt_stats(v: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    if vals.is_empty() {
        (None, None)
    } else {
        (Some(mean(&vals)), Some(median(&vals)))
    }
}

/// Mean and median over trials of every cell, ordered by experiment,
/// half-iteration and signal.
pub fn aggregate(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(&str, usize, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.experiment_id.as_str(), r.half_iter, r.layer)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((id, h, l), rs)| {
            let col = |f: fn(&ResultRow) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (me, de) = opt_stats(&rs.iter().map(|r| r.nmse_db_empirical).collect::<Vec<_>>());
            let (ms, ds) = opt_stats(&rs.iter().map(|r| r.nmse_db_se).collect::<Vec<_>>());
            SummaryRow {
                experiment_id: id.to_string(),
                half_iter: h,
                layer: l,
                trials: rs.len(),
                mean_nmse_db_empirical: me,
                median_nmse_db_empirical: de,
                mean_nmse_db_se: ms,
                median_nmse_db_se: ds,
                mean_gamma_plus: col(|r| r.gamma_plus),
                mean_gamma_minus: col(|r| r.gamma_minus),
                mean_alpha_plus: col(|r| r.alpha_plus),
                mean_alpha_minus: col(|r| r.alpha_minus),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub experiment_id: String,
    pub half_iter: usize,
    pub layer: usize,
    pub empirical_db: f64,
    pub se_db: f64,
    pub gap_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub aggregation: Aggregation,
    pub layer: usize,
    pub cells: usize,
    pub max_abs_gap_db: f64,
    pub worst: Option<GapRow>,
    pub gaps: Vec<GapRow>,
}

/// Join empirical and predicted NMSE of one signal cell by cell. Cells
/// present on only one side are an error.
pub fn compare(empirical: &[ResultRow], predicted: &[ResultRow], layer: usize, how: Aggregation) -> Result<CompareReport> {
    let pick = |s: &SummaryRow, emp: bool| match (emp, how) {
        (true, Aggregation::Mean) => s.mean_nmse_db_empirical,
        (true, Aggregation::Median) => s.median_nmse_db_empirical,
        (false, Aggregation::Mean) => s.mean_nmse_db_se,
        (false, Aggregation::Median) => s.median_nmse_db_se,
    };
    let side = |rows: &[ResultRow], emp: bool| -> Result<BTreeMap<(String, usize), f64>> {
        let mut m = BTreeMap::new();
        for s in aggregate(rows).into_iter().filter(|s| s.layer == layer) {
            let v = pick(&s, emp).ok_or_else(|| {
                Error::Config(format!("cell ({}, half {}, layer {}) has no {} value", s.experiment_id, s.half_iter, s.layer, if emp { "empirical" } else { "predicted" }))
            })?;
            m.insert((s.experiment_id.clone(), s.half_iter), v);
        }
        Ok(m)
    };
    let e = side(empirical, true)?;
    let p = side(predicted, false)?;
    if e.is_empty() {
        return Err(Error::Config(format!("no rows for layer {layer}")));
    }
    if let Some(k) = e.keys().find(|k| !p.contains_key(*k)).or_else(|| p.keys().find(|k| !e.contains_key(*k))) {
        return Err(Error::Config(format!("grids differ: cell ({}, half {}) is missing on one side", k.0, k.1)));
    }
    let gaps: Vec<GapRow> = e
        .iter()
        .map(|((id, h), ev)| {
            let sv = p[&(id.clone(), *h)];
            GapRow { experiment_id: id.clone(), half_iter: *h, layer, empirical_db: *ev, se_db: sv, gap_db: ev - sv }
        })
        .collect();
    let worst = gaps.iter().max_by(|a, b| a.gap_db.abs().total_cmp(&b.gap_db.abs())).cloned();
    Ok(CompareReport { aggregation: how, layer, cells: gaps.len(), max_abs_gap_db: worst.as_ref().map_or(0.0, |w| w.gap_db.abs()), worst, gaps })
}

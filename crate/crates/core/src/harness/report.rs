//! Multi-seed aggregation of curve CSVs into median / interquartile tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{csv_err, CurveRow};
use crate::error::{Error, Result};

/// A run counts as having learned the concept once its concept score falls
/// to this fraction of the pre-tuning score.
pub const CONCEPT_THRESHOLD: f64 = 0.5;

/// Median and quartiles (linear interpolation between order statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("statistic input"));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in statistic input".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// `p`-quantile of sorted data. Infinite entries are allowed; interpolating
/// between two equal infinities yields that infinity.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    if lo == hi || w == 0.0 || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + w * (sorted[hi] - sorted[lo])
    }
}

/// Per-seed numbers extracted from one curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub c0: f64,
    pub q0: f64,
    pub concept_final: f64,
    pub quality_final: f64,
    pub retained_final: f64,
    /// First evaluated iteration with `concept <= CONCEPT_THRESHOLD * c0`;
    /// infinite if never reached.
    pub iters_to_threshold: f64,
}

impl RunSummary {
    pub fn from_curve(rows: &[&CurveRow]) -> Result<Self> {
        let first = rows
            .iter()
            .find(|r| r.iter == 0)
            .ok_or(Error::Empty("pre-tuning row"))?;
        let last = rows.iter().max_by_key(|r| r.iter).ok_or(Error::Empty("curve"))?;
        let threshold = CONCEPT_THRESHOLD * first.concept_score;
        let hit = rows
            .iter()
            .filter(|r| r.iter > 0 && r.concept_score <= threshold)
            .map(|r| r.iter)
            .min();
        Ok(Self {
            seed: first.seed,
            c0: first.concept_score,
            q0: first.quality_proxy,
            concept_final: last.concept_score,
            quality_final: last.quality_proxy,
            retained_final: last.energy_retained,
            iters_to_threshold: hit.map_or(f64::INFINITY, |i| i as f64),
        })
    }

    /// Fraction of the pre-tuning concept score removed by tuning.
    pub fn concept_reduction(&self) -> f64 {
        1.0 - self.concept_final / self.c0
    }

    pub fn quality_increase(&self) -> f64 {
        self.quality_final - self.q0
    }

    pub fn quality_ratio(&self) -> f64 {
        self.quality_final / self.q0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: Vec<RunSummary>,
    pub c0: Stat,
    pub q0: Stat,
    pub concept_final: Stat,
    pub concept_reduction: Stat,
    pub quality_final: Stat,
    pub quality_increase: Stat,
    pub quality_ratio: Stat,
    pub retained_final: Stat,
    pub iters_to_threshold: Stat,
}

impl MethodSummary {
    fn new(method: String, runs: Vec<RunSummary>) -> Result<Self> {
        let stat = |f: fn(&RunSummary) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            c0: stat(|r| r.c0)?,
            q0: stat(|r| r.q0)?,
            concept_final: stat(|r| r.concept_final)?,
            concept_reduction: stat(|r| r.concept_reduction())?,
            quality_final: stat(|r| r.quality_final)?,
            quality_increase: stat(|r| r.quality_increase())?,
            quality_ratio: stat(|r| r.quality_ratio())?,
            retained_final: stat(|r| r.retained_final)?,
            iters_to_threshold: stat(|r| r.iters_to_threshold)?,
            method,
            runs,
        })
    }
}

/// Groups rows by method and seed and aggregates each method over seeds.
/// Methods appear in order of first occurrence.
pub fn summarize(rows: &[CurveRow]) -> Result<Vec<MethodSummary>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(&str, u64), Vec<&CurveRow>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
        groups.entry((&r.method, r.seed)).or_default().push(r);
    }
    order
        .into_iter()
        .map(|m| {
            let runs = groups
                .iter()
                .filter(|((method, _), _)| *method == m)
                .map(|(_, curve)| RunSummary::from_curve(curve))
                .collect::<Result<Vec<_>>>()?;
            MethodSummary::new(m.to_string(), runs)
        })
        .collect()
}

pub fn find<'a>(summaries: &'a [MethodSummary], method: &str) -> Option<&'a MethodSummary> {
    summaries.iter().find(|s| s.method == method)
}

fn cell(s: &Stat) -> String {
    format!("{:.4} [{:.4}, {:.4}]", s.median, s.q1, s.q3)
}

/// Plain-text table: one line per method, `median [q1, q3]` per column.
pub fn render_table(summaries: &[MethodSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:>5}  {:<32} {:<32} {:<32} {:<32}",
        "method", "seeds", "concept reduction", "quality increase", "quality ratio", "iters to threshold"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<20} {:>5}  {:<32} {:<32} {:<32} {:<32}",
            s.method,
            s.runs.len(),
            cell(&s.concept_reduction),
            cell(&s.quality_increase),
            cell(&s.quality_ratio),
            cell(&s.iters_to_threshold)
        );
    }
    out
}

#[derive(Serialize)]
struct ReportRow<'a> {
    method: &'a str,
    metric: &'a str,
    seeds: usize,
    median: f64,
    q1: f64,
    q3: f64,
}

/// Long-format CSV: `method, metric, seeds, median, q1, q3`.
pub fn write_report_csv(path: &Path, summaries: &[MethodSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for s in summaries {
        for (metric, stat) in [
            ("c0", &s.c0),
            ("q0", &s.q0),
            ("concept_final", &s.concept_final),
            ("concept_reduction", &s.concept_reduction),
            ("quality_final", &s.quality_final),
            ("quality_increase", &s.quality_increase),
            ("quality_ratio", &s.quality_ratio),
            ("energy_retained_final", &s.retained_final),
            ("iters_to_threshold", &s.iters_to_threshold),
        ] {
            w.serialize(ReportRow {
                method: &s.method,
                metric,
                seeds: s.runs.len(),
                median: stat.median,
                q1: stat.q1,
                q3: stat.q3,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

//! Experiment records, sweep tables and derived report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::ScaleMethod;
use crate::error::{PtqError, Result};
use crate::graph::{QuantPlan, ResidualMode, WeightGranularity};
use crate::metrics::{acc_diff, pareto_front, pearson};

/// Everything measured for one model configuration. A float model has no plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub plan: Option<QuantPlan>,
    pub samples: usize,
    pub top1: f64,
    pub agreement_with_float: f64,
    /// Per weight tensor.
    pub weight_mse: BTreeMap<String, f64>,
    pub weight_mse_mean: f64,
    /// Per activation Quant site.
    pub activation_mse: BTreeMap<String, f64>,
    pub activation_mse_mean: f64,
    /// Activation values saturated at the top of their range.
    pub activation_clamps: u64,
    pub macs: u64,
    pub footprint_bytes: f64,
    pub energy_joules: f64,
}

impl ExperimentRecord {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Mean of a map's values; 0 for an empty map.
pub fn map_mean(m: &BTreeMap<String, f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.values().sum::<f64>() / m.len() as f64
    }
}

// ── sweep table ─────────────────────────────────────────────────────────────

/// One sweep row. Field order is the CSV column order. Metric columns are
/// empty and `error` is set when the configuration failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub wl_w: u8,
    pub wl_a: u8,
    pub wsm: String,
    pub asm: String,
    pub weight_group: String,
    pub residual: String,
    pub top1: Option<f64>,
    pub agreement: Option<f64>,
    pub weight_mse: Option<f64>,
    pub activation_mse: Option<f64>,
    pub activation_clamps: Option<u64>,
    pub footprint_bytes: Option<f64>,
    pub energy_joules: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn from_outcome(plan: &QuantPlan, outcome: &Result<ExperimentRecord>) -> Self {
        let rec = outcome.as_ref().ok();
        SweepRow {
            wl_w: plan.wl_w,
            wl_a: plan.wl_a,
            wsm: plan.wsm.to_string(),
            asm: plan.asm.to_string(),
            weight_group: plan.weight_group.name().into(),
            residual: plan.residual.name().into(),
            top1: rec.map(|r| r.top1),
            agreement: rec.map(|r| r.agreement_with_float),
            weight_mse: rec.map(|r| r.weight_mse_mean),
            activation_mse: rec.map(|r| r.activation_mse_mean),
            activation_clamps: rec.map(|r| r.activation_clamps),
            footprint_bytes: rec.map(|r| r.footprint_bytes),
            energy_joules: rec.map(|r| r.energy_joules),
            error: outcome.as_ref().err().map(|e| format!("{}: {e}", e.kind())),
        }
    }

    pub fn plan(&self) -> Result<QuantPlan> {
        Ok(QuantPlan {
            wl_w: self.wl_w,
            wl_a: self.wl_a,
            wsm: self.wsm.parse()?,
            asm: self.asm.parse()?,
            weight_group: self.weight_group.parse()?,
            residual: self.residual.parse()?,
        })
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none() && self.top1.is_some()
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

// ── the 16-setting grid ─────────────────────────────────────────────────────

/// Which configurations a sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Word-lengths 4..=8 for weights and activations × 16 settings.
    Full,
    /// Equal word-lengths 6..=8 × 16 settings.
    Equal6To8,
    /// Equal word-lengths 6..=8 × every compatible WSM/ASM pair.
    Options,
}

impl std::str::FromStr for Grid {
    type Err = PtqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Grid::Full),
            "equal-6-8" => Ok(Grid::Equal6To8),
            "options" => Ok(Grid::Options),
            _ => Err(PtqError::InvalidArgument(format!(
                "grid {s:?} (expected full, equal-6-8 or options)"
            ))),
        }
    }
}

/// Plans of a grid in canonical order. `k` is the AbsP percentile.
pub fn grid_plans(grid: Grid, k: f64) -> Vec<QuantPlan> {
    let absp = ScaleMethod::AbsP { k };
    let stat = [ScaleMethod::AbsMax, absp];
    let (wls, equal, wsms, asms): (Vec<u8>, bool, Vec<ScaleMethod>, Vec<ScaleMethod>) = match grid {
        Grid::Full => ((4..=8).collect(), false, stat.to_vec(), stat.to_vec()),
        Grid::Equal6To8 => ((6..=8).collect(), true, stat.to_vec(), stat.to_vec()),
        Grid::Options => (
            (6..=8).collect(),
            true,
            vec![ScaleMethod::AbsMax, absp, ScaleMethod::Lsq, ScaleMethod::LsqPlus],
            vec![ScaleMethod::AbsMax, absp, ScaleMethod::Lsq, ScaleMethod::BatchQuant],
        ),
    };
    let mut plans = Vec::new();
    for &wl_w in &wls {
        for &wl_a in &wls {
            if equal && wl_w != wl_a {
                continue;
            }
            for &wsm in &wsms {
                for &asm in &asms {
                    for weight_group in [WeightGranularity::Channel, WeightGranularity::Layer] {
                        for residual in [ResidualMode::FpRes, ResidualMode::QRes] {
                            plans.push(QuantPlan {
                                wl_w,
                                wl_a,
                                wsm,
                                asm,
                                weight_group,
                                residual,
                            });
                        }
                    }
                }
            }
        }
    }
    plans.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    plans
}

// ── summaries ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: usize,
    pub failed_rows: Vec<usize>,
    /// Row indices on the footprint / energy Pareto fronts.
    pub pareto_footprint: Vec<usize>,
    pub pareto_energy: Vec<usize>,
    /// `None` when undefined (e.g. a constant column).
    pub pearson_top1_vs_weight_mse: Option<f64>,
    pub pearson_top1_vs_activation_mse: Option<f64>,
}

fn ok_rows(rows: &[SweepRow]) -> Vec<usize> {
    (0..rows.len()).filter(|&i| rows[i].is_ok()).collect()
}

fn front(rows: &[SweepRow], ok: &[usize], cost: impl Fn(&SweepRow) -> f64) -> Vec<usize> {
    let pts: Vec<(f64, f64)> = ok
        .iter()
        .map(|&i| (cost(&rows[i]), rows[i].top1.unwrap()))
        .collect();
    pareto_front(&pts).into_iter().map(|j| ok[j]).collect()
}

pub fn summarize(rows: &[SweepRow]) -> Result<SweepSummary> {
    if rows.is_empty() {
        return Err(PtqError::EmptyInput);
    }
    let ok = ok_rows(rows);
    let col = |f: &dyn Fn(&SweepRow) -> Option<f64>| -> Vec<f64> {
        ok.iter().map(|&i| f(&rows[i]).unwrap_or(f64::NAN)).collect()
    };
    let top1 = col(&|r| r.top1);
    Ok(SweepSummary {
        rows: rows.len(),
        failed_rows: (0..rows.len()).filter(|i| !ok.contains(i)).collect(),
        pareto_footprint: front(rows, &ok, |r| r.footprint_bytes.unwrap_or(f64::INFINITY)),
        pareto_energy: front(rows, &ok, |r| r.energy_joules.unwrap_or(f64::INFINITY)),
        pearson_top1_vs_weight_mse: pearson(&top1, &col(&|r| r.weight_mse)),
        pearson_top1_vs_activation_mse: pearson(&top1, &col(&|r| r.activation_mse)),
    })
}

/// Writes `sweep.csv`, `summary.json`, `scatter.csv` (accuracy vs MSE per
/// row) and `grid.csv` (accuracy per word-length pair) into `dir`.
pub fn emit_sweep_report(rows: &[SweepRow], dir: &Path) -> Result<SweepSummary> {
    let summary = summarize(rows)?;
    fs::create_dir_all(dir)?;
    write_sweep_csv(&dir.join("sweep.csv"), rows)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    let mut scatter = csv::Writer::from_path(dir.join("scatter.csv"))?;
    scatter.write_record(["row", "top1", "weight_mse", "activation_mse"])?;
    for i in ok_rows(rows) {
        let r = &rows[i];
        scatter.serialize((i, r.top1, r.weight_mse, r.activation_mse))?;
    }
    scatter.flush()?;

    let mut cells: BTreeMap<(u8, u8), Vec<f64>> = BTreeMap::new();
    for i in ok_rows(rows) {
        cells
            .entry((rows[i].wl_w, rows[i].wl_a))
            .or_default()
            .push(rows[i].top1.unwrap());
    }
    let mut grid = csv::Writer::from_path(dir.join("grid.csv"))?;
    grid.write_record(["wl_w", "wl_a", "count", "top1_mean", "top1_min", "top1_max"])?;
    for ((w, a), accs) in &cells {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        grid.serialize((w, a, accs.len(), mean, min, max))?;
    }
    grid.flush()?;
    Ok(summary)
}

// ── acc_diff report ─────────────────────────────────────────────────────────

/// Criteria by which acc_diff values are grouped.
pub const CRITERIA: [&str; 4] = ["wsm", "asm", "weight_group", "residual"];
/// Histogram bin width in accuracy units (one percentage point).
pub const HIST_BIN: f64 = 0.01;

fn criterion_value<'a>(r: &'a SweepRow, criterion: &str) -> &'a str {
    match criterion {
        "wsm" => &r.wsm,
        "asm" => &r.asm,
        "weight_group" => &r.weight_group,
        _ => &r.residual,
    }
}

/// acc_diff of every successful row, grouped by word-length pair.
pub fn row_acc_diffs(rows: &[SweepRow]) -> Result<Vec<(usize, f64)>> {
    let ok = ok_rows(rows);
    let recs: Vec<((u8, u8), f64)> = ok
        .iter()
        .map(|&i| ((rows[i].wl_w, rows[i].wl_a), rows[i].top1.unwrap()))
        .collect();
    Ok(ok.into_iter().zip(acc_diff(&recs)?).collect())
}

/// `(criterion, value, bin_lower_edge, count)`: every successful row lands in
/// exactly one bin per criterion.
pub fn acc_diff_histogram(diffs: &[(usize, f64)], rows: &[SweepRow]) -> Vec<(String, String, f64, usize)> {
    let mut bins: BTreeMap<(&str, &str, i64), usize> = BTreeMap::new();
    for criterion in CRITERIA {
        for &(i, d) in diffs {
            // Round before flooring so values on a bin edge are stable.
            let b = ((d / HIST_BIN * 1e9).round() / 1e9).floor() as i64;
            *bins.entry((criterion, criterion_value(&rows[i], criterion), b)).or_default() += 1;
        }
    }
    bins.into_iter()
        .map(|((c, v, b), n)| (c.to_string(), v.to_string(), b as f64 * HIST_BIN, n))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub row: usize,
    pub plan: String,
    pub cost: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: usize,
    pub pareto_footprint: Vec<ParetoPoint>,
    pub pareto_energy: Vec<ParetoPoint>,
    pub pearson_top1_vs_weight_mse: Option<f64>,
    pub pearson_top1_vs_activation_mse: Option<f64>,
    /// Largest |sum of acc_diff| over word-length groups; zero up to rounding.
    pub acc_diff_max_group_sum: f64,
}

/// Pareto fronts, acc_diff values and per-criterion histograms from a sweep
/// table. Writes `report.json`, `acc_diff.csv` and `acc_diff_hist.csv`.
pub fn emit_report(rows: &[SweepRow], dir: &Path) -> Result<Report> {
    let summary = summarize(rows)?;
    if summary.failed_rows.len() == rows.len() {
        return Err(PtqError::Degenerate("every sweep row failed".into()));
    }
    let point = |i: usize, cost: f64| -> Result<ParetoPoint> {
        Ok(ParetoPoint {
            row: i,
            plan: rows[i].plan()?.to_string(),
            cost,
            top1: rows[i].top1.unwrap(),
        })
    };
    let pareto_footprint = summary
        .pareto_footprint
        .iter()
        .map(|&i| point(i, rows[i].footprint_bytes.unwrap()))
        .collect::<Result<_>>()?;
    let pareto_energy = summary
        .pareto_energy
        .iter()
        .map(|&i| point(i, rows[i].energy_joules.unwrap()))
        .collect::<Result<_>>()?;
    let diffs = row_acc_diffs(rows)?;
    let mut group_sums: BTreeMap<(u8, u8), f64> = BTreeMap::new();
    for &(i, d) in &diffs {
        *group_sums.entry((rows[i].wl_w, rows[i].wl_a)).or_default() += d;
    }
    let report = Report {
        rows: rows.len(),
        pareto_footprint,
        pareto_energy,
        pearson_top1_vs_weight_mse: summary.pearson_top1_vs_weight_mse,
        pearson_top1_vs_activation_mse: summary.pearson_top1_vs_activation_mse,
        acc_diff_max_group_sum: group_sums.values().fold(0.0, |m, s| m.max(s.abs())),
    };

    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut w = csv::Writer::from_path(dir.join("acc_diff.csv"))?;
    w.write_record(["row", "wl_w", "wl_a", "wsm", "asm", "weight_group", "residual", "top1", "acc_diff"])?;
    for &(i, d) in &diffs {
        let r = &rows[i];
        w.serialize((i, r.wl_w, r.wl_a, &r.wsm, &r.asm, &r.weight_group, &r.residual, r.top1, d))?;
    }
    w.flush()?;
    let mut h = csv::Writer::from_path(dir.join("acc_diff_hist.csv"))?;
    h.write_record(["criterion", "value", "bin_start", "count"])?;
    for rec in acc_diff_histogram(&diffs, rows) {
        h.serialize(rec)?;
    }
    h.flush()?;
    Ok(report)
}

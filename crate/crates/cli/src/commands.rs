//! One function per subcommand. Each returns a JSON summary for stdout.

use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::{json, Value};

use ptq_core::calibration::{ScaleMethod, Target, DEFAULT_PERCENTILE};
use ptq_core::dataset::read_dataset;
use ptq_core::engine::Engine;
use ptq_core::fixtures::{write_fixture, FixturePaths, FixtureSpec};
use ptq_core::graph::{QuantPlan, ResidualMode, WeightGranularity};
use ptq_core::manifest::{load_model, save_model};
use ptq_core::metrics::EnergyModel;
use ptq_core::pipeline::{calibrate, evaluate, quantize_model, sweep, CalibrationConfig, DEFAULT_CALIB_SAMPLES};
use ptq_core::profile::CalibrationProfile;
use ptq_core::report::{emit_report, emit_sweep_report, grid_plans, read_sweep_csv, Grid, SweepRow};
use ptq_core::{PtqError, Result};

// ── shared flag groups ──────────────────────────────────────────────────────

/// Parses a scale method; a bare `absp` takes the `--percentile-k` value.
fn parse_method(s: &str, k: f64, target: Target) -> Result<ScaleMethod> {
    let mut m: ScaleMethod = s.parse()?;
    if let ScaleMethod::AbsP { k: mk } = &mut m {
        if !s.contains(':') {
            *mk = k;
        }
    }
    m.check_target(target)?;
    Ok(m)
}

#[derive(Args, Debug, Clone)]
pub struct PercentileArgs {
    /// AbsP percentile used wherever `absp` is given without `:k`.
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    pub percentile_k: f64,
}

#[derive(Args, Debug, Clone)]
pub struct PlanArgs {
    /// Weight word-length in bits.
    #[arg(long, default_value_t = 8)]
    pub wl_w: u8,
    /// Activation word-length in bits.
    #[arg(long, default_value_t = 8)]
    pub wl_a: u8,
    /// Weight scale method: absmax, absp[:k], lsq, lsqplus.
    #[arg(long, default_value = "absp")]
    pub wsm: String,
    /// Activation scale method: absmax, absp[:k], lsq, batchquant.
    #[arg(long, default_value = "absp")]
    pub asm: String,
    /// Weight statistics granularity: channel or layer.
    #[arg(long, default_value = "channel")]
    pub weight_group: String,
    /// Residual sums: fpres (float) or qres (quantized).
    #[arg(long, default_value = "fpres")]
    pub residual: String,
    #[command(flatten)]
    pub percentile: PercentileArgs,
}

impl PlanArgs {
    pub fn plan(&self) -> Result<QuantPlan> {
        let k = self.percentile.percentile_k;
        let plan = QuantPlan {
            wl_w: self.wl_w,
            wl_a: self.wl_a,
            wsm: parse_method(&self.wsm, k, Target::Weight)?,
            asm: parse_method(&self.asm, k, Target::Activation)?,
            weight_group: self.weight_group.parse::<WeightGranularity>()?,
            residual: self.residual.parse::<ResidualMode>()?,
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Args, Debug, Clone)]
pub struct CalibArgs {
    /// Number of dataset samples used for calibration.
    #[arg(long, default_value_t = DEFAULT_CALIB_SAMPLES)]
    pub calib_samples: usize,
    /// Seed of the calibration sample (and reservoirs).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl CalibArgs {
    fn config(&self, percentiles: Vec<f64>) -> CalibrationConfig {
        CalibrationConfig {
            samples: self.calib_samples,
            seed: self.seed,
            percentiles,
            ..CalibrationConfig::default()
        }
    }
}

fn energy_model(path: &Option<PathBuf>) -> Result<EnergyModel> {
    match path {
        Some(p) => EnergyModel::load(p),
        None => Ok(EnergyModel::default()),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

// ── fixtures ────────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct FixturesArgs {
    /// Output directory for model, dataset and golden files.
    #[arg(long, default_value = "fixtures")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input size as CxHxW.
    #[arg(long, default_value = "3x16x16")]
    pub input: String,
    /// Residual blocks, 1..=4.
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    /// Comma-separated block widths; defaults to 8, 16, 32, ... per block.
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 1000)]
    pub dataset_size: usize,
    /// Add 1% ×10 outliers to every weight tensor.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub heavy_tail: bool,
}

fn parse_list(s: &str, sep: char, what: &str) -> Result<Vec<usize>> {
    s.split(sep)
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| PtqError::InvalidArgument(format!("{what} {s:?}")))
        })
        .collect()
}

pub fn cmd_fixtures(a: &FixturesArgs) -> Result<Value> {
    let dims = parse_list(&a.input, 'x', "input size")?;
    let [c, h, w] = dims[..] else {
        return Err(PtqError::InvalidArgument(format!("input size {:?} (expected CxHxW)", a.input)));
    };
    let widths = match &a.widths {
        Some(s) => parse_list(s, ',', "widths")?,
        None => (0..a.blocks).map(|i| 8 << i).collect(),
    };
    let spec = FixtureSpec {
        seed: a.seed,
        input: (c, h, w),
        blocks: a.blocks,
        widths,
        classes: a.classes,
        dataset_size: a.dataset_size,
        heavy_tail: a.heavy_tail,
    };
    std::fs::create_dir_all(&a.out)?;
    let paths = FixturePaths::in_dir(&a.out);
    write_fixture(&spec, &paths)?;
    Ok(json!({
        "model": path_str(&paths.model),
        "dataset": path_str(&paths.dataset),
        "golden": path_str(&paths.golden),
    }))
}

// ── calibrate ───────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub calib: CalibArgs,
    /// Activation scale method whose scales are recorded in the profile.
    #[arg(long, default_value = "absp")]
    pub asm: String,
    /// Activation word-length of the recorded scales.
    #[arg(long, default_value_t = 8)]
    pub wl_a: u8,
    #[command(flatten)]
    pub percentile: PercentileArgs,
    /// Profile file to write.
    #[arg(long, default_value = "profile.ptqp")]
    pub out: PathBuf,
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> Result<Value> {
    let k = a.percentile.percentile_k;
    let asm = parse_method(&a.asm, k, Target::Activation)?;
    let mut percentiles = vec![k];
    if let ScaleMethod::AbsP { k: mk } = asm {
        if mk != k {
            percentiles.push(mk);
        }
    }
    let model = load_model(&a.model)?;
    let data = read_dataset(&a.dataset)?;
    let mut profile = calibrate(&model, &data.inputs, &a.calib.config(percentiles))?;
    profile.record_scales(asm, a.wl_a)?;
    profile.save(&a.out)?;
    Ok(json!({
        "profile": path_str(&a.out),
        "sites": profile.sites.len(),
        "samples": profile.samples,
    }))
}

// ── quantize ────────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Quantized model file to write.
    #[arg(long, default_value = "quantized.ptqm")]
    pub out: PathBuf,
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<Value> {
    let plan = a.plan.plan()?;
    let model = load_model(&a.model)?;
    let profile = CalibrationProfile::load(&a.profile)?;
    let q = quantize_model(&model, &profile, &plan)?;
    save_model(&q, &a.out)?;
    Ok(json!({
        "model": path_str(&a.out),
        "plan": plan.to_string(),
        "quant_nodes": q.count_kind("quant"),
    }))
}

// ── eval ────────────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Float or already-quantized model.
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Quantize the float model with this profile and the plan flags first.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub plan: PlanArgs,
    /// JSON energy table; defaults to the built-in one.
    #[arg(long)]
    pub energy_model: Option<PathBuf>,
    /// Also write the record here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let energy = energy_model(&a.energy_model)?;
    let model = load_model(&a.model)?;
    let data = read_dataset(&a.dataset)?;
    let record = match &a.profile {
        Some(p) => {
            // Same reference as a sweep: logits of the unfolded float model.
            let profile = CalibrationProfile::load(p)?;
            let q = quantize_model(&model, &profile, &a.plan.plan()?)?;
            let float_logits = Engine::new(&model)?.run_dataset(&data.inputs, false)?.0;
            evaluate(&q, &data, &energy, Some(&float_logits))?
        }
        None => evaluate(&model, &data, &energy, None)?,
    };
    if let Some(out) = &a.out {
        record.save_json(out)?;
    }
    Ok(serde_json::to_value(&record)?)
}

// ── sweep ───────────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Calibration profile; calibrated on the dataset when absent.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub calib: CalibArgs,
    /// full (400 rows), equal-6-8 (48 rows) or options (all methods, 6–8 bits).
    #[arg(long, default_value = "full")]
    pub grid: String,
    #[command(flatten)]
    pub percentile: PercentileArgs,
    #[arg(long)]
    pub energy_model: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

/// Runs the grid. Row failures do not stop the sweep; they are returned
/// alongside the summary so the caller can report them.
pub fn cmd_sweep(a: &SweepArgs) -> Result<(Value, Vec<(usize, SweepRow)>)> {
    let grid: Grid = a.grid.parse()?;
    let energy = energy_model(&a.energy_model)?;
    let model = load_model(&a.model)?;
    let data = read_dataset(&a.dataset)?;
    let k = a.percentile.percentile_k;
    let profile = match &a.profile {
        Some(p) => CalibrationProfile::load(p)?,
        None => calibrate(&model, &data.inputs, &a.calib.config(vec![k]))?,
    };
    let rows = sweep(&model, &data, &profile, &grid_plans(grid, k), &energy)?;
    let summary = emit_sweep_report(&rows, &a.out)?;
    let failed = summary
        .failed_rows
        .iter()
        .map(|&i| (i, rows[i].clone()))
        .collect();
    let mut value = serde_json::to_value(&summary)?;
    value["out"] = json!(path_str(&a.out));
    Ok((value, failed))
}

// ── report ──────────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Sweep table written by `sweep`.
    #[arg(long, default_value = "sweep/sweep.csv")]
    pub sweep: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

pub fn cmd_report(a: &ReportArgs) -> Result<Value> {
    let rows = read_sweep_csv(&a.sweep)?;
    let report = emit_report(&rows, &a.out)?;
    let mut value = serde_json::to_value(&report)?;
    value["out"] = json!(path_str(&a.out));
    Ok(value)
}

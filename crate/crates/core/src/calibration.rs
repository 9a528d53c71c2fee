//! Scaling-factor computation: streaming statistics and the five scale
//! methods (AbsMax, AbsP, LSQ, LSQ+, BatchQuant) at layer or channel
//! granularity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::quant::{IntRange, QuantParams, Signedness};
use crate::reservoir::{Reservoir, DEFAULT_CAPACITY};
use crate::tensor::{check_percentile, percentile_abs, reduce_stats, AxisGroup, GroupStats, Tensor};

pub const DEFAULT_PERCENTILE: f64 = 99.99;

/// Channel axis of NCHW activations, used by BatchQuant.
pub const ACTIVATION_CHANNEL_AXIS: usize = 1;

/// What a scale is computed for. Weights use signed ranges, activations unsigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Weight,
    Activation,
}

impl Target {
    pub fn signedness(self) -> Signedness {
        match self {
            Target::Weight => Signedness::Signed,
            Target::Activation => Signedness::Unsigned,
        }
    }

    pub fn of(signedness: Signedness) -> Target {
        match signedness {
            Signedness::Signed => Target::Weight,
            Signedness::Unsigned => Target::Activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScaleMethod {
    AbsMax,
    /// Absolute percentile with hyperparameter `k` in `[0, 100]`.
    AbsP { k: f64 },
    Lsq,
    /// Weight-only.
    LsqPlus,
    /// Activation-only.
    BatchQuant,
}

impl ScaleMethod {
    pub fn abs_p() -> Self {
        ScaleMethod::AbsP {
            k: DEFAULT_PERCENTILE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScaleMethod::AbsMax => "absmax",
            ScaleMethod::AbsP { .. } => "absp",
            ScaleMethod::Lsq => "lsq",
            ScaleMethod::LsqPlus => "lsqplus",
            ScaleMethod::BatchQuant => "batchquant",
        }
    }

    /// Position in the canonical method order, for sorting report rows.
    pub fn ordinal(&self) -> u8 {
        match self {
            ScaleMethod::AbsMax => 0,
            ScaleMethod::AbsP { .. } => 1,
            ScaleMethod::Lsq => 2,
            ScaleMethod::LsqPlus => 3,
            ScaleMethod::BatchQuant => 4,
        }
    }

    pub fn supports(&self, target: Target) -> bool {
        !matches!(
            (self, target),
            (ScaleMethod::LsqPlus, Target::Activation) | (ScaleMethod::BatchQuant, Target::Weight)
        )
    }

    pub fn check_target(&self, target: Target) -> Result<()> {
        if self.supports(target) {
            return Ok(());
        }
        Err(PtqError::Incompatible(match self {
            ScaleMethod::LsqPlus => "LSQ+ is weight-only".into(),
            _ => "BatchQuant is activation-only".into(),
        }))
    }

    /// Replaces the percentile of an AbsP method; other methods are unchanged.
    pub fn with_percentile(self, k: f64) -> Self {
        match self {
            ScaleMethod::AbsP { .. } => ScaleMethod::AbsP { k },
            other => other,
        }
    }
}

impl fmt::Display for ScaleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleMethod::AbsP { k } if *k != DEFAULT_PERCENTILE => write!(f, "absp:{k}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for ScaleMethod {
    type Err = PtqError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let method = match name {
            "absmax" => ScaleMethod::AbsMax,
            "absp" => {
                let k = match arg {
                    Some(a) => a.parse::<f64>().map_err(|_| {
                        PtqError::InvalidArgument(format!("bad percentile in {s:?}"))
                    })?,
                    None => DEFAULT_PERCENTILE,
                };
                check_percentile(k)?;
                return Ok(ScaleMethod::AbsP { k });
            }
            "lsq" => ScaleMethod::Lsq,
            "lsqplus" | "lsq+" => ScaleMethod::LsqPlus,
            "batchquant" => ScaleMethod::BatchQuant,
            _ => {
                return Err(PtqError::InvalidArgument(format!(
                    "unknown scale method {s:?} (expected absmax, absp[:k], lsq, lsqplus, batchquant)"
                )))
            }
        };
        if arg.is_some() {
            return Err(PtqError::InvalidArgument(format!("{name} takes no argument")));
        }
        Ok(method)
    }
}

// ── streaming statistics ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct GroupAccumulator {
    count: u64,
    min: f32,
    max: f32,
    sum: f64,
    sum_abs: f64,
    mean: f64,
    m2: f64,
    reservoir: Reservoir,
}

impl GroupAccumulator {
    fn new(capacity: usize, seed: u64) -> Self {
        GroupAccumulator {
            count: 0,
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            sum: 0.0,
            sum_abs: 0.0,
            mean: 0.0,
            m2: 0.0,
            reservoir: Reservoir::new(capacity, seed),
        }
    }

    fn push_run(&mut self, run: &[f32]) {
        if run.is_empty() {
            return;
        }
        let mut sum = 0.0f64;
        for &v in run {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
            sum += v as f64;
            self.sum_abs += v.abs() as f64;
        }
        let n = run.len() as f64;
        let mean = sum / n;
        let m2: f64 = run.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
        self.combine_moments(run.len() as u64, mean, m2);
        self.sum += sum;
        self.reservoir.extend(run.iter().map(|v| v.abs()));
    }

    // Chan et al. pairwise update of (count, mean, M2).
    fn combine_moments(&mut self, n_b: u64, mean_b: f64, m2_b: f64) {
        let n_a = self.count as f64;
        let n_b_f = n_b as f64;
        let total = n_a + n_b_f;
        let delta = mean_b - self.mean;
        self.mean += delta * n_b_f / total;
        self.m2 += m2_b + delta * delta * n_a * n_b_f / total;
        self.count += n_b;
    }

    fn merge(&mut self, other: &GroupAccumulator) {
        if other.count == 0 {
            return;
        }
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.sum += other.sum;
        self.sum_abs += other.sum_abs;
        self.combine_moments(other.count, other.mean, other.m2);
        self.reservoir.merge(&other.reservoir);
    }

    fn summary(&self) -> Result<GroupStats> {
        if self.count == 0 {
            return Err(PtqError::NoCalibrationData);
        }
        let n = self.count as f64;
        let (min, max) = (self.min as f64, self.max as f64);
        Ok(GroupStats {
            min,
            max,
            abs_max: min.abs().max(max.abs()),
            abs_mean: self.sum_abs / n,
            mean: (self.sum / n).clamp(min, max),
            std: (self.m2.max(0.0) / n).sqrt(),
            count: self.count,
        })
    }
}

/// Running per-group statistics over a stream of tensors, plus a seeded
/// reservoir of absolute values per group for percentile estimates.
#[derive(Debug, Clone)]
pub struct CalibrationStats {
    group: AxisGroup,
    capacity: usize,
    seed: u64,
    groups: Vec<GroupAccumulator>,
}

impl CalibrationStats {
    pub fn new(group: AxisGroup, capacity: usize, seed: u64) -> Self {
        CalibrationStats {
            group,
            capacity,
            seed,
            groups: Vec::new(),
        }
    }

    pub fn with_default_capacity(group: AxisGroup, seed: u64) -> Self {
        CalibrationStats::new(group, DEFAULT_CAPACITY, seed)
    }

    /// Exact statistics of a single tensor: the reservoir holds every value.
    pub fn exact(t: &Tensor, group: AxisGroup) -> Result<Self> {
        let mut s = CalibrationStats::new(group, t.len(), 0);
        s.update(t)?;
        Ok(s)
    }

    pub fn group(&self) -> AxisGroup {
        self.group
    }

    pub fn count(&self) -> u64 {
        self.groups.iter().map(|g| g.count).sum()
    }

    fn group_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64 + 1)
    }

    pub fn update(&mut self, t: &Tensor) -> Result<()> {
        let n = t.group_count(self.group)?;
        if self.groups.is_empty() {
            self.groups = (0..n)
                .map(|i| GroupAccumulator::new(self.capacity, self.group_seed(i)))
                .collect();
        } else if self.groups.len() != n {
            return Err(PtqError::ShapeMismatch(format!(
                "stream had {} groups, tensor has {n}",
                self.groups.len()
            )));
        }
        let groups = &mut self.groups;
        t.for_each_run(self.group, |g, run| groups[g].push_run(run))
    }

    /// Folds `other` in. Exact for min/max/sums; reservoir merge is
    /// deterministic for a fixed merge order.
    pub fn merge(&mut self, other: &CalibrationStats) -> Result<()> {
        if self.group != other.group {
            return Err(PtqError::ShapeMismatch("merging different groupings".into()));
        }
        if other.groups.is_empty() {
            return Ok(());
        }
        if self.groups.is_empty() {
            self.groups = (0..other.groups.len())
                .map(|i| GroupAccumulator::new(self.capacity, self.group_seed(i)))
                .collect();
        }
        if self.groups.len() != other.groups.len() {
            return Err(PtqError::ShapeMismatch(format!(
                "merging {} groups into {}",
                other.groups.len(),
                self.groups.len()
            )));
        }
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            a.merge(b);
        }
        Ok(())
    }

    pub fn summaries(&self) -> Result<Vec<GroupStats>> {
        if self.groups.is_empty() {
            return Err(PtqError::NoCalibrationData);
        }
        self.groups.iter().map(GroupAccumulator::summary).collect()
    }

    pub fn abs_percentiles(&self, k: f64) -> Result<Vec<f64>> {
        check_percentile(k)?;
        if self.groups.is_empty() {
            return Err(PtqError::NoCalibrationData);
        }
        // The 100th percentile is the exact maximum even once the
        // reservoir has started discarding values.
        if k == 100.0 {
            return Ok(self.summaries()?.iter().map(|s| s.abs_max).collect());
        }
        self.groups.iter().map(|g| g.reservoir.percentile(k)).collect()
    }

    /// True when every group's reservoir still holds all observed values.
    pub fn is_exact(&self) -> bool {
        self.groups.iter().all(|g| g.reservoir.is_exact())
    }
}

/// Anything that can provide per-group statistics for scale computation.
pub trait StatsSource {
    fn group_stats(&self, g: AxisGroup) -> Result<Vec<GroupStats>>;
    fn abs_percentiles(&self, k: f64, g: AxisGroup) -> Result<Vec<f64>>;
}

/// Weights: statistics are exact over the whole tensor.
impl StatsSource for Tensor {
    fn group_stats(&self, g: AxisGroup) -> Result<Vec<GroupStats>> {
        reduce_stats(self, g)
    }

    fn abs_percentiles(&self, k: f64, g: AxisGroup) -> Result<Vec<f64>> {
        percentile_abs(self, k, g)
    }
}

impl StatsSource for CalibrationStats {
    fn group_stats(&self, g: AxisGroup) -> Result<Vec<GroupStats>> {
        self.check_group(g)?;
        self.summaries()
    }

    fn abs_percentiles(&self, k: f64, g: AxisGroup) -> Result<Vec<f64>> {
        self.check_group(g)?;
        CalibrationStats::abs_percentiles(self, k)
    }
}

impl CalibrationStats {
    fn check_group(&self, g: AxisGroup) -> Result<()> {
        if g != self.group {
            return Err(PtqError::ShapeMismatch(format!(
                "statistics were gathered for {:?}, requested {g:?}",
                self.group
            )));
        }
        Ok(())
    }
}

// ── scale formulas ──────────────────────────────────────────────────────────

fn nonzero(s: f64, what: &str, group: usize) -> Result<f64> {
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(PtqError::Degenerate(format!(
            "{what}: degenerate all-zero group {group}"
        )))
    }
}

/// `s = max|x| / int_max` per group.
pub fn scale_absmax(stats: &[GroupStats], r: &IntRange) -> Result<Vec<f64>> {
    stats
        .iter()
        .enumerate()
        .map(|(i, g)| nonzero(g.abs_max / r.max() as f64, "AbsMax", i))
        .collect()
}

/// `s = per_k(|x|) / int_max` per group, from precomputed percentiles.
pub fn scale_absp(percentiles: &[f64], r: &IntRange) -> Result<Vec<f64>> {
    if percentiles.is_empty() {
        return Err(PtqError::NoCalibrationData);
    }
    percentiles
        .iter()
        .enumerate()
        .map(|(i, &p)| nonzero(p / r.max() as f64, "AbsP", i))
        .collect()
}

/// `s = 2 <|x|> / sqrt(int_max)` per group.
pub fn scale_lsq(stats: &[GroupStats], r: &IntRange) -> Result<Vec<f64>> {
    stats
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.count == 0 {
                return Err(PtqError::NoCalibrationData);
            }
            nonzero(2.0 * g.abs_mean / (r.max() as f64).sqrt(), "LSQ", i)
        })
        .collect()
}

/// `s = max(|mu - 3 sigma|, |mu + 3 sigma|) / |int_min|` per group; signed ranges only.
pub fn scale_lsq_plus(stats: &[GroupStats], r: &IntRange) -> Result<Vec<f64>> {
    if r.signedness() != Signedness::Signed {
        return Err(PtqError::Incompatible("LSQ+ is weight-only".into()));
    }
    stats
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.count < 2 {
                return Err(PtqError::Degenerate(format!(
                    "LSQ+: group {i} needs at least two values"
                )));
            }
            let spread = (g.mean - 3.0 * g.std).abs().max((g.mean + 3.0 * g.std).abs());
            nonzero(spread / r.min().unsigned_abs() as f64, "LSQ+", i)
        })
        .collect()
}

/// `s = mean_c(max_c - min_c) / (int_max - int_min)` from per-channel
/// statistics; unsigned ranges only. Yields a single per-tensor scale.
pub fn scale_batchquant(channel_stats: &[GroupStats], r: &IntRange) -> Result<f64> {
    if r.signedness() != Signedness::Unsigned {
        return Err(PtqError::Incompatible("BatchQuant is activation-only".into()));
    }
    if channel_stats.is_empty() {
        return Err(PtqError::NoCalibrationData);
    }
    let mean_range = channel_stats.iter().map(|g| g.max - g.min).sum::<f64>()
        / channel_stats.len() as f64;
    let s = mean_range / (r.max() - r.min()) as f64;
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(PtqError::Degenerate(
            "BatchQuant: every channel is constant".into(),
        ))
    }
}

/// Resolves complete quantization parameters for one tensor.
///
/// The target follows from `signedness` (signed = weights, unsigned =
/// activations). Activation scales are always per tensor; BatchQuant reads
/// per-channel statistics from `stats` but returns one scale.
pub fn compute_quant_params(
    method: ScaleMethod,
    g: AxisGroup,
    stats: &dyn StatsSource,
    bits: u8,
    signedness: Signedness,
) -> Result<QuantParams> {
    let target = Target::of(signedness);
    method.check_target(target)?;
    if target == Target::Activation && g.is_per_channel() {
        return Err(PtqError::Incompatible(
            "activation scales are computed from the whole tensor".into(),
        ));
    }
    let range = IntRange::new(bits, signedness)?;
    if method == ScaleMethod::BatchQuant {
        let channels = stats.group_stats(AxisGroup::PerChannel {
            axis: ACTIVATION_CHANNEL_AXIS,
        })?;
        return QuantParams::per_tensor(range, scale_batchquant(&channels, &range)?);
    }
    let scales = match method {
        ScaleMethod::AbsMax => scale_absmax(&stats.group_stats(g)?, &range)?,
        ScaleMethod::AbsP { k } => scale_absp(&stats.abs_percentiles(k, g)?, &range)?,
        ScaleMethod::Lsq => scale_lsq(&stats.group_stats(g)?, &range)?,
        ScaleMethod::LsqPlus => scale_lsq_plus(&stats.group_stats(g)?, &range)?,
        ScaleMethod::BatchQuant => unreachable!(),
    };
    QuantParams::new(range, scales, g)
}

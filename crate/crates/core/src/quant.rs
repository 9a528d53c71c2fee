//! Uniform symmetric quantization: integer ranges, clamp-then-round mapping,
//! dequantization and quantization error.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::tensor::{AxisGroup, Tensor};

pub const MAX_BITS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Signedness {
    Signed,
    Unsigned,
}

/// Integer grid of a `bits`-wide word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntRange {
    bits: u8,
    signedness: Signedness,
    min: i64,
    max: i64,
}

impl IntRange {
    pub fn new(bits: u8, signedness: Signedness) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(PtqError::InvalidArgument(format!(
                "word-length {bits} outside 1..={MAX_BITS}"
            )));
        }
        let (min, max) = match signedness {
            Signedness::Signed => (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1),
            Signedness::Unsigned => (0, (1i64 << bits) - 1),
        };
        Ok(IntRange {
            bits,
            signedness,
            min,
            max,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    pub fn min(&self) -> i64 {
        self.min
    }

    pub fn max(&self) -> i64 {
        self.max
    }
}

impl fmt::Display for IntRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.min, self.max)
    }
}

pub fn make_int_range(bits: u8, signedness: Signedness) -> Result<IntRange> {
    IntRange::new(bits, signedness)
}

fn check_scale(s: f64) -> Result<()> {
    if !(s.is_finite() && s > 0.0) {
        return Err(PtqError::InvalidArgument(format!(
            "scale must be positive and finite, got {s}"
        )));
    }
    Ok(())
}

#[inline]
fn quantize_raw(x: f64, s: f64, r: &IntRange) -> i64 {
    (x / s).clamp(r.min as f64, r.max as f64).round_ties_even() as i64
}

/// Maps `x` onto the integer grid: round-to-nearest (ties to even) of the
/// clamped quotient `x / s`.
pub fn quantize(x: f64, s: f64, r: &IntRange) -> Result<i64> {
    check_scale(s)?;
    if !x.is_finite() {
        return Err(PtqError::InvalidArgument(format!("cannot quantize {x}")));
    }
    Ok(quantize_raw(x, s, r))
}

pub fn dequantize(q: i64, s: f64) -> f64 {
    q as f64 * s
}

/// Scales plus integer range: everything needed to quantize one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    range: IntRange,
    scales: Vec<f64>,
    group: AxisGroup,
}

impl QuantParams {
    pub fn new(range: IntRange, scales: Vec<f64>, group: AxisGroup) -> Result<Self> {
        if scales.is_empty() {
            return Err(PtqError::InvalidArgument("no scales".into()));
        }
        if group == AxisGroup::WholeTensor && scales.len() != 1 {
            return Err(PtqError::ShapeMismatch(format!(
                "whole-tensor grouping takes one scale, got {}",
                scales.len()
            )));
        }
        for &s in &scales {
            check_scale(s)?;
        }
        Ok(QuantParams {
            range,
            scales,
            group,
        })
    }

    pub fn per_tensor(range: IntRange, scale: f64) -> Result<Self> {
        QuantParams::new(range, vec![scale], AxisGroup::WholeTensor)
    }

    pub fn range(&self) -> &IntRange {
        &self.range
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn group(&self) -> AxisGroup {
        self.group
    }

    fn check_target(&self, t: &Tensor) -> Result<()> {
        let groups = t.group_count(self.group)?;
        if groups != self.scales.len() {
            return Err(PtqError::ShapeMismatch(format!(
                "{} scales for a tensor with {groups} groups",
                self.scales.len()
            )));
        }
        Ok(())
    }
}

/// Elements whose value was changed by clamping to the integer range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClampCounts {
    pub low: u64,
    pub high: u64,
}

impl ClampCounts {
    pub fn total(&self) -> u64 {
        self.low + self.high
    }

    pub fn add(&mut self, other: ClampCounts) {
        self.low += other.low;
        self.high += other.high;
    }
}

#[inline]
fn fake_quant_value(x: f32, s: f64, r: &IntRange) -> f32 {
    dequantize(quantize_raw(x as f64, s, r), s) as f32
}

/// Replaces every element with `dequantize(quantize(x))` using its group's scale.
pub fn fake_quantize_tensor(t: &Tensor, p: &QuantParams) -> Result<Tensor> {
    Ok(fake_quantize_counting(t, p)?.0)
}

/// Like [`fake_quantize_tensor`], additionally counting saturated elements:
/// those where clamping altered the rounded integer.
pub fn fake_quantize_counting(t: &Tensor, p: &QuantParams) -> Result<(Tensor, ClampCounts)> {
    p.check_target(t)?;
    let r = p.range;
    let (lo, hi) = (r.min as f64 - 0.5, r.max as f64 + 0.5);
    let mut out = Vec::with_capacity(t.len());
    let mut counts = ClampCounts::default();
    t.for_each_run(p.group, |g, run| {
        let s = p.scales[g];
        for &x in run {
            let v = x as f64 / s;
            if v < lo {
                counts.low += 1;
            } else if v > hi {
                counts.high += 1;
            }
            out.push(fake_quant_value(x, s, &r));
        }
    })?;
    Ok((t.with_data(out)?, counts))
}

/// Mean squared error between a float tensor and its quantized counterpart.
pub fn quant_mse(fp: &Tensor, q: &Tensor) -> Result<f64> {
    if fp.shape() != q.shape() {
        return Err(PtqError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            fp.shape(),
            q.shape()
        )));
    }
    Ok(squared_error_sum(fp.data(), q.data()) / fp.len() as f64)
}

pub(crate) fn squared_error_sum(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

//! Dense row-major tensors, channel grouping and per-group statistics.

use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};

/// Memory layout tag. Decides which axis is "the channel" for grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    /// Activations: batch, channel, height, width.
    Nchw,
    /// Convolution weights: out-channel, in-channel, kernel height, kernel width.
    Oihw,
    Vector,
    /// Row-major matrix; fully connected weights are `(out, in)`.
    Matrix,
}

impl Layout {
    pub fn rank(self) -> usize {
        match self {
            Layout::Nchw | Layout::Oihw => 4,
            Layout::Vector => 1,
            Layout::Matrix => 2,
        }
    }

    /// Axis holding output channels (weights) or feature channels (activations).
    pub fn channel_axis(self) -> usize {
        match self {
            Layout::Nchw => 1,
            Layout::Oihw | Layout::Vector | Layout::Matrix => 0,
        }
    }

    pub(crate) fn code(self) -> u16 {
        match self {
            Layout::Nchw => 0,
            Layout::Oihw => 1,
            Layout::Vector => 2,
            Layout::Matrix => 3,
        }
    }

    pub(crate) fn from_code(code: u16) -> Result<Self> {
        Ok(match code {
            0 => Layout::Nchw,
            1 => Layout::Oihw,
            2 => Layout::Vector,
            3 => Layout::Matrix,
            other => return Err(PtqError::Format(format!("unknown layout tag {other}"))),
        })
    }
}

/// Dense tensor of `f32` values. Immutable once built; every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    layout: Layout,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, layout: Layout) -> Result<Self> {
        if shape.len() != layout.rank() {
            return Err(PtqError::ShapeMismatch(format!(
                "{layout:?} expects rank {}, got shape {shape:?}",
                layout.rank()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(PtqError::ShapeMismatch(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(PtqError::ShapeMismatch(format!(
                "shape {shape:?} holds {expected} elements, data has {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(PtqError::NonFinite { index });
        }
        Ok(Tensor {
            shape,
            data,
            layout,
        })
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data, Layout::Vector)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data under a new shape and layout.
    pub fn reshape(self, shape: Vec<usize>, layout: Layout) -> Result<Self> {
        Tensor::new(shape, self.data, layout)
    }

    /// Builds a tensor of the same shape and layout from new data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Tensor::new(self.shape.clone(), data, self.layout)
    }

    /// Number of groups `g` partitions this tensor into.
    pub fn group_count(&self, g: AxisGroup) -> Result<usize> {
        match g {
            AxisGroup::WholeTensor => Ok(1),
            AxisGroup::PerChannel { axis } => {
                self.check_axis(axis)?;
                Ok(self.shape[axis])
            }
        }
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.shape.len() {
            return Err(PtqError::ShapeMismatch(format!(
                "channel axis {axis} out of range for rank {}",
                self.shape.len()
            )));
        }
        Ok(())
    }

    /// Visits the tensor as contiguous runs tagged with their group index.
    /// Runs are produced in storage order.
    pub fn for_each_run<F>(&self, g: AxisGroup, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[f32]),
    {
        match g {
            AxisGroup::WholeTensor => f(0, &self.data),
            AxisGroup::PerChannel { axis } => {
                self.check_axis(axis)?;
                let channels = self.shape[axis];
                let inner: usize = self.shape[axis + 1..].iter().product();
                for (i, run) in self.data.chunks(inner).enumerate() {
                    f(i % channels, run);
                }
            }
        }
        Ok(())
    }

    /// Collects the values of every group into its own vector.
    pub fn group_values(&self, g: AxisGroup) -> Result<Vec<Vec<f32>>> {
        let mut groups = vec![Vec::new(); self.group_count(g)?];
        self.for_each_run(g, |c, run| groups[c].extend_from_slice(run))?;
        Ok(groups)
    }
}

/// How a tensor is partitioned for statistics and scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AxisGroup {
    WholeTensor,
    PerChannel { axis: usize },
}

impl AxisGroup {
    pub fn is_per_channel(self) -> bool {
        matches!(self, AxisGroup::PerChannel { .. })
    }
}

/// Summary statistics of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub min: f64,
    pub max: f64,
    pub abs_max: f64,
    pub abs_mean: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: u64,
}

impl GroupStats {
    /// Exact two-pass statistics over a slice.
    pub fn from_values(values: &[f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(PtqError::EmptyInput);
        }
        let n = values.len() as f64;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0f64;
        let mut sum_abs = 0.0f64;
        for &v in values {
            let v = v as f64;
            min = min.min(v);
            max = max.max(v);
            sum += v;
            sum_abs += v.abs();
        }
        let mean = (sum / n).clamp(min, max);
        let m2: f64 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
        Ok(GroupStats {
            min,
            max,
            abs_max: min.abs().max(max.abs()),
            abs_mean: sum_abs / n,
            mean,
            std: (m2 / n).sqrt(),
            count: values.len() as u64,
        })
    }
}

/// Per-group statistics of `t` under grouping `g`.
pub fn reduce_stats(t: &Tensor, g: AxisGroup) -> Result<Vec<GroupStats>> {
    if t.is_empty() {
        return Err(PtqError::EmptyInput);
    }
    t.group_values(g)?
        .iter()
        .map(|values| GroupStats::from_values(values))
        .collect()
}

/// Percentile of already sorted values using linear interpolation between
/// order statistics at fractional rank `k/100 * (n-1)`.
pub fn percentile_of_sorted(sorted: &[f32], k: f64) -> Result<f64> {
    check_percentile(k)?;
    if sorted.is_empty() {
        return Err(PtqError::EmptyInput);
    }
    let last = sorted.len() - 1;
    if k == 100.0 {
        return Ok(sorted[last] as f64);
    }
    let rank = k / 100.0 * last as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(last);
    let frac = rank - lo as f64;
    let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
    Ok(a + (b - a) * frac)
}

pub(crate) fn check_percentile(k: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&k) {
        return Err(PtqError::InvalidArgument(format!(
            "percentile {k} outside [0, 100]"
        )));
    }
    Ok(())
}

/// Percentile of absolute values of a slice; sorts a copy.
pub fn abs_percentile(values: &[f32], k: f64) -> Result<f64> {
    check_percentile(k)?;
    let mut abs: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    abs.sort_unstable_by(f32::total_cmp);
    percentile_of_sorted(&abs, k)
}

/// `k`-th percentile of `|t|` for every group of `g`.
pub fn percentile_abs(t: &Tensor, k: f64, g: AxisGroup) -> Result<Vec<f64>> {
    check_percentile(k)?;
    if t.is_empty() {
        return Err(PtqError::EmptyInput);
    }
    t.group_values(g)?
        .iter()
        .map(|values| abs_percentile(values, k))
        .collect()
}

//! Graph execution in float, fake-quantized or calibration mode.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibration::{CalibrationStats, StatsSource, ACTIVATION_CHANNEL_AXIS};
use crate::error::{PtqError, Result};
use crate::graph::{validate_graph, ActShape, ModelGraph, Op};
use crate::kernels;
use crate::quant::{fake_quantize_counting, fake_quantize_tensor, squared_error_sum, ClampCounts};
use crate::reservoir::DEFAULT_CAPACITY;
use crate::tensor::{AxisGroup, GroupStats, Layout, Tensor};

/// Samples per work item when a dataset is split across threads.
pub const EVAL_CHUNK: usize = 50;
/// Samples per calibration work item; fixes the reservoir merge order.
pub const CALIB_CHUNK: usize = 32;

/// An input batch `(N, C, H, W)` with optional labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Option<Vec<u32>>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if inputs.layout() != Layout::Nchw {
            return Err(PtqError::ShapeMismatch("batch inputs must be NCHW".into()));
        }
        let n = inputs.shape()[0];
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(PtqError::ShapeMismatch(format!(
                    "{} labels for {n} samples",
                    l.len()
                )));
            }
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rows `start..end` of an NCHW tensor.
pub fn slice_samples(inputs: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let per = inputs.len() / inputs.shape()[0];
    let mut shape = inputs.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, inputs.data()[start * per..end * per].to_vec(), inputs.layout())
}

/// Gathers the given sample indices of an NCHW tensor, in order.
pub fn gather_samples(inputs: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let per = inputs.len() / inputs.shape()[0];
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&inputs.data()[i * per..(i + 1) * per]);
    }
    let mut shape = inputs.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data, inputs.layout())
}

// ── calibration sink ────────────────────────────────────────────────────────

/// Statistics gathered at one activation site: whole-tensor aggregates with a
/// reservoir, plus per-channel aggregates for BatchQuant.
#[derive(Debug, Clone)]
pub struct SiteCalibration {
    pub tensor: CalibrationStats,
    pub channels: CalibrationStats,
}

impl SiteCalibration {
    fn new(capacity: usize, seed: u64) -> Self {
        SiteCalibration {
            tensor: CalibrationStats::new(AxisGroup::WholeTensor, capacity, seed),
            channels: CalibrationStats::new(
                AxisGroup::PerChannel {
                    axis: ACTIVATION_CHANNEL_AXIS,
                },
                0,
                seed,
            ),
        }
    }

    fn update(&mut self, t: &Tensor) -> Result<()> {
        self.tensor.update(t)?;
        self.channels.update(t)
    }

    fn merge(&mut self, other: &SiteCalibration) -> Result<()> {
        self.tensor.merge(&other.tensor)?;
        self.channels.merge(&other.channels)
    }
}

impl StatsSource for SiteCalibration {
    fn group_stats(&self, g: AxisGroup) -> Result<Vec<GroupStats>> {
        match g {
            AxisGroup::WholeTensor => self.tensor.summaries(),
            _ => self.channels.group_stats(g),
        }
    }

    fn abs_percentiles(&self, k: f64, g: AxisGroup) -> Result<Vec<f64>> {
        StatsSource::abs_percentiles(&self.tensor, k, g)
    }
}

fn name_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Receives activations at every Quant site during a calibration pass.
#[derive(Debug, Clone)]
pub struct CalibrationSink {
    capacity: usize,
    seed: u64,
    sites: BTreeMap<String, SiteCalibration>,
}

impl CalibrationSink {
    pub fn new(capacity: usize, seed: u64) -> Self {
        CalibrationSink {
            capacity,
            seed,
            sites: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, site: &str, t: &Tensor) -> Result<()> {
        let (capacity, seed) = (self.capacity, self.seed ^ name_hash(site));
        self.sites
            .entry(site.to_string())
            .or_insert_with(|| SiteCalibration::new(capacity, seed))
            .update(t)
    }

    /// Folds `other` in; callers merge partial sinks in a fixed order.
    pub fn merge(&mut self, other: &CalibrationSink) -> Result<()> {
        for (site, stats) in &other.sites {
            match self.sites.get_mut(site) {
                Some(mine) => mine.merge(stats)?,
                None => {
                    let mut fresh =
                        SiteCalibration::new(self.capacity, self.seed ^ name_hash(site));
                    fresh.merge(stats)?;
                    self.sites.insert(site.clone(), fresh);
                }
            }
        }
        Ok(())
    }

    pub fn sites(&self) -> &BTreeMap<String, SiteCalibration> {
        &self.sites
    }

    pub fn site(&self, id: &str) -> Option<&SiteCalibration> {
        self.sites.get(id)
    }
}

// ── fake-quant trace ────────────────────────────────────────────────────────

/// Local quantization error and saturation at one Quant site.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SiteTrace {
    pub squared_error: f64,
    pub count: u64,
    pub clamps: ClampCounts,
}

impl SiteTrace {
    pub fn mse(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.squared_error / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantTrace {
    pub sites: BTreeMap<String, SiteTrace>,
}

impl QuantTrace {
    pub fn merge(&mut self, other: &QuantTrace) {
        for (k, v) in &other.sites {
            let e = self.sites.entry(k.clone()).or_default();
            e.squared_error += v.squared_error;
            e.count += v.count;
            e.clamps.add(v.clamps);
        }
    }
}

// ── engine ──────────────────────────────────────────────────────────────────

pub enum ExecutionMode<'a> {
    /// Quant nodes pass values through; weights are used as stored.
    Float,
    /// Quant nodes and weights are fake-quantized; needs resolved parameters.
    FakeQuant,
    /// As `FakeQuant`, also recording per-site error and saturation.
    FakeQuantTraced(&'a mut QuantTrace),
    /// Float forward that feeds every Quant-site input to the sink.
    Calibrate(&'a mut CalibrationSink),
}

/// A validated graph ready to run. Fake-quantized weights are prepared once.
pub struct Engine<'g> {
    graph: &'g ModelGraph,
    shapes: Vec<ActShape>,
    inputs: Vec<Vec<usize>>,
    last_use: Vec<usize>,
    quant_weights: std::result::Result<HashMap<String, Tensor>, String>,
}

impl<'g> Engine<'g> {
    pub fn new(graph: &'g ModelGraph) -> Result<Self> {
        validate_graph(graph)?;
        let shapes = graph.infer_shapes().map_err(PtqError::Graph)?;
        let index: HashMap<&str, usize> = graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let inputs: Vec<Vec<usize>> = graph
            .nodes
            .iter()
            .map(|n| n.inputs.iter().map(|i| index[i.as_str()]).collect())
            .collect();
        let mut last_use: Vec<usize> = (0..graph.nodes.len()).collect();
        for (i, ins) in inputs.iter().enumerate() {
            for &j in ins {
                last_use[j] = last_use[j].max(i);
            }
        }
        let quant_weights = prepare_quant_weights(graph);
        Ok(Engine {
            graph,
            shapes,
            inputs,
            last_use,
            quant_weights,
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        self.graph
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().map(|s| s.numel()).unwrap_or(0)
    }

    pub fn input_shape(&self) -> ActShape {
        self.shapes[0]
    }

    /// Fake-quantized weights, or why they are unavailable.
    pub fn quantized_weights(&self) -> Result<&HashMap<String, Tensor>> {
        self.quant_weights
            .as_ref()
            .map_err(|why| PtqError::Unresolved(why.clone()))
    }

    /// Runs the graph on an `(N, C, H, W)` batch and returns `(N, classes)` logits.
    pub fn forward(&self, x: &Tensor, mut mode: ExecutionMode<'_>) -> Result<Tensor> {
        let quantized = matches!(
            mode,
            ExecutionMode::FakeQuant | ExecutionMode::FakeQuantTraced(_)
        );
        let qweights = if quantized {
            Some(self.quantized_weights()?)
        } else {
            None
        };
        let expect = self.input_shape();
        let s = x.shape();
        if x.layout() != Layout::Nchw || s[1..] != [expect.c, expect.h, expect.w] {
            return Err(PtqError::ShapeMismatch(format!(
                "input {s:?} does not match graph input {expect:?}"
            )));
        }
        let n = s[0];
        let weight = |name: &str| -> &Tensor {
            match qweights.and_then(|q| q.get(name)) {
                Some(t) => t,
                None => &self.graph.tensors[name],
            }
        };
        let vector = |name: &Option<String>| name.as_ref().map(|b| self.graph.tensors[b].data());

        let mut values: Vec<Option<Tensor>> = vec![None; self.graph.nodes.len()];
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let arg = |k: usize| values[self.inputs[i][k]].as_ref().expect("topological order");
            let out = match &node.op {
                Op::Input { .. } => x.clone(),
                Op::Conv2d {
                    stride,
                    padding,
                    weight: w,
                    bias,
                    ..
                } => kernels::conv2d(arg(0), weight(w), vector(bias), *stride, *padding)?,
                Op::FullyConnected { weight: w, bias, .. } => {
                    kernels::fully_connected(arg(0), weight(w), vector(bias))?
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                    ..
                } => {
                    let t = |name: &String| self.graph.tensors[name].data();
                    kernels::batch_norm(arg(0), t(gamma), t(beta), t(mean), t(var), *eps)?
                }
                Op::Relu => kernels::relu(arg(0))?,
                Op::Add => kernels::add(arg(0), arg(1))?,
                Op::MaxPool { kernel, stride } => kernels::max_pool(arg(0), *kernel, *stride)?,
                Op::AvgPool { kernel, stride } => kernels::avg_pool(arg(0), *kernel, *stride)?,
                Op::Quant { slot, .. } => {
                    let input = arg(0);
                    match &mut mode {
                        ExecutionMode::Float => input.clone(),
                        ExecutionMode::Calibrate(sink) => {
                            sink.observe(&node.id, input)?;
                            input.clone()
                        }
                        ExecutionMode::FakeQuant => {
                            fake_quantize_tensor(input, slot.params.as_ref().expect("checked"))?
                        }
                        ExecutionMode::FakeQuantTraced(trace) => {
                            let p = slot.params.as_ref().expect("checked");
                            let (q, clamps) = fake_quantize_counting(input, p)?;
                            let e = trace.sites.entry(node.id.clone()).or_default();
                            e.squared_error += squared_error_sum(input.data(), q.data());
                            e.count += input.len() as u64;
                            e.clamps.add(clamps);
                            q
                        }
                    }
                }
                Op::Output => {
                    let t = arg(0);
                    let features = t.len() / n;
                    t.clone().reshape(vec![n, features], Layout::Matrix)?
                }
            };
            for &j in &self.inputs[i] {
                if self.last_use[j] == i {
                    values[j] = None;
                }
            }
            values[i] = Some(out);
        }
        Ok(values.pop().flatten().expect("output node is last"))
    }

    /// Logits for a whole input set, computed in parallel chunks.
    pub fn run_dataset(&self, inputs: &Tensor, quantized: bool) -> Result<(Tensor, QuantTrace)> {
        let n = inputs.shape()[0];
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(EVAL_CHUNK)
            .map(|s| (s, (s + EVAL_CHUNK).min(n)))
            .collect();
        let parts: Vec<Result<(Tensor, QuantTrace)>> = chunks
            .par_iter()
            .map(|&(s, e)| {
                let x = slice_samples(inputs, s, e)?;
                let mut trace = QuantTrace::default();
                let mode = if quantized {
                    ExecutionMode::FakeQuantTraced(&mut trace)
                } else {
                    ExecutionMode::Float
                };
                let logits = self.forward(&x, mode)?;
                Ok((logits, trace))
            })
            .collect();
        let mut data = Vec::with_capacity(n * self.classes());
        let mut trace = QuantTrace::default();
        for part in parts {
            let (logits, t) = part?;
            data.extend_from_slice(logits.data());
            trace.merge(&t);
        }
        Ok((
            Tensor::new(vec![n, self.classes()], data, Layout::Matrix)?,
            trace,
        ))
    }
}

fn prepare_quant_weights(graph: &ModelGraph) -> std::result::Result<HashMap<String, Tensor>, String> {
    if graph.plan.is_none() {
        return Err("graph has no quantization plan".into());
    }
    for n in &graph.nodes {
        if let Op::Quant { slot, .. } = &n.op {
            if slot.params.is_none() {
                return Err(format!("quant node {} has no parameters", n.id));
            }
        }
    }
    let mut out = HashMap::new();
    for name in graph.weight_names() {
        let slot = graph
            .weight_quant
            .get(name)
            .ok_or_else(|| format!("weight {name} is not marked for quantization"))?;
        let params = slot
            .params
            .as_ref()
            .ok_or_else(|| format!("weight {name} has no parameters"))?;
        let q = fake_quantize_tensor(&graph.tensors[name], params).map_err(|e| e.to_string())?;
        out.insert(name.to_string(), q);
    }
    Ok(out)
}

/// Draws `sample_size` distinct inputs (seeded, uniform), runs a float
/// forward over them and gathers statistics at every Quant site.
///
/// Chunks of [`CALIB_CHUNK`] samples run in parallel, each into its own sink;
/// sinks are merged in chunk order, so results do not depend on thread count.
pub fn run_calibration(
    graph: &ModelGraph,
    inputs: &Tensor,
    sample_size: usize,
    seed: u64,
    reservoir_capacity: usize,
) -> Result<CalibrationSink> {
    let n = inputs.shape()[0];
    if graph.count_kind("quant") == 0 {
        return Err(PtqError::InvalidArgument(
            "graph has no quantization sites to calibrate".into(),
        ));
    }
    if sample_size == 0 {
        return Err(PtqError::EmptyInput);
    }
    if sample_size > n {
        return Err(PtqError::InvalidArgument(format!(
            "calibration sample of {sample_size} exceeds dataset of {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, sample_size).into_vec();
    indices.sort_unstable();

    let engine = Engine::new(graph)?;
    let sinks: Vec<Result<CalibrationSink>> = indices
        .par_chunks(CALIB_CHUNK)
        .enumerate()
        .map(|(c, idx)| {
            let x = gather_samples(inputs, idx)?;
            let mut sink = CalibrationSink::new(
                reservoir_capacity,
                seed.wrapping_add((c as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F)),
            );
            engine.forward(&x, ExecutionMode::Calibrate(&mut sink))?;
            Ok(sink)
        })
        .collect();
    let mut total = CalibrationSink::new(reservoir_capacity, seed);
    for sink in sinks {
        total.merge(&sink?)?;
    }
    Ok(total)
}

pub fn run_calibration_default(
    graph: &ModelGraph,
    inputs: &Tensor,
    sample_size: usize,
    seed: u64,
) -> Result<CalibrationSink> {
    run_calibration(graph, inputs, sample_size, seed, DEFAULT_CAPACITY)
}

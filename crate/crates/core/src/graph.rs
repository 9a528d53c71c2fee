//! Graph IR for residual CNNs, plus the batch-norm folding and
//! quantization-node insertion passes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{ScaleMethod, Target};
use crate::error::{PtqError, Result};
use crate::quant::{QuantParams, Signedness, MAX_BITS};
use crate::tensor::{AxisGroup, Tensor};
use crate::tensor_io::TensorStore;

// ── plan ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeightGranularity {
    Channel,
    Layer,
}

impl WeightGranularity {
    /// Grouping for weights; output channels sit on axis 0 for OIHW and (out, in).
    pub fn axis_group(self) -> AxisGroup {
        match self {
            WeightGranularity::Channel => AxisGroup::PerChannel { axis: 0 },
            WeightGranularity::Layer => AxisGroup::WholeTensor,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightGranularity::Channel => "channel",
            WeightGranularity::Layer => "layer",
        }
    }
}

impl FromStr for WeightGranularity {
    type Err = PtqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "channel" | "channelwise" => Ok(WeightGranularity::Channel),
            "layer" | "layerwise" => Ok(WeightGranularity::Layer),
            _ => Err(PtqError::InvalidArgument(format!(
                "weight group {s:?} (expected channel or layer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResidualMode {
    /// Residual sums stay in float.
    FpRes,
    /// Residual sums are quantized at the Add output.
    QRes,
}

impl ResidualMode {
    pub fn name(self) -> &'static str {
        match self {
            ResidualMode::FpRes => "fpres",
            ResidualMode::QRes => "qres",
        }
    }
}

impl FromStr for ResidualMode {
    type Err = PtqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fpres" => Ok(ResidualMode::FpRes),
            "qres" => Ok(ResidualMode::QRes),
            _ => Err(PtqError::InvalidArgument(format!(
                "residual mode {s:?} (expected fpres or qres)"
            ))),
        }
    }
}

/// One quantization configuration: word-lengths, scale methods, weight
/// granularity and residual handling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub wl_w: u8,
    pub wl_a: u8,
    pub wsm: ScaleMethod,
    pub asm: ScaleMethod,
    pub weight_group: WeightGranularity,
    pub residual: ResidualMode,
}

impl QuantPlan {
    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [("wl_w", self.wl_w), ("wl_a", self.wl_a)] {
            if !(1..=MAX_BITS).contains(&bits) {
                return Err(PtqError::InvalidArgument(format!(
                    "{name}={bits} outside 1..={MAX_BITS}"
                )));
            }
        }
        self.wsm.check_target(Target::Weight)?;
        self.asm.check_target(Target::Activation)
    }

    /// Canonical ordering key: word-lengths, methods, granularity, residual mode.
    pub fn sort_key(&self) -> (u8, u8, u8, u8, WeightGranularity, ResidualMode) {
        (
            self.wl_w,
            self.wl_a,
            self.wsm.ordinal(),
            self.asm.ordinal(),
            self.weight_group,
            self.residual,
        )
    }
}

impl fmt::Display for QuantPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "w{}/a{} wsm={} asm={} {} {}",
            self.wl_w,
            self.wl_a,
            self.wsm,
            self.asm,
            self.weight_group.name(),
            self.residual.name()
        )
    }
}

// ── nodes ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantTag {
    /// Post-ReLU activations and the network input.
    Activation,
    /// Residual sum at an Add output (qRes only).
    Residual,
}

/// How a tensor is to be quantized, and the resolved parameters once known.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSlot {
    pub bits: u8,
    pub signedness: Signedness,
    pub method: ScaleMethod,
    pub group: AxisGroup,
    pub params: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: String,
        bias: Option<String>,
    },
    BatchNorm {
        channels: usize,
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        eps: f64,
    },
    Relu,
    Add,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// `kernel == 0` pools globally over the spatial extent.
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: Option<String>,
    },
    Quant {
        tag: QuantTag,
        slot: QuantSlot,
    },
    Output,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::MaxPool { .. } => "maxpool",
            Op::AvgPool { .. } => "avgpool",
            Op::FullyConnected { .. } => "fc",
            Op::Quant { .. } => "quant",
            Op::Output => "output",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input { .. } => 0,
            Op::Add => 2,
            _ => 1,
        }
    }

    /// Name of the weight tensor of a Conv2d or FullyConnected node.
    pub fn weight(&self) -> Option<&str> {
        match self {
            Op::Conv2d { weight, .. } | Op::FullyConnected { weight, .. } => Some(weight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        Node {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Per-sample activation shape (channels, height, width). Fully connected
/// outputs are `(features, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ActShape {
    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// A model: nodes in topological order plus its tensors. After
/// quantization planning it also carries the plan and per-weight slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelGraph {
    pub nodes: Vec<Node>,
    pub tensors: TensorStore,
    pub weight_quant: BTreeMap<String, QuantSlot>,
    pub plan: Option<QuantPlan>,
}

impl ModelGraph {
    pub fn new(nodes: Vec<Node>, tensors: TensorStore) -> Self {
        ModelGraph {
            nodes,
            tensors,
            ..Default::default()
        }
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Quant nodes in graph order.
    pub fn quant_sites(&self) -> Vec<(&str, QuantTag)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Quant { tag, .. } => Some((n.id.as_str(), *tag)),
                _ => None,
            })
            .collect()
    }

    /// Names of every Conv2d / FullyConnected weight tensor, in graph order.
    pub fn weight_names(&self) -> Vec<&str> {
        self.nodes.iter().filter_map(|n| n.op.weight()).collect()
    }

    fn consumers(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                map.entry(inp.as_str()).or_default().push(i);
            }
        }
        map
    }

    fn tensor_shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|t| t.shape())
    }

    /// Shape inference in node order. Collects every violation.
    pub fn infer_shapes(&self) -> std::result::Result<Vec<ActShape>, Vec<String>> {
        let mut issues = Vec::new();
        let mut shapes: Vec<ActShape> = Vec::with_capacity(self.nodes.len());
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut inputs_seen = 0;
        let mut outputs_seen = 0;

        for (i, node) in self.nodes.iter().enumerate() {
            let id = &node.id;
            if index.contains_key(id.as_str()) {
                issues.push(format!("{id}: duplicate node id"));
            }
            if node.inputs.len() != node.op.arity() {
                issues.push(format!(
                    "{id}: {} takes {} input(s), has {}",
                    node.op.kind(),
                    node.op.arity(),
                    node.inputs.len()
                ));
            }
            let mut in_shapes = Vec::new();
            for inp in &node.inputs {
                match index.get(inp.as_str()) {
                    Some(&j) => in_shapes.push(shapes[j]),
                    None => issues.push(format!(
                        "{id}: input {inp} is not an earlier node (unknown or cyclic edge)"
                    )),
                }
            }
            let first = in_shapes.first().copied();
            let fallback = first.unwrap_or(ActShape { c: 1, h: 1, w: 1 });
            let mut bad = |msg: String| issues.push(format!("{id}: {msg}"));

            let shape = match &node.op {
                Op::Input {
                    channels,
                    height,
                    width,
                } => {
                    inputs_seen += 1;
                    if *channels == 0 || *height == 0 || *width == 0 {
                        bad("input dimensions must be positive".into());
                    }
                    ActShape {
                        c: *channels,
                        h: *height,
                        w: *width,
                    }
                }
                Op::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                } => {
                    if first.is_some_and(|s| s.c != *in_channels) {
                        bad(format!(
                            "expects {in_channels} input channels, gets {}",
                            fallback.c
                        ));
                    }
                    let expect = [*out_channels, *in_channels, *kernel, *kernel];
                    match self.tensor_shape(weight) {
                        None => bad(format!("weight tensor {weight} missing")),
                        Some(s) if s != expect => {
                            bad(format!("weight {weight} has shape {s:?}, expected {expect:?}"))
                        }
                        _ => {}
                    }
                    if let Some(b) = bias {
                        self.check_vector(b, *out_channels, &mut bad);
                    }
                    let h = conv_out(fallback.h, *kernel, *stride, *padding);
                    let w = conv_out(fallback.w, *kernel, *stride, *padding);
                    match (h, w) {
                        (Some(h), Some(w)) => ActShape {
                            c: *out_channels,
                            h,
                            w,
                        },
                        _ => {
                            bad("kernel/stride do not fit the input".into());
                            ActShape {
                                c: *out_channels,
                                ..fallback
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    channels,
                    gamma,
                    beta,
                    mean,
                    var,
                    ..
                } => {
                    if first.is_some_and(|s| s.c != *channels) {
                        bad(format!("expects {channels} channels, gets {}", fallback.c));
                    }
                    for t in [gamma, beta, mean, var] {
                        self.check_vector(t, *channels, &mut bad);
                    }
                    if let Some(t) = self.tensors.get(var) {
                        if t.data().iter().any(|&v| v < 0.0) {
                            bad(format!("variance {var} has negative entries"));
                        }
                    }
                    fallback
                }
                Op::Relu | Op::Quant { .. } => fallback,
                Op::Output => {
                    outputs_seen += 1;
                    fallback
                }
                Op::Add => {
                    if in_shapes.len() == 2 && in_shapes[0] != in_shapes[1] {
                        bad(format!(
                            "operand shapes differ: {:?} vs {:?}",
                            in_shapes[0], in_shapes[1]
                        ));
                    }
                    fallback
                }
                Op::MaxPool { kernel, stride } | Op::AvgPool { kernel, stride } => {
                    if *kernel == 0 {
                        if matches!(node.op, Op::MaxPool { .. }) {
                            bad("max pooling needs a kernel".into());
                        }
                        ActShape {
                            c: fallback.c,
                            h: 1,
                            w: 1,
                        }
                    } else {
                        match (
                            conv_out(fallback.h, *kernel, *stride, 0),
                            conv_out(fallback.w, *kernel, *stride, 0),
                        ) {
                            (Some(h), Some(w)) => ActShape { c: fallback.c, h, w },
                            _ => {
                                bad("pool window does not fit the input".into());
                                fallback
                            }
                        }
                    }
                }
                Op::FullyConnected {
                    in_features,
                    out_features,
                    weight,
                    bias,
                } => {
                    if first.is_some_and(|s| s.numel() != *in_features) {
                        bad(format!(
                            "expects {in_features} features, gets {}",
                            fallback.numel()
                        ));
                    }
                    let expect = [*out_features, *in_features];
                    match self.tensor_shape(weight) {
                        None => bad(format!("weight tensor {weight} missing")),
                        Some(s) if s != expect => {
                            bad(format!("weight {weight} has shape {s:?}, expected {expect:?}"))
                        }
                        _ => {}
                    }
                    if let Some(b) = bias {
                        self.check_vector(b, *out_features, &mut bad);
                    }
                    ActShape {
                        c: *out_features,
                        h: 1,
                        w: 1,
                    }
                }
            };
            if let Op::Quant { slot, .. } = &node.op {
                if let Some(p) = &slot.params {
                    if p.scales().len() != 1 || p.range().bits() != slot.bits {
                        bad("activation quant params do not match the slot".into());
                    }
                }
            }
            index.insert(id.as_str(), i);
            shapes.push(shape);
        }
        if inputs_seen != 1 {
            issues.push(format!("graph needs exactly one input node, has {inputs_seen}"));
        }
        if outputs_seen != 1 {
            issues.push(format!("graph needs exactly one output node, has {outputs_seen}"));
        } else if self.nodes.last().map(|n| &n.op) != Some(&Op::Output) {
            issues.push("output node must be last".into());
        }
        for name in self.weight_quant.keys() {
            if !self.tensors.contains_key(name) {
                issues.push(format!("quantized weight {name} missing from tensor store"));
            }
        }
        if issues.is_empty() {
            Ok(shapes)
        } else {
            Err(issues)
        }
    }

    fn check_vector(&self, name: &str, len: usize, bad: &mut impl FnMut(String)) {
        match self.tensor_shape(name) {
            None => bad(format!("tensor {name} missing")),
            Some(s) if s != [len] => bad(format!("tensor {name} has shape {s:?}, expected [{len}]")),
            _ => {}
        }
    }

    /// Shape of the logits row (number of classes).
    pub fn output_features(&self) -> Result<usize> {
        let shapes = self.infer_shapes().map_err(PtqError::Graph)?;
        Ok(shapes.last().map(|s| s.numel()).unwrap_or(0))
    }
}

/// Acyclicity, arity, shape agreement and tensor presence.
pub fn validate_graph(g: &ModelGraph) -> Result<()> {
    g.infer_shapes().map(|_| ()).map_err(PtqError::Graph)
}

fn rename_inputs(nodes: &mut [Node], from: &str, to: &str) {
    for n in nodes {
        for inp in &mut n.inputs {
            if inp == from {
                *inp = to.to_string();
            }
        }
    }
}

/// Merges each BatchNorm into the Conv2d / FullyConnected feeding it and
/// removes the BatchNorm nodes.
pub fn fold_batchnorm(g: &ModelGraph) -> Result<ModelGraph> {
    validate_graph(g)?;
    let consumers = g.consumers();
    let mut out = g.clone();
    let mut folded_ids = HashSet::new();
    let mut dead_tensors = Vec::new();

    for node in &g.nodes {
        let Op::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            eps,
            ..
        } = &node.op
        else {
            continue;
        };
        let pred_id = &node.inputs[0];
        let pred_idx = out
            .nodes
            .iter()
            .position(|n| &n.id == pred_id)
            .expect("validated");
        let foldable = matches!(
            out.nodes[pred_idx].op,
            Op::Conv2d { .. } | Op::FullyConnected { .. }
        );
        if !foldable {
            return Err(PtqError::Graph(vec![format!(
                "{}: batch norm follows {} ({}), which cannot absorb it",
                node.id,
                pred_id,
                out.nodes[pred_idx].op.kind()
            )]));
        }
        if consumers.get(pred_id.as_str()).map_or(0, |c| c.len()) != 1 {
            return Err(PtqError::Graph(vec![format!(
                "{}: {pred_id} feeds other nodes besides this batch norm",
                node.id
            )]));
        }

        let get = |name: &String| g.tensors[name].data().to_vec();
        let (gamma_v, beta_v, mean_v, var_v) = (get(gamma), get(beta), get(mean), get(var));
        let factor: Vec<f64> = gamma_v
            .iter()
            .zip(&var_v)
            .map(|(&gm, &v)| gm as f64 / (v as f64 + eps).sqrt())
            .collect();

        let pred = &mut out.nodes[pred_idx];
        let (weight, bias) = match &mut pred.op {
            Op::Conv2d { weight, bias, .. } | Op::FullyConnected { weight, bias, .. } => {
                (weight.clone(), bias)
            }
            _ => unreachable!(),
        };
        let w = &out.tensors[&weight];
        let per_out = w.len() / factor.len();
        let new_w: Vec<f32> = w
            .data()
            .chunks(per_out)
            .zip(&factor)
            .flat_map(|(row, &f)| row.iter().map(move |&x| (x as f64 * f) as f32))
            .collect();
        let old_bias = bias
            .as_ref()
            .map(|b| out.tensors[b].data().to_vec())
            .unwrap_or_else(|| vec![0.0; factor.len()]);
        let new_b: Vec<f32> = (0..factor.len())
            .map(|c| ((old_bias[c] as f64 - mean_v[c] as f64) * factor[c] + beta_v[c] as f64) as f32)
            .collect();
        let bias_name = bias.clone().unwrap_or_else(|| format!("{pred_id}.bias"));
        *bias = Some(bias_name.clone());

        let new_w = out.tensors[&weight].with_data(new_w)?;
        out.tensors.insert(weight, new_w);
        out.tensors.insert(bias_name, Tensor::vector(new_b)?);
        dead_tensors.extend([gamma, beta, mean, var].map(|s| s.clone()));
        folded_ids.insert(node.id.clone());
        rename_inputs(&mut out.nodes, &node.id, pred_id);
    }

    out.nodes.retain(|n| !folded_ids.contains(&n.id));
    let still_used: HashSet<String> = out.nodes.iter().flat_map(tensor_refs).collect();
    for name in dead_tensors {
        if !still_used.contains(&name) {
            out.tensors.remove(&name);
        }
    }
    validate_graph(&out)?;
    Ok(out)
}

/// Tensor names a node refers to.
pub fn tensor_refs(n: &Node) -> Vec<String> {
    match &n.op {
        Op::Conv2d { weight, bias, .. } | Op::FullyConnected { weight, bias, .. } => {
            std::iter::once(weight.clone()).chain(bias.clone()).collect()
        }
        Op::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            ..
        } => vec![gamma.clone(), beta.clone(), mean.clone(), var.clone()],
        _ => Vec::new(),
    }
}

/// Id of the Quant node inserted after `node_id`.
pub fn quant_site_id(node_id: &str, tag: QuantTag) -> String {
    match tag {
        QuantTag::Activation => format!("q_{node_id}"),
        QuantTag::Residual => format!("qr_{node_id}"),
    }
}

/// Places activation Quant nodes on the network input and after every ReLU,
/// residual Quant nodes on Add outputs under qRes, and marks every weight
/// tensor for quantization. Parameters stay unresolved.
pub fn insert_quant_nodes(g: &ModelGraph, plan: &QuantPlan) -> Result<ModelGraph> {
    plan.validate()?;
    validate_graph(g)?;
    if g.plan.is_some() || g.count_kind("quant") > 0 || !g.weight_quant.is_empty() {
        return Err(PtqError::InvalidArgument(
            "graph already carries quantization nodes".into(),
        ));
    }
    if g.count_kind("batchnorm") > 0 {
        return Err(PtqError::InvalidArgument(
            "fold batch norm before inserting quantization nodes".into(),
        ));
    }
    let consumers = g.consumers();
    let act_slot = || QuantSlot {
        bits: plan.wl_a,
        signedness: Signedness::Unsigned,
        method: plan.asm,
        group: AxisGroup::WholeTensor,
        params: None,
    };

    let mut nodes: Vec<Node> = Vec::with_capacity(g.nodes.len() * 2);
    for node in &g.nodes {
        nodes.push(node.clone());
        let tag = match node.op {
            Op::Input { .. } | Op::Relu => QuantTag::Activation,
            Op::Add if plan.residual == ResidualMode::QRes => {
                let all_relu = consumers
                    .get(node.id.as_str())
                    .into_iter()
                    .flatten()
                    .all(|&c| g.nodes[c].op == Op::Relu);
                if !all_relu {
                    return Err(PtqError::InvalidArgument(format!(
                        "{}: residual quantization needs the Add to feed a ReLU",
                        node.id
                    )));
                }
                QuantTag::Residual
            }
            _ => continue,
        };
        let qid = quant_site_id(&node.id, tag);
        if g.node(&qid).is_some() {
            return Err(PtqError::InvalidArgument(format!("node id {qid} already taken")));
        }
        nodes.push(Node {
            id: qid,
            op: Op::Quant {
                tag,
                slot: act_slot(),
            },
            inputs: vec![node.id.clone()],
        });
    }
    // Rewire consumers of each quantized producer to read the Quant node.
    let quantized: Vec<(String, String)> = nodes
        .iter()
        .filter(|n| matches!(n.op, Op::Quant { .. }))
        .map(|n| (n.inputs[0].clone(), n.id.clone()))
        .collect();
    for (producer, q) in &quantized {
        for n in nodes.iter_mut().filter(|n| &n.id != q) {
            for inp in &mut n.inputs {
                if inp == producer {
                    *inp = q.clone();
                }
            }
        }
    }

    let weight_quant = g
        .weight_names()
        .into_iter()
        .map(|w| {
            (
                w.to_string(),
                QuantSlot {
                    bits: plan.wl_w,
                    signedness: Signedness::Signed,
                    method: plan.wsm,
                    group: plan.weight_group.axis_group(),
                    params: None,
                },
            )
        })
        .collect();

    let out = ModelGraph {
        nodes,
        tensors: g.tensors.clone(),
        weight_quant,
        plan: Some(*plan),
    };
    validate_graph(&out)?;
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::test_graphs::*;
    use super::*;
    use crate::tensor::Layout;

    #[test]
    fn fixture_validates() {
        let g = residual_block();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes.last().unwrap().numel(), 3);
    }

    #[test]
    fn add_with_one_input_is_rejected() {
        let mut g = residual_block();
        g.nodes[6].inputs.pop();
        let err = validate_graph(&g).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn missing_weight_is_rejected() {
        let mut g = residual_block();
        g.tensors.remove("c2.w");
        match validate_graph(&g) {
            Err(PtqError::Graph(issues)) => assert!(issues.iter().any(|i| i.starts_with("c2:"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn forward_reference_is_rejected() {
        let mut g = residual_block();
        g.nodes[1].inputs = vec!["r1".into()];
        assert!(validate_graph(&g).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut g = residual_block();
        if let Op::Conv2d { in_channels, .. } = &mut g.nodes[4].op {
            *in_channels = 3;
        }
        assert!(validate_graph(&g).is_err());
    }

    #[test]
    fn identity_bn_leaves_weights() {
        let mut g = residual_block();
        for bn in ["bn1", "bn2"] {
            g.tensors.insert(format!("{bn}.gamma"), vector(vec![1.0, 1.0]));
            g.tensors.insert(format!("{bn}.beta"), vector(vec![0.0, 0.0]));
            g.tensors.insert(format!("{bn}.mean"), vector(vec![0.0, 0.0]));
            g.tensors.insert(format!("{bn}.var"), vector(vec![1.0, 1.0]));
        }
        for n in &mut g.nodes {
            if let Op::BatchNorm { eps, .. } = &mut n.op {
                *eps = 0.0;
            }
        }
        let f = fold_batchnorm(&g).unwrap();
        assert_eq!(f.tensors["c1.w"], g.tensors["c1.w"]);
        assert_eq!(f.count_kind("batchnorm"), 0);
        assert_eq!(f.tensors["c1.bias"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn fold_scales_weight() {
        // w=2, gamma=3, var=4, eps=0 -> 2*3/2 = 3
        let mut t = TensorStore::new();
        t.insert("w".into(), Tensor::new(vec![1, 1, 1, 1], vec![2.0], Layout::Oihw).unwrap());
        t.insert("g".into(), vector(vec![3.0]));
        t.insert("b".into(), vector(vec![0.0]));
        t.insert("m".into(), vector(vec![0.0]));
        t.insert("v".into(), vector(vec![4.0]));
        let nodes = vec![
            Node::new("in", Op::Input { channels: 1, height: 1, width: 1 }, &[]),
            Node::new(
                "c",
                Op::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    weight: "w".into(),
                    bias: None,
                },
                &["in"],
            ),
            Node::new(
                "bn",
                Op::BatchNorm {
                    channels: 1,
                    gamma: "g".into(),
                    beta: "b".into(),
                    mean: "m".into(),
                    var: "v".into(),
                    eps: 0.0,
                },
                &["c"],
            ),
            Node::new("out", Op::Output, &["bn"]),
        ];
        let f = fold_batchnorm(&ModelGraph::new(nodes, t)).unwrap();
        assert_eq!(f.tensors["w"].data(), &[3.0]);
        assert_eq!(f.node("out").unwrap().inputs, vec!["c".to_string()]);
        assert!(!f.tensors.contains_key("g"));
    }

    #[test]
    fn graph_without_bn_unchanged() {
        let g = fold_batchnorm(&residual_block()).unwrap();
        assert_eq!(fold_batchnorm(&g).unwrap(), g);
    }

    #[test]
    fn bn_after_relu_cannot_fold() {
        let mut t = TensorStore::new();
        for name in ["g", "b", "m", "v"] {
            t.insert(name.into(), vector(vec![1.0]));
        }
        let nodes = vec![
            Node::new("in", Op::Input { channels: 1, height: 2, width: 2 }, &[]),
            Node::new("r", Op::Relu, &["in"]),
            Node::new(
                "bn",
                Op::BatchNorm {
                    channels: 1,
                    gamma: "g".into(),
                    beta: "b".into(),
                    mean: "m".into(),
                    var: "v".into(),
                    eps: 0.0,
                },
                &["r"],
            ),
            Node::new("out", Op::Output, &["bn"]),
        ];
        let g = ModelGraph::new(nodes, t);
        assert!(matches!(fold_batchnorm(&g), Err(PtqError::Graph(_))));
    }

    #[test]
    fn quant_node_counts() {
        let folded = fold_batchnorm(&residual_block()).unwrap();
        let relus = folded.count_kind("relu");
        let fp = insert_quant_nodes(&folded, &plan(ResidualMode::FpRes)).unwrap();
        assert_eq!(fp.count_kind("quant"), 1 + relus);
        let q = insert_quant_nodes(&folded, &plan(ResidualMode::QRes)).unwrap();
        assert_eq!(q.count_kind("quant"), fp.count_kind("quant") + 1);
        let extra: Vec<_> = q
            .quant_sites()
            .into_iter()
            .filter(|(_, t)| *t == QuantTag::Residual)
            .collect();
        assert_eq!(extra.len(), 1);
        assert_eq!(q.node(extra[0].0).unwrap().inputs, vec!["add".to_string()]);
        assert_eq!(fp.weight_quant.len(), 3);
    }

    #[test]
    fn residual_branch_shares_quant_node() {
        let folded = fold_batchnorm(&residual_block()).unwrap();
        let fp = insert_quant_nodes(&folded, &plan(ResidualMode::FpRes)).unwrap();
        assert_eq!(fp.node("c2").unwrap().inputs, vec!["q_r1".to_string()]);
        assert_eq!(fp.node("add").unwrap().inputs[1], "q_r1");
        assert_eq!(fp.node("c1").unwrap().inputs, vec!["q_in".to_string()]);
    }

    #[test]
    fn qres_differs_only_by_residual_nodes() {
        let folded = fold_batchnorm(&residual_block()).unwrap();
        let fp = insert_quant_nodes(&folded, &plan(ResidualMode::FpRes)).unwrap();
        let q = insert_quant_nodes(&folded, &plan(ResidualMode::QRes)).unwrap();
        let stripped: Vec<Node> = q
            .nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Quant { tag: QuantTag::Residual, .. }))
            .cloned()
            .map(|mut n| {
                for i in &mut n.inputs {
                    if i.starts_with("qr_") {
                        *i = i.trim_start_matches("qr_").to_string();
                    }
                }
                n
            })
            .collect();
        assert_eq!(stripped, fp.nodes);
        assert_eq!(q.weight_quant, fp.weight_quant);
    }

    #[test]
    fn insertion_rejects_bad_inputs() {
        let g = residual_block();
        assert!(insert_quant_nodes(&g, &plan(ResidualMode::FpRes)).is_err(), "unfolded BN");
        let folded = fold_batchnorm(&g).unwrap();
        let mut bad = plan(ResidualMode::FpRes);
        bad.asm = ScaleMethod::LsqPlus;
        assert!(matches!(
            insert_quant_nodes(&folded, &bad),
            Err(PtqError::Incompatible(_))
        ));
        let mut bad = plan(ResidualMode::FpRes);
        bad.wsm = ScaleMethod::BatchQuant;
        assert!(insert_quant_nodes(&folded, &bad).is_err());
        let once = insert_quant_nodes(&folded, &plan(ResidualMode::FpRes)).unwrap();
        assert!(insert_quant_nodes(&once, &plan(ResidualMode::FpRes)).is_err());
    }

    #[test]
    fn plan_parsing_helpers() {
        assert_eq!("channel".parse::<WeightGranularity>().unwrap(), WeightGranularity::Channel);
        assert_eq!("QRES".parse::<ResidualMode>().unwrap(), ResidualMode::QRes);
        assert!("both".parse::<ResidualMode>().is_err());
        let mut p = plan(ResidualMode::FpRes);
        p.wl_w = 0;
        assert!(p.validate().is_err());
    }
}

//! Text model manifest plus binary tensor payload.
//!
//! ```text
//! format ptq-model 1
//! tensors toy.ptqt
//! plan wl_w=8 wl_a=8 wsm=absp asm=absp weight_group=channel residual=fpres
//! node id=in kind=input in= channels=3 height=16 width=16
//! node id=q_in kind=quant in=in tag=activation bits=8 signedness=unsigned method=absp group=whole scales=0x1.0p-8
//! node id=c1 kind=conv2d in=q_in in_channels=3 out_channels=8 kernel=3 stride=1 padding=1 weight=c1.w bias=c1.b
//! wquant tensor=c1.w bits=8 signedness=signed method=absp group=channel:0 scales=0x1.8p-7,...
//! ```
//!
//! Nodes appear in topological order. Floating-point attributes and scales
//! are written as hexadecimal floats so every value survives a round trip.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::calibration::ScaleMethod;
use crate::error::{PtqError, Result};
use crate::graph::{validate_graph, ModelGraph, Node, Op, QuantPlan, QuantSlot, QuantTag};
use crate::hexfloat;
use crate::quant::{IntRange, QuantParams, Signedness};
use crate::tensor::AxisGroup;
use crate::tensor_io::{read_tensors, write_tensors};
use crate::textfmt::{check_header, content_lines, hex_list, Fields};

pub const FORMAT_NAME: &str = "ptq-model";
pub const FORMAT_VERSION: u16 = 1;
/// Extension of the tensor payload written next to a manifest.
pub const TENSOR_EXT: &str = "ptqt";

// ── encoding ────────────────────────────────────────────────────────────────

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == '=' || c == ',') {
        return Err(PtqError::InvalidArgument(format!(
            "name {name:?} cannot be stored in a manifest"
        )));
    }
    Ok(())
}

fn signedness_name(s: Signedness) -> &'static str {
    match s {
        Signedness::Signed => "signed",
        Signedness::Unsigned => "unsigned",
    }
}

fn group_name(g: AxisGroup) -> String {
    match g {
        AxisGroup::WholeTensor => "whole".into(),
        AxisGroup::PerChannel { axis } => format!("channel:{axis}"),
    }
}

fn tag_name(t: QuantTag) -> &'static str {
    match t {
        QuantTag::Activation => "activation",
        QuantTag::Residual => "residual",
    }
}

fn slot_fields(slot: &QuantSlot) -> String {
    let scales = match &slot.params {
        None => "-".to_string(),
        Some(p) => hex_list(p.scales()),
    };
    format!(
        "bits={} signedness={} method={} group={} scales={scales}",
        slot.bits,
        signedness_name(slot.signedness),
        slot.method,
        group_name(slot.group)
    )
}

pub fn plan_fields(p: &QuantPlan) -> String {
    format!(
        "wl_w={} wl_a={} wsm={} asm={} weight_group={} residual={}",
        p.wl_w,
        p.wl_a,
        p.wsm,
        p.asm,
        p.weight_group.name(),
        p.residual.name()
    )
}

/// Manifest text for `g`, referring to the tensor file `tensor_file`.
pub fn encode_manifest(g: &ModelGraph, tensor_file: &str) -> Result<String> {
    check_name(tensor_file)?;
    let mut s = format!("format {FORMAT_NAME} {FORMAT_VERSION}\ntensors {tensor_file}\n");
    if let Some(p) = &g.plan {
        writeln!(s, "plan {}", plan_fields(p)).unwrap();
    }
    for n in &g.nodes {
        check_name(&n.id)?;
        for i in &n.inputs {
            check_name(i)?;
        }
        for t in crate::graph::tensor_refs(n) {
            check_name(&t)?;
        }
        write!(s, "node id={} kind={} in={}", n.id, n.op.kind(), n.inputs.join(",")).unwrap();
        match &n.op {
            Op::Input {
                channels,
                height,
                width,
            } => write!(s, " channels={channels} height={height} width={width}"),
            Op::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => {
                write!(
                    s,
                    " in_channels={in_channels} out_channels={out_channels} kernel={kernel} \
                     stride={stride} padding={padding} weight={weight}"
                )
                .unwrap();
                match bias {
                    Some(b) => write!(s, " bias={b}"),
                    None => Ok(()),
                }
            }
            Op::BatchNorm {
                channels,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => write!(
                s,
                " channels={channels} gamma={gamma} beta={beta} mean={mean} var={var} eps={}",
                hexfloat::format(*eps)
            ),
            Op::Relu | Op::Add | Op::Output => Ok(()),
            Op::MaxPool { kernel, stride } | Op::AvgPool { kernel, stride } => {
                write!(s, " kernel={kernel} stride={stride}")
            }
            Op::FullyConnected {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                write!(
                    s,
                    " in_features={in_features} out_features={out_features} weight={weight}"
                )
                .unwrap();
                match bias {
                    Some(b) => write!(s, " bias={b}"),
                    None => Ok(()),
                }
            }
            Op::Quant { tag, slot } => write!(s, " tag={} {}", tag_name(*tag), slot_fields(slot)),
        }
        .unwrap();
        s.push('\n');
    }
    for (name, slot) in &g.weight_quant {
        check_name(name)?;
        writeln!(s, "wquant tensor={name} {}", slot_fields(slot)).unwrap();
    }
    Ok(s)
}

// ── decoding ────────────────────────────────────────────────────────────────

fn parse_signedness(s: &str) -> Result<Signedness> {
    match s {
        "signed" => Ok(Signedness::Signed),
        "unsigned" => Ok(Signedness::Unsigned),
        _ => Err(PtqError::Format(format!("signedness {s:?}"))),
    }
}

fn parse_group(s: &str) -> Result<AxisGroup> {
    if s == "whole" {
        return Ok(AxisGroup::WholeTensor);
    }
    s.strip_prefix("channel:")
        .and_then(|a| a.parse().ok())
        .map(|axis| AxisGroup::PerChannel { axis })
        .ok_or_else(|| PtqError::Format(format!("group {s:?}")))
}

fn parse_slot(f: &Fields) -> Result<QuantSlot> {
    let bits: u8 = f.get("bits")?;
    let signedness = parse_signedness(f.str("signedness")?)?;
    let method: ScaleMethod = f.get("method")?;
    let group = parse_group(f.str("group")?)?;
    let params = match f.str("scales")? {
        "-" => None,
        list => {
            let scales = list
                .split(',')
                .map(hexfloat::parse)
                .collect::<Result<Vec<f64>>>()?;
            Some(QuantParams::new(IntRange::new(bits, signedness)?, scales, group)?)
        }
    };
    Ok(QuantSlot {
        bits,
        signedness,
        method,
        group,
        params,
    })
}

fn parse_plan(f: &Fields) -> Result<QuantPlan> {
    let plan = QuantPlan {
        wl_w: f.get("wl_w")?,
        wl_a: f.get("wl_a")?,
        wsm: f.get("wsm")?,
        asm: f.get("asm")?,
        weight_group: f.get("weight_group")?,
        residual: f.get("residual")?,
    };
    plan.validate()?;
    Ok(plan)
}

fn parse_op(f: &Fields) -> Result<Op> {
    let bias = || f.opt("bias").map(str::to_string);
    Ok(match f.str("kind")? {
        "input" => Op::Input {
            channels: f.get("channels")?,
            height: f.get("height")?,
            width: f.get("width")?,
        },
        "conv2d" => Op::Conv2d {
            in_channels: f.get("in_channels")?,
            out_channels: f.get("out_channels")?,
            kernel: f.get("kernel")?,
            stride: f.get("stride")?,
            padding: f.get("padding")?,
            weight: f.get("weight")?,
            bias: bias(),
        },
        "batchnorm" => Op::BatchNorm {
            channels: f.get("channels")?,
            gamma: f.get("gamma")?,
            beta: f.get("beta")?,
            mean: f.get("mean")?,
            var: f.get("var")?,
            eps: f.hex("eps")?,
        },
        "relu" => Op::Relu,
        "add" => Op::Add,
        "maxpool" => Op::MaxPool {
            kernel: f.get("kernel")?,
            stride: f.get("stride")?,
        },
        "avgpool" => Op::AvgPool {
            kernel: f.get("kernel")?,
            stride: f.get("stride")?,
        },
        "fc" => Op::FullyConnected {
            in_features: f.get("in_features")?,
            out_features: f.get("out_features")?,
            weight: f.get("weight")?,
            bias: bias(),
        },
        "quant" => Op::Quant {
            tag: match f.str("tag")? {
                "activation" => QuantTag::Activation,
                "residual" => QuantTag::Residual,
                other => {
                    return Err(PtqError::Format(format!("line {}: tag {other:?}", f.line)))
                }
            },
            slot: parse_slot(f)?,
        },
        "output" => Op::Output,
        other => {
            return Err(PtqError::Format(format!(
                "line {}: unknown node kind {other:?}",
                f.line
            )))
        }
    })
}

/// Parsed manifest: graph structure without tensors, plus the tensor file name.
pub struct Manifest {
    pub tensor_file: String,
    pub graph: ModelGraph,
}

pub fn decode_manifest(text: &str) -> Result<Manifest> {
    let mut lines = content_lines(text);

    let (_, header) = lines
        .next()
        .ok_or_else(|| PtqError::Format("empty manifest".into()))?;
    check_header(header, FORMAT_NAME, FORMAT_VERSION)?;

    let mut tensor_file = None;
    let mut graph = ModelGraph::default();
    for (no, line) in lines {
        let mut tokens = line.split_whitespace();
        let record = tokens.next().expect("non-empty line");
        match record {
            "tensors" => {
                let name = tokens
                    .next()
                    .ok_or_else(|| PtqError::Format(format!("line {no}: missing file name")))?;
                tensor_file = Some(name.to_string());
            }
            "plan" => graph.plan = Some(parse_plan(&Fields::parse(no, tokens)?)?),
            "node" => {
                let f = Fields::parse(no, tokens)?;
                let inputs = match f.str("in")? {
                    "" => Vec::new(),
                    list => list.split(',').map(str::to_string).collect(),
                };
                graph.nodes.push(Node {
                    id: f.str("id")?.to_string(),
                    op: parse_op(&f)?,
                    inputs,
                });
            }
            "wquant" => {
                let f = Fields::parse(no, tokens)?;
                graph
                    .weight_quant
                    .insert(f.str("tensor")?.to_string(), parse_slot(&f)?);
            }
            other => {
                return Err(PtqError::Format(format!(
                    "line {no}: unknown record {other:?}"
                )))
            }
        }
    }
    let tensor_file =
        tensor_file.ok_or_else(|| PtqError::Format("manifest names no tensor file".into()))?;
    Ok(Manifest { tensor_file, graph })
}

// ── files ───────────────────────────────────────────────────────────────────

/// Path of the tensor payload that accompanies the manifest at `path`.
pub fn tensor_path(path: &Path) -> PathBuf {
    path.with_extension(TENSOR_EXT)
}

/// Writes the manifest to `path` and the tensors next to it.
pub fn save_model(g: &ModelGraph, path: &Path) -> Result<()> {
    validate_graph(g)?;
    let tpath = tensor_path(path);
    let tname = tpath
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| PtqError::InvalidArgument(format!("bad model path {path:?}")))?;
    let text = encode_manifest(g, tname)?;
    write_tensors(&tpath, &g.tensors)?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads a manifest and its tensors, then validates the whole model.
pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(path)?;
    let Manifest {
        tensor_file,
        mut graph,
    } = decode_manifest(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    graph.tensors = read_tensors(&dir.join(tensor_file))?;
    let mut issues = Vec::new();
    for name in graph.weight_quant.keys() {
        if !graph.tensors.contains_key(name) {
            issues.push(format!("wquant: tensor {name:?} not in tensor file"));
        }
    }
    if !issues.is_empty() {
        return Err(PtqError::Graph(issues));
    }
    validate_graph(&graph)?;
    Ok(graph)
}

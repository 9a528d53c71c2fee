//! Independent test oracles: a naive per-element forward pass, an exhaustive
//! nearest-grid-point quantizer and an O(n²) Pareto filter.
#![allow(dead_code)]

use std::collections::HashMap;

use ptq_core::engine::Batch;
use ptq_core::fixtures::{gen_dataset, gen_toy_model, FixtureSpec};
use ptq_core::graph::{ModelGraph, Op, QuantSlot};
use ptq_core::pipeline::{calibrate, quantize_model, CalibrationConfig};
use ptq_core::profile::CalibrationProfile;
use ptq_core::quant::{QuantParams, Signedness};
use ptq_core::tensor::{AxisGroup, Tensor};

// ── quantizer ───────────────────────────────────────────────────────────────

/// Integer range of a `bits`-wide grid.
pub fn int_range(bits: u8, signed: bool) -> (i64, i64) {
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

/// Scans every integer in `[lo, hi]` for the one nearest to `v`, breaking
/// ties towards the even integer.
pub fn nearest_grid_point(v: f64, lo: i64, hi: i64) -> i64 {
    let mut best = lo;
    let mut best_d = (v - lo as f64).abs();
    for q in lo + 1..=hi {
        let d = (v - q as f64).abs();
        if d < best_d || (d == best_d && q % 2 == 0) {
            best = q;
            best_d = d;
        }
    }
    best
}

/// Fake-quantized value of `x` on the grid `s · [lo, hi]`.
pub fn oracle_fake_quant(x: f32, s: f64, lo: i64, hi: i64) -> f32 {
    (nearest_grid_point(x as f64 / s, lo, hi) as f64 * s) as f32
}

fn grid_of(p: &QuantParams) -> (i64, i64) {
    (p.range().min(), p.range().max())
}

// ── naive forward ───────────────────────────────────────────────────────────

/// One sample's activation, `(c, h, w)` row-major.
#[derive(Clone)]
struct Act {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f32>,
}

/// Quantizes `v` in groups of `run` consecutive values, group `g` using
/// `scales[g % scales.len()]`.
fn quantize_runs(v: &[f32], run: usize, p: &QuantParams) -> Vec<f32> {
    let (lo, hi) = grid_of(p);
    v.iter()
        .enumerate()
        .map(|(i, &x)| oracle_fake_quant(x, p.scales()[(i / run) % p.scales().len()], lo, hi))
        .collect()
}

fn quantize_weight(t: &Tensor, slot: &QuantSlot) -> Vec<f32> {
    let p = slot.params.as_ref().expect("resolved weight params");
    let run = match p.group() {
        AxisGroup::WholeTensor => t.len(),
        AxisGroup::PerChannel { axis } => {
            assert_eq!(axis, 0, "weights are grouped by output channel");
            t.len() / t.shape()[0]
        }
    };
    quantize_runs(t.data(), run, p)
}

/// Straight-line evaluation of `g`, one sample and one output element at a
/// time. Returns per-sample logits and the multiply-accumulates performed
/// (every kernel tap, padding included).
pub fn naive_forward(g: &ModelGraph, x: &Tensor, quantized: bool) -> (Vec<Vec<f32>>, u64) {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    let weight = |name: &str| -> Vec<f32> {
        match (quantized, g.weight_quant.get(name)) {
            (true, Some(slot)) => quantize_weight(&g.tensors[name], slot),
            _ => g.tensors[name].data().to_vec(),
        }
    };
    let weights: HashMap<&str, Vec<f32>> = g
        .nodes
        .iter()
        .filter_map(|nd| nd.op.weight())
        .map(|name| (name, weight(name)))
        .collect();
    let mut macs = 0u64;
    let mut logits = Vec::new();
    for b in 0..n {
        let mut vals: HashMap<&str, Act> = HashMap::new();
        let mut last = Vec::new();
        for nd in &g.nodes {
            let arg = |k: usize| vals[nd.inputs[k].as_str()].clone();
            let out = match &nd.op {
                Op::Input { .. } => Act {
                    c,
                    h,
                    w,
                    v: x.data()[b * per..(b + 1) * per].to_vec(),
                },
                Op::Conv2d {
                    out_channels,
                    kernel: k,
                    stride,
                    padding,
                    weight: wn,
                    bias,
                    ..
                } => {
                    let a = arg(0);
                    let wt = &weights[wn.as_str()];
                    let (k, st, p) = (*k, *stride, *padding as isize);
                    let oh = (a.h + 2 * *padding - k) / st + 1;
                    let ow = (a.w + 2 * *padding - k) / st + 1;
                    let mut v = Vec::with_capacity(out_channels * oh * ow);
                    for o in 0..*out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = 0.0f32;
                                for i in 0..a.c {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            macs += 1;
                                            let iy = (oy * st + ky) as isize - p;
                                            let ix = (ox * st + kx) as isize - p;
                                            if iy < 0 || ix < 0 || iy >= a.h as isize || ix >= a.w as isize {
                                                continue;
                                            }
                                            let xv = a.v[(i * a.h + iy as usize) * a.w + ix as usize];
                                            acc += wt[((o * a.c + i) * k + ky) * k + kx] * xv;
                                        }
                                    }
                                }
                                if let Some(bn) = bias {
                                    acc += g.tensors[bn].data()[o];
                                }
                                v.push(acc);
                            }
                        }
                    }
                    Act { c: *out_channels, h: oh, w: ow, v }
                }
                Op::BatchNorm { gamma, beta, mean, var, eps, .. } => {
                    let a = arg(0);
                    let t = |name: &String| g.tensors[name].data().to_vec();
                    let (ga, be, me, va) = (t(gamma), t(beta), t(mean), t(var));
                    let plane = a.h * a.w;
                    let v = a
                        .v
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let ch = i / plane;
                            let inv = (1.0 / (va[ch] as f64 + eps).sqrt()) as f32;
                            (x - me[ch]) * inv * ga[ch] + be[ch]
                        })
                        .collect();
                    Act { v, ..a }
                }
                Op::Relu => {
                    let a = arg(0);
                    Act { v: a.v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(), ..a }
                }
                Op::Add => {
                    let (a, bb) = (arg(0), arg(1));
                    Act { v: a.v.iter().zip(&bb.v).map(|(x, y)| x + y).collect(), ..a }
                }
                Op::AvgPool { kernel, stride } => {
                    let a = arg(0);
                    let (kh, kw, st) = if *kernel == 0 { (a.h, a.w, 1) } else { (*kernel, *kernel, *stride) };
                    let (oh, ow) = ((a.h - kh) / st + 1, (a.w - kw) / st + 1);
                    let mut v = Vec::new();
                    for ch in 0..a.c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut sum = 0.0f32;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        sum += a.v[(ch * a.h + oy * st + ky) * a.w + ox * st + kx];
                                    }
                                }
                                v.push(sum / (kh * kw) as f32);
                            }
                        }
                    }
                    Act { c: a.c, h: oh, w: ow, v }
                }
                Op::MaxPool { kernel, stride } => {
                    let a = arg(0);
                    let (oh, ow) = ((a.h - kernel) / stride + 1, (a.w - kernel) / stride + 1);
                    let mut v = Vec::new();
                    for ch in 0..a.c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut m = f32::NEG_INFINITY;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        m = m.max(a.v[(ch * a.h + oy * stride + ky) * a.w + ox * stride + kx]);
                                    }
                                }
                                v.push(m);
                            }
                        }
                    }
                    Act { c: a.c, h: oh, w: ow, v }
                }
                Op::FullyConnected { out_features, weight: wn, bias, .. } => {
                    let a = arg(0);
                    let wt = &weights[wn.as_str()];
                    let f = a.v.len();
                    let v = (0..*out_features)
                        .map(|o| {
                            let mut acc = 0.0f32;
                            for (i, &xv) in a.v.iter().enumerate() {
                                macs += 1;
                                acc += wt[o * f + i] * xv;
                            }
                            match bias {
                                Some(bn) => acc + g.tensors[bn].data()[o],
                                None => acc,
                            }
                        })
                        .collect();
                    Act { c: *out_features, h: 1, w: 1, v }
                }
                Op::Quant { slot, .. } => {
                    let a = arg(0);
                    if quantized {
                        let p = slot.params.as_ref().expect("resolved activation params");
                        assert_eq!(p.range().signedness(), Signedness::Unsigned);
                        let run = match p.group() {
                            AxisGroup::WholeTensor => a.v.len(),
                            AxisGroup::PerChannel { .. } => a.h * a.w,
                        };
                        Act { v: quantize_runs(&a.v, run, p), ..a }
                    } else {
                        a
                    }
                }
                Op::Output => arg(0),
            };
            last = out.v.clone();
            vals.insert(nd.id.as_str(), out);
        }
        logits.push(last);
    }
    // Counted once per sample above; report per frame.
    (logits, macs / n as u64)
}

// ── Pareto ──────────────────────────────────────────────────────────────────

/// Indices of points not dominated by any other (lower-or-equal cost and
/// higher-or-equal accuracy, strictly better in one), by cost then index.
pub fn brute_pareto(points: &[(f64, f64)]) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..points.len())
        .filter(|&i| {
            let (ci, ai) = points[i];
            !points
                .iter()
                .any(|&(c, a)| c <= ci && a >= ai && (c < ci || a > ai))
        })
        .collect();
    keep.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
    keep
}

// ── fixtures ────────────────────────────────────────────────────────────────

/// A fixture model, its labelled dataset and a calibration profile.
pub struct Setup {
    pub spec: FixtureSpec,
    pub model: ModelGraph,
    pub data: Batch,
    pub profile: CalibrationProfile,
}

pub fn setup(dataset_size: usize, calib_samples: usize) -> Setup {
    let spec = FixtureSpec {
        dataset_size,
        ..FixtureSpec::default()
    };
    let model = gen_toy_model(&spec).unwrap();
    let data = gen_dataset(&model, &spec).unwrap();
    let cfg = CalibrationConfig {
        samples: calib_samples,
        ..CalibrationConfig::default()
    };
    let profile = calibrate(&model, &data.inputs, &cfg).unwrap();
    Setup {
        spec,
        model,
        data,
        profile,
    }
}

impl Setup {
    pub fn quantize(&self, plan: &ptq_core::graph::QuantPlan) -> ModelGraph {
        quantize_model(&self.model, &self.profile, plan).unwrap()
    }
}

/// Per-sample rows of an `(N, classes)` logit tensor.
pub fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    let n = t.shape()[0];
    t.data().chunks(t.len() / n).map(|r| r.to_vec()).collect()
}

//! Accuracy metrics, cost models and Pareto analysis.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::graph::{ModelGraph, Op};
use crate::tensor::{Layout, Tensor};

// ── accuracy ────────────────────────────────────────────────────────────────

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn logit_rows(logits: &Tensor) -> Result<(usize, usize)> {
    if logits.layout() != Layout::Matrix {
        return Err(PtqError::ShapeMismatch("logits must be (N, classes)".into()));
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

/// Predicted class per sample.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, classes) = logit_rows(logits)?;
    Ok(logits.data().chunks(classes).map(argmax).collect())
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[u32]) -> Result<f64> {
    let (n, _) = logit_rows(logits)?;
    if n == 0 || labels.is_empty() {
        return Err(PtqError::EmptyInput);
    }
    if n != labels.len() {
        return Err(PtqError::ShapeMismatch(format!(
            "{n} logit rows for {} labels",
            labels.len()
        )));
    }
    let hits = predictions(logits)?
        .iter()
        .zip(labels)
        .filter(|(p, &l)| **p == l as usize)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Fraction of samples on which two models predict the same class.
pub fn agreement(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(PtqError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, pb) = (predictions(a)?, predictions(b)?);
    if pa.is_empty() {
        return Err(PtqError::EmptyInput);
    }
    let same = pa.iter().zip(&pb).filter(|(x, y)| x == y).count();
    Ok(same as f64 / pa.len() as f64)
}

/// Each accuracy minus the mean accuracy of its group.
pub fn acc_diff<K: Ord + Clone>(records: &[(K, f64)]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(PtqError::EmptyInput);
    }
    let mut sums: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, acc) in records {
        let e = sums.entry(k.clone()).or_insert((0.0, 0));
        e.0 += acc;
        e.1 += 1;
    }
    Ok(records
        .iter()
        .map(|(k, acc)| {
            let (sum, n) = sums[k];
            acc - sum / n as f64
        })
        .collect())
}

// ── cost models ─────────────────────────────────────────────────────────────

/// Weight elements (biases excluded) and activation elements per frame.
/// Activations count once per producing node; Quant nodes re-grid an
/// existing tensor, BatchNorm is folded at inference and Output aliases
/// its input, so none of them add storage.
pub fn element_counts(g: &ModelGraph) -> Result<(u64, u64)> {
    let shapes = g.infer_shapes().map_err(PtqError::Graph)?;
    let weights: u64 = g
        .weight_names()
        .iter()
        .map(|w| g.tensors[*w].len() as u64)
        .sum();
    let acts: u64 = g
        .nodes
        .iter()
        .zip(&shapes)
        .filter(|(n, _)| !matches!(n.op, Op::Quant { .. } | Op::BatchNorm { .. } | Op::Output))
        .map(|(_, s)| s.numel() as u64)
        .sum();
    Ok((weights, acts))
}

/// Bytes needed to hold all weights and one frame's activations.
pub fn memory_footprint(g: &ModelGraph, wl_w: u32, wl_a: u32) -> Result<f64> {
    let (w, a) = element_counts(g)?;
    Ok(footprint_bytes(w, a, wl_w, wl_a))
}

pub fn footprint_bytes(weight_elems: u64, act_elems: u64, wl_w: u32, wl_a: u32) -> f64 {
    let bits = weight_elems as u128 * wl_w as u128 + act_elems as u128 * wl_a as u128;
    bits as f64 / 8.0
}

/// Multiply-accumulates per frame over all convolutions and fully connected layers.
pub fn mac_count(g: &ModelGraph) -> Result<u64> {
    let shapes = g.infer_shapes().map_err(PtqError::Graph)?;
    Ok(g.nodes
        .iter()
        .zip(&shapes)
        .map(|(n, out)| match &n.op {
            Op::Conv2d {
                in_channels,
                kernel,
                ..
            } => out.numel() as u64 * (kernel * kernel * in_channels) as u64,
            Op::FullyConnected {
                in_features,
                out_features,
                ..
            } => (*in_features * *out_features) as u64,
            _ => 0,
        })
        .sum())
}

/// Per-MAC energy at 32-bit float, derived from published network energies.
pub const DEFAULT_FP32_MAC_JOULES: f64 = 75e-12;
/// Float-to-8-bit per-MAC energy ratio of the default table.
pub const DEFAULT_INT8_RATIO: f64 = 27.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacEnergy {
    pub wl_w: u8,
    pub wl_a: u8,
    pub joules: f64,
}

/// Energy per MAC for each word-length pair, plus optional per-bit memory
/// access energies. MAC and memory energies are always reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub fp32_mac_joules: f64,
    pub mac: Vec<MacEnergy>,
    #[serde(default)]
    pub memory_joules_per_bit: BTreeMap<String, f64>,
}

impl Default for EnergyModel {
    /// 75 pJ per float MAC; `E(w, a) = E(8, 8)·w·a/64` with `E(8, 8)` set
    /// 27× below float; memory energies per bit for common technologies.
    fn default() -> Self {
        let e88 = DEFAULT_FP32_MAC_JOULES / DEFAULT_INT8_RATIO;
        let mut mac = Vec::new();
        for w in 1..=16u8 {
            for a in 1..=16u8 {
                mac.push(MacEnergy {
                    wl_w: w,
                    wl_a: a,
                    joules: if (w, a) == (8, 8) {
                        e88
                    } else {
                        e88 * (w as f64 * a as f64) / 64.0
                    },
                });
            }
        }
        let memory_joules_per_bit = [
            ("DDR3", 70e-12),
            ("LPDDR3", 21e-12),
            ("DDR4", 15e-12),
            ("SRAM", 55e-15),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        EnergyModel {
            fp32_mac_joules: DEFAULT_FP32_MAC_JOULES,
            mac,
            memory_joules_per_bit,
        }
    }
}

impl EnergyModel {
    /// Entries must be positive, and fewer bits may never cost more energy.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PtqError::InvalidArgument(format!("energy model: {m}")));
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.fp32_mac_joules) {
            return bad("fp32 energy must be positive".into());
        }
        for e in &self.mac {
            if !positive(e.joules) {
                return bad(format!("entry ({}, {}) must be positive", e.wl_w, e.wl_a));
            }
            if e.joules > self.fp32_mac_joules {
                return bad(format!("entry ({}, {}) exceeds fp32", e.wl_w, e.wl_a));
            }
        }
        for a in &self.mac {
            for b in &self.mac {
                if a.wl_w <= b.wl_w && a.wl_a <= b.wl_a && a.joules > b.joules {
                    return bad(format!(
                        "({}, {}) costs more than ({}, {})",
                        a.wl_w, a.wl_a, b.wl_w, b.wl_a
                    ));
                }
            }
        }
        for (tech, v) in &self.memory_joules_per_bit {
            if !positive(*v) {
                return bad(format!("memory energy for {tech} must be positive"));
            }
        }
        Ok(())
    }

    /// Energy per MAC; `(32, 32)` is the float reference.
    pub fn mac_joules(&self, wl_w: u32, wl_a: u32) -> Result<f64> {
        if (wl_w, wl_a) == (32, 32) {
            return Ok(self.fp32_mac_joules);
        }
        self.mac
            .iter()
            .find(|e| e.wl_w as u32 == wl_w && e.wl_a as u32 == wl_a)
            .map(|e| e.joules)
            .ok_or_else(|| PtqError::Missing(format!("energy model has no entry for ({wl_w}, {wl_a})")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: EnergyModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

/// MAC energy per frame.
pub fn energy_estimate(macs: u64, model: &EnergyModel, wl_w: u32, wl_a: u32) -> Result<f64> {
    Ok(macs as f64 * model.mac_joules(wl_w, wl_a)?)
}

/// Energy to move `bytes` once through a memory technology of the model.
pub fn memory_energy(bytes: f64, model: &EnergyModel, technology: &str) -> Result<f64> {
    model
        .memory_joules_per_bit
        .get(technology)
        .map(|j| bytes * 8.0 * j)
        .ok_or_else(|| PtqError::Missing(format!("no memory energy for {technology:?}")))
}

// ── analysis ────────────────────────────────────────────────────────────────

/// Indices of the non-dominated `(cost, accuracy)` points, sorted by cost
/// then index. A point is dominated when another has cost ≤ and accuracy ≥
/// with at least one strict; identical points are all kept.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .0
            .total_cmp(&points[j].0)
            .then(points[j].1.total_cmp(&points[i].1))
            .then(i.cmp(&j))
    });
    let mut front = Vec::new();
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let cost = points[order[i]].0;
        let group_best = points[order[i]].1;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == cost {
            let acc = points[order[j]].1;
            if acc == group_best && acc > best_cheaper {
                front.push(order[j]);
            }
            j += 1;
        }
        best_cheaper = best_cheaper.max(group_best);
        i = j;
    }
    front.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
    front
}

/// Pearson correlation; `None` when undefined (fewer than two points, a
/// constant column, or non-finite input).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_graphs::residual_block;
    use crate::graph::Node;
    use crate::tensor_io::TensorStore;
    use proptest::prelude::*;

    fn logits(rows: &[&[f32]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new(vec![rows.len(), c], rows.concat(), Layout::Matrix).unwrap()
    }

    #[test]
    fn top1_examples() {
        let eye = logits(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(top1_accuracy(&eye, &[0, 1]).unwrap(), 1.0);
        let flat = logits(&[&[0.5; 10], &[0.5; 10]]);
        assert_eq!(top1_accuracy(&flat, &[0, 0]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&flat, &[3, 0]).unwrap(), 0.5);
        let four = logits(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(top1_accuracy(&four, &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(top1_accuracy(&four, &[0]).is_err());
    }

    #[test]
    fn agreement_counts_matching_predictions() {
        let a = logits(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = logits(&[&[2.0, 0.0], &[3.0, 1.0]]);
        assert_eq!(agreement(&a, &b).unwrap(), 0.5);
        assert_eq!(agreement(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn acc_diff_examples() {
        assert_eq!(acc_diff(&[(8, 0.7)]).unwrap(), vec![0.0]);
        let d = acc_diff(&[(6, 0.70), (6, 0.72), (8, 0.9)]).unwrap();
        assert!((d[0] + 0.01).abs() < 1e-12 && (d[1] - 0.01).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
        assert!(acc_diff::<u8>(&[]).is_err());
    }

    #[test]
    fn footprint_examples() {
        assert_eq!(footprint_bytes(1000, 500, 8, 8), 1500.0);
        assert_eq!(footprint_bytes(1000, 500, 32, 32), 6000.0);
        assert_eq!(footprint_bytes(1000, 500, 8, 4), 1250.0);
    }

    #[test]
    fn footprint_of_residual_block() {
        // weights: c1 2x1x3x3 + c2 2x2x3x3 + fc 3x2; activations: input 16,
        // c1/r1/c2/add/r2 at 2x4x4 each, pool 2, fc 3
        let g = residual_block();
        assert_eq!(element_counts(&g).unwrap(), (18 + 36 + 6, 16 + 5 * 32 + 2 + 3));
        let f8 = memory_footprint(&g, 8, 8).unwrap();
        assert_eq!(memory_footprint(&g, 32, 32).unwrap() / f8, 4.0);
    }

    #[test]
    fn mac_examples() {
        let mut tensors = TensorStore::new();
        tensors.insert("fc.w".into(), Tensor::new(vec![10, 10], vec![0.1; 100], Layout::Matrix).unwrap());
        tensors.insert("c.w".into(), Tensor::new(vec![4, 2, 3, 3], vec![0.1; 72], Layout::Oihw).unwrap());
        let fc = ModelGraph::new(
            vec![
                Node::new("in", Op::Input { channels: 10, height: 1, width: 1 }, &[]),
                Node::new(
                    "fc",
                    Op::FullyConnected { in_features: 10, out_features: 10, weight: "fc.w".into(), bias: None },
                    &["in"],
                ),
                Node::new("out", Op::Output, &["fc"]),
            ],
            tensors.clone(),
        );
        assert_eq!(mac_count(&fc).unwrap(), 100);
        let conv = ModelGraph::new(
            vec![
                Node::new("in", Op::Input { channels: 2, height: 7, width: 7 }, &[]),
                Node::new(
                    "c",
                    Op::Conv2d {
                        in_channels: 2,
                        out_channels: 4,
                        kernel: 3,
                        stride: 1,
                        padding: 0,
                        weight: "c.w".into(),
                        bias: None,
                    },
                    &["in"],
                ),
                Node::new("out", Op::Output, &["c"]),
            ],
            tensors,
        );
        assert_eq!(mac_count(&conv).unwrap(), 1800);
    }

    #[test]
    fn default_energy_model() {
        let m = EnergyModel::default();
        m.validate().unwrap();
        assert_eq!(m.mac_joules(32, 32).unwrap() / m.mac_joules(8, 8).unwrap(), 27.0);
        assert_eq!(energy_estimate(0, &m, 8, 8).unwrap(), 0.0);
        let e = energy_estimate(1_820_000_000, &m, 32, 32).unwrap();
        assert!((e - 0.1365).abs() < 1e-12);
        assert!(m.mac_joules(4, 4).unwrap() < m.mac_joules(8, 8).unwrap());
        assert!(energy_estimate(10, &m, 17, 8).is_err());
        let mem = memory_energy(1.0, &m, "DDR3").unwrap();
        assert!((mem - 8.0 * 70e-12).abs() < 1e-24);
    }

    #[test]
    fn energy_model_json_round_trip_and_validation() {
        let m = EnergyModel::default();
        let back: EnergyModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.clone();
        bad.mac[0].joules = 1.0;
        assert!(bad.validate().is_err());
        let mut neg = m;
        neg.mac[5].joules = -1.0;
        assert!(neg.validate().is_err());
    }

    pub(crate) fn brute_front(points: &[(f64, f64)]) -> Vec<usize> {
        let mut keep: Vec<usize> = (0..points.len())
            .filter(|&i| {
                !points.iter().any(|q| {
                    let p = points[i];
                    q.0 <= p.0 && q.1 >= p.1 && (q.0 < p.0 || q.1 > p.1)
                })
            })
            .collect();
        keep.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
        keep
    }

    #[test]
    fn pareto_examples() {
        assert_eq!(pareto_front(&[(1.0, 70.0), (2.0, 75.0), (3.0, 74.0)]), vec![0, 1]);
        assert_eq!(pareto_front(&[(5.0, 1.0)]), vec![0]);
        assert_eq!(pareto_front(&[(1.0, 2.0), (1.0, 2.0), (2.0, 1.0)]), vec![0, 1]);
        assert!(pareto_front(&[]).is_empty());
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
    }

    proptest! {
        #[test]
        fn pareto_matches_brute_force(
            pts in prop::collection::vec((0u8..20, 0u8..20), 0..200)
        ) {
            let points: Vec<(f64, f64)> = pts.iter().map(|&(c, a)| (c as f64, a as f64)).collect();
            prop_assert_eq!(pareto_front(&points), brute_front(&points));
        }

        #[test]
        fn acc_diff_sums_to_zero(
            recs in prop::collection::vec((4u8..9, 0.0f64..1.0), 1..100)
        ) {
            let d = acc_diff(&recs).unwrap();
            let mut sums: BTreeMap<u8, f64> = BTreeMap::new();
            for ((k, _), v) in recs.iter().zip(&d) {
                *sums.entry(*k).or_default() += v;
            }
            for s in sums.values() {
                prop_assert!(s.abs() < 1e-9);
            }
        }

        #[test]
        fn footprint_ratio_is_exact(w in 0u64..10_000_000, a in 1u64..10_000_000, b in 1u32..=16) {
            prop_assert_eq!(footprint_bytes(w, a, b, b) / footprint_bytes(w, a, 32, 32), b as f64 / 32.0);
        }
    }
}

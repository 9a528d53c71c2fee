//! Seeded toy residual CNN and synthetic dataset.
//!
//! The network is `stem conv-BN-ReLU`, then `blocks` residual blocks
//! (`conv-BN-ReLU-conv-BN`, added to the shortcut, then ReLU; a 1×1
//! stride-2 conv-BN shortcut whenever the width changes), global average
//! pooling and a fully connected classifier. Conv weights are zero-mean
//! Gaussian with fan-in scaling; BN running statistics are measured on a
//! seeded probe batch so every layer sees roughly normalized inputs. Inputs
//! cluster around one random prototype image per class, and the classifier
//! is the nearest-centroid head over the probe features, which gives the
//! float model class margins like a trained network's. Labels are the float
//! model's own predictions.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::write_dataset;
use crate::engine::{Batch, Engine, ExecutionMode};
use crate::error::{PtqError, Result};
use crate::graph::{validate_graph, ModelGraph, Node, Op};
use crate::manifest::save_model;
use crate::metrics::predictions;
use crate::tensor::{Layout, Tensor};
use crate::tensor_io::{write_tensors, TensorStore};

/// Probe samples per class used to measure BN statistics and class centroids.
const PROBE_PER_CLASS: usize = 8;
/// Weight of the random image blended into a class prototype.
const PROTOTYPE_MIX: f32 = 0.175;
const BN_EPS: f64 = 1e-5;
/// Fraction of heavy-tail weights scaled up, and their scale.
const OUTLIER_FRACTION: f64 = 0.01;
const OUTLIER_SCALE: f32 = 10.0;
/// Extra dataset seeds tried before giving up on covering every class.
const MAX_RESEEDS: u64 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    /// `(channels, height, width)` of one input.
    pub input: (usize, usize, usize),
    pub blocks: usize,
    /// Width of each block; the stem uses the first width.
    pub widths: Vec<usize>,
    pub classes: usize,
    pub dataset_size: usize,
    /// Add 1% ×10 outliers to every weight tensor.
    pub heavy_tail: bool,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            seed: 0,
            input: (3, 16, 16),
            blocks: 2,
            widths: vec![8, 16],
            classes: 10,
            dataset_size: 1000,
            heavy_tail: false,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PtqError::InvalidArgument(format!("fixture: {m}")));
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return bad("input dimensions must be positive");
        }
        if !(1..=4).contains(&self.blocks) {
            return bad("block count must be 1..=4");
        }
        if self.widths.len() != self.blocks {
            return bad("need one width per block");
        }
        if self.widths.contains(&0) || self.classes == 0 || self.dataset_size == 0 {
            return bad("widths, classes and dataset size must be positive");
        }
        let downsamples = self.widths.windows(2).filter(|p| p[0] != p[1]).count() as u32;
        if h >> downsamples == 0 || w >> downsamples == 0 {
            return bad("input too small for the number of downsampling blocks");
        }
        Ok(())
    }
}

/// Random images in `[0, 1]`: a per-channel level plus a random plane wave
/// and a little pixel noise. Unlike i.i.d. pixels, each image differs from
/// the others in ways that survive global pooling.
fn sample_inputs(rng: &mut ChaCha8Rng, n: usize, (c, h, w): (usize, usize, usize)) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        let fy = rng.random_range(-1.0f32..1.0);
        let fx = rng.random_range(-1.0f32..1.0);
        let amp = rng.random_range(0.0f32..0.4);
        for _ in 0..c {
            let level = rng.random_range(0.1f32..0.9);
            let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
            for y in 0..h {
                for x in 0..w {
                    let wave = (fy * y as f32 + fx * x as f32 + phase).sin();
                    let noise = rng.random_range(-0.05f32..0.05);
                    data.push((level + amp * wave + noise).clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data, Layout::Nchw)
}

/// One random prototype image per class; the same spec yields the same set.
fn prototypes(spec: &FixtureSpec) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9207_07E5);
    sample_inputs(&mut rng, spec.classes, spec.input)
}

/// Images drawn around the class prototypes: each is a prototype blended with
/// an independent random image. `classes[i]` picks the prototype of sample
/// `i`; when `None`, prototypes are drawn uniformly.
fn class_inputs(
    rng: &mut ChaCha8Rng,
    protos: &Tensor,
    n: usize,
    classes: Option<&[usize]>,
) -> Result<(Tensor, Vec<usize>)> {
    let k = protos.shape()[0];
    let size = protos.len() / k;
    let drawn: Vec<usize> = match classes {
        Some(c) => c.to_vec(),
        None => (0..n).map(|_| rng.random_range(0..k)).collect(),
    };
    let (c, h, w) = (protos.shape()[1], protos.shape()[2], protos.shape()[3]);
    let noise = sample_inputs(rng, n, (c, h, w))?;
    let mut data = noise.into_data();
    for (i, &class) in drawn.iter().enumerate() {
        let proto = &protos.data()[class * size..(class + 1) * size];
        for (v, p) in data[i * size..(i + 1) * size].iter_mut().zip(proto) {
            *v = (1.0 - PROTOTYPE_MIX) * p + PROTOTYPE_MIX * *v;
        }
    }
    Ok((Tensor::new(vec![n, c, h, w], data, Layout::Nchw)?, drawn))
}

struct Builder<'a> {
    spec: &'a FixtureSpec,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    tensors: TensorStore,
    probe: Tensor,
}

impl Builder<'_> {
    fn gaussian(&mut self, n: usize, std: f64) -> Vec<f32> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut v: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        if self.spec.heavy_tail {
            let count = ((n as f64 * OUTLIER_FRACTION).round() as usize).max(1);
            for i in rand::seq::index::sample(&mut self.rng, n, count) {
                v[i] *= OUTLIER_SCALE;
            }
        }
        v
    }

    fn push(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        self.nodes.push(Node::new(id, op, inputs));
        id.to_string()
    }

    fn conv(&mut self, id: &str, input: &str, cin: usize, cout: usize, k: usize, stride: usize) -> String {
        let w = self.gaussian(cout * cin * k * k, (2.0 / (cin * k * k) as f64).sqrt());
        let name = format!("{id}.w");
        self.tensors.insert(
            name.clone(),
            Tensor::new(vec![cout, cin, k, k], w, Layout::Oihw).expect("shape"),
        );
        self.push(
            id,
            Op::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                padding: k / 2,
                weight: name,
                bias: None,
            },
            &[input],
        )
    }

    /// Float activations of `node` on the probe batch.
    fn probe(&self, node: &str) -> Result<Tensor> {
        let mut nodes = self.nodes.clone();
        nodes.push(Node::new("probe.out", Op::Output, &[node]));
        let g = ModelGraph::new(nodes, self.tensors.clone());
        Engine::new(&g)?.forward(&self.probe, ExecutionMode::Float)
    }

    /// BatchNorm whose running statistics are measured on the probe batch.
    fn batch_norm(&mut self, id: &str, input: &str, channels: usize) -> Result<String> {
        let acts = self.probe(input)?;
        let n = acts.shape()[0];
        let plane = acts.shape()[1] / channels;
        let mut mean = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        for (i, run) in acts.data().chunks(plane).enumerate() {
            let c = i % channels;
            for &v in run {
                mean[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        let count = (n * plane) as f64;
        let mut vars = Vec::with_capacity(channels);
        for c in 0..channels {
            mean[c] /= count;
            vars.push((sq[c] / count - mean[c] * mean[c]).max(1e-6) as f32);
        }
        let gamma: Vec<f32> = (0..channels).map(|_| self.rng.random_range(0.8f32..1.2)).collect();
        let beta: Vec<f32> = (0..channels).map(|_| self.rng.random_range(-0.1f32..0.3)).collect();
        let store = |b: &mut Self, suffix: &str, v: Vec<f32>| {
            let name = format!("{id}.{suffix}");
            b.tensors.insert(name.clone(), Tensor::vector(v).expect("non-empty"));
            name
        };
        let op = Op::BatchNorm {
            channels,
            gamma: store(self, "gamma", gamma),
            beta: store(self, "beta", beta),
            mean: store(self, "mean", mean.iter().map(|&m| m as f32).collect()),
            var: store(self, "var", vars),
            eps: BN_EPS,
        };
        Ok(self.push(id, op, &[input]))
    }
}

/// Builds the toy network. Same spec, same bits.
pub fn gen_toy_model(spec: &FixtureSpec) -> Result<ModelGraph> {
    spec.validate()?;
    let (c, h, w) = spec.input;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xB47C_5EED);
    let probe_classes: Vec<usize> = (0..PROBE_PER_CLASS * spec.classes)
        .map(|i| i % spec.classes)
        .collect();
    let protos = prototypes(spec)?;
    let (probe, _) = class_inputs(&mut probe_rng, &protos, probe_classes.len(), Some(&probe_classes))?;
    let mut b = Builder {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        nodes: Vec::new(),
        tensors: TensorStore::new(),
        probe,
    };
    let mut x = b.push(
        "in",
        Op::Input {
            channels: c,
            height: h,
            width: w,
        },
        &[],
    );
    let stem_w = spec.widths[0];
    x = b.conv("stem.conv", &x, c, stem_w, 3, 1);
    x = b.batch_norm("stem.bn", &x, stem_w)?;
    x = b.push("stem.relu", Op::Relu, &[&x]);

    let mut width = stem_w;
    for (i, &out) in spec.widths.iter().enumerate() {
        let p = format!("b{i}");
        let stride = if out != width { 2 } else { 1 };
        let mut y = b.conv(&format!("{p}.conv1"), &x, width, out, 3, stride);
        y = b.batch_norm(&format!("{p}.bn1"), &y, out)?;
        y = b.push(&format!("{p}.relu1"), Op::Relu, &[&y]);
        y = b.conv(&format!("{p}.conv2"), &y, out, out, 3, 1);
        y = b.batch_norm(&format!("{p}.bn2"), &y, out)?;
        let shortcut = if stride != 1 {
            let s = b.conv(&format!("{p}.down"), &x, width, out, 1, stride);
            b.batch_norm(&format!("{p}.down_bn"), &s, out)?
        } else {
            x.clone()
        };
        let sum = b.push(&format!("{p}.add"), Op::Add, &[&y, &shortcut]);
        x = b.push(&format!("{p}.relu2"), Op::Relu, &[&sum]);
        width = out;
    }
    x = b.push("pool", Op::AvgPool { kernel: 0, stride: 1 }, &[&x]);

    // Nearest-centroid classifier over the pooled features: row k is the
    // centred mean feature of class k's probe samples and the bias completes
    // `-|f - c_k|^2 / 2`, so labels fall where the classes actually separate,
    // as they would in a trained network.
    let features = b.probe(&x)?;
    let classes = spec.classes;
    let mut centroids = vec![0.0f64; classes * width];
    for (i, row) in features.data().chunks(width).enumerate() {
        let k = probe_classes[i];
        for (c, &v) in centroids[k * width..(k + 1) * width].iter_mut().zip(row) {
            *c += v as f64 / PROBE_PER_CLASS as f64;
        }
    }
    let mut mean = vec![0.0f64; width];
    for row in centroids.chunks(width) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / classes as f64;
        }
    }
    let mut fc_w = Vec::with_capacity(classes * width);
    let mut bias = Vec::with_capacity(classes);
    for row in centroids.chunks(width) {
        let centred: Vec<f64> = row.iter().zip(&mean).map(|(c, m)| c - m).collect();
        let norm2: f64 = centred.iter().map(|v| v * v).sum();
        let offset: f64 = centred.iter().zip(&mean).map(|(c, m)| c * m).sum();
        fc_w.extend(centred.iter().map(|&v| v as f32));
        bias.push((-norm2 / 2.0 - offset) as f32);
    }
    b.tensors.insert(
        "fc.w".into(),
        Tensor::new(vec![spec.classes, width], fc_w, Layout::Matrix)?,
    );
    b.tensors.insert("fc.b".into(), Tensor::vector(bias)?);
    x = b.push(
        "fc",
        Op::FullyConnected {
            in_features: width,
            out_features: spec.classes,
            weight: "fc.w".into(),
            bias: Some("fc.b".into()),
        },
        &[&x],
    );
    b.push("out", Op::Output, &[&x]);

    let g = ModelGraph::new(b.nodes, b.tensors);
    validate_graph(&g)?;
    Ok(g)
}

/// One recorded input and the float logits it produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Golden {
    pub input: Tensor,
    pub logits: Tensor,
}

pub fn gen_golden(g: &ModelGraph, spec: &FixtureSpec) -> Result<Golden> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x601D_E11);
    let (input, _) = class_inputs(&mut rng, &prototypes(spec)?, 1, None)?;
    let logits = Engine::new(g)?.forward(&input, ExecutionMode::Float)?;
    Ok(Golden { input, logits })
}

/// Inputs drawn around the class prototypes, labelled by the float model. When the dataset is
/// large enough (50 samples per class) and a class is missing, the inputs are
/// redrawn from the next seed, deterministically.
pub fn gen_dataset(g: &ModelGraph, spec: &FixtureSpec) -> Result<Batch> {
    spec.validate()?;
    let engine = Engine::new(g)?;
    let want_all = spec.dataset_size >= 50 * spec.classes;
    let protos = prototypes(spec)?;
    for attempt in 0..=MAX_RESEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt) ^ 0xDA7A_5E7);
        let (inputs, _) = class_inputs(&mut rng, &protos, spec.dataset_size, None)?;
        let (logits, _) = engine.run_dataset(&inputs, false)?;
        let labels: Vec<u32> = predictions(&logits)?.into_iter().map(|p| p as u32).collect();
        let covered = (0..spec.classes as u32).all(|c| labels.contains(&c));
        if covered || !want_all {
            return Batch::new(inputs, Some(labels));
        }
    }
    Err(PtqError::Degenerate(format!(
        "no dataset seed within {MAX_RESEEDS} retries covers all {} classes",
        spec.classes
    )))
}

/// Paths of the files written by [`write_fixture`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub golden: PathBuf,
}

impl FixturePaths {
    pub fn in_dir(dir: &Path) -> Self {
        FixturePaths {
            model: dir.join("model.ptqm"),
            dataset: dir.join("dataset.ptqt"),
            golden: dir.join("golden.ptqt"),
        }
    }
}

/// Generates the model, dataset and golden pair and writes them.
pub fn write_fixture(spec: &FixtureSpec, paths: &FixturePaths) -> Result<()> {
    let g = gen_toy_model(spec)?;
    let golden = gen_golden(&g, spec)?;
    let data = gen_dataset(&g, spec)?;
    save_model(&g, &paths.model)?;
    write_dataset(&paths.dataset, &data)?;
    let mut store = TensorStore::new();
    store.insert("input".into(), golden.input);
    store.insert("logits".into(), golden.logits);
    write_tensors(&paths.golden, &store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::top1_accuracy;

    fn small() -> FixtureSpec {
        FixtureSpec {
            dataset_size: 120,
            ..FixtureSpec::default()
        }
    }

    #[test]
    fn structure() {
        let g = gen_toy_model(&FixtureSpec::default()).unwrap();
        assert_eq!(g.count_kind("add"), 2);
        assert_eq!(g.count_kind("batchnorm"), 6);
        assert_eq!(g.output_features().unwrap(), 10);
    }

    #[test]
    fn deterministic() {
        let spec = small();
        assert_eq!(gen_toy_model(&spec).unwrap(), gen_toy_model(&spec).unwrap());
        let other = FixtureSpec { seed: 1, ..small() };
        assert_ne!(gen_toy_model(&spec).unwrap(), gen_toy_model(&other).unwrap());
    }

    #[test]
    fn float_model_labels_itself() {
        let spec = small();
        let g = gen_toy_model(&spec).unwrap();
        let data = gen_dataset(&g, &spec).unwrap();
        let (logits, _) = Engine::new(&g).unwrap().run_dataset(&data.inputs, false).unwrap();
        assert_eq!(top1_accuracy(&logits, data.labels.as_ref().unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn heavy_tail_has_outliers() {
        let plain = gen_toy_model(&small()).unwrap();
        let heavy = gen_toy_model(&FixtureSpec { heavy_tail: true, ..small() }).unwrap();
        let ratio = |g: &ModelGraph| {
            let w = g.tensors["b0.conv2.w"].data();
            let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let mean = w.iter().map(|v| v.abs()).sum::<f32>() / w.len() as f32;
            max / mean
        };
        assert!(ratio(&heavy) > 2.0 * ratio(&plain));
    }

    #[test]
    fn spec_validation() {
        assert!(FixtureSpec { blocks: 5, widths: vec![8; 5], ..small() }.validate().is_err());
        assert!(FixtureSpec { widths: vec![8], ..small() }.validate().is_err());
        assert!(FixtureSpec { classes: 0, ..small() }.validate().is_err());
    }
}

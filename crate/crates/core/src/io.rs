//! On-disk formats for datasets and models, plus split generation.
//!
//! A bundle is a directory:
//!
//! ```text
//! meta.json     {"format_version":1,"num_nodes":..,"num_classes":..,"feature_dim":..,"notes":".."}
//! edges.tsv     one undirected edge per line, smaller id first
//! features.tsv  one row of tab-separated reals per node
//! labels.tsv    one class index per node
//! splits.json   {"train":[..],"val":[..],"test":[..]}
//! ```
//!
//! Reals are written in shortest round-trip form so reloading is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::model::{Layer, ModelConfig, ModelParams};

pub const FORMAT_VERSION: u32 = 1;

/// Train / validation / test fractions.
pub const SPLIT_RATIOS: [f64; 3] = [0.3, 0.2, 0.5];

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    fn validate(&self, num_nodes: usize) -> std::result::Result<(), String> {
        let mut seen = vec![false; num_nodes];
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in ids {
                if i >= num_nodes {
                    return Err(format!("{name} split has node {i} but the graph has {num_nodes} nodes"));
                }
                if seen[i] {
                    return Err(format!("node {i} appears twice across splits"));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Seeded shuffle followed by a contiguous cut. Validation and test sizes are
/// rounded; training takes the remainder. Each split is returned sorted.
pub fn split_nodes(n: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if n < 3 {
        return Err(Error::input(format!("need at least 3 nodes to split, got {n}")));
    }
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (ratios[1] * n as f64).round() as usize;
    let n_test = ((ratios[2] * n as f64).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let take = |range: std::ops::Range<usize>| {
        let mut v = ids[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}

/// A labelled attributed graph with its splits.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    graph: Graph,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    splits: Splits,
    notes: String,
}

impl GraphBundle {
    pub fn new(
        graph: Graph,
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Splits,
        notes: String,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if features.rows() != n || labels.len() != n {
            return Err(Error::input(format!(
                "{} feature rows and {} labels for {n} nodes",
                features.rows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::input("num_classes must be positive"));
        }
        if let Some((i, &k)) = labels.iter().enumerate().find(|(_, &k)| k >= num_classes) {
            return Err(Error::input(format!("label {k} of node {i} >= num_classes {num_classes}")));
        }
        if !features.all_finite() {
            return Err(Error::input("features contain non-finite values"));
        }
        splits.validate(n).map_err(Error::Input)?;
        Ok(GraphBundle {
            graph,
            features,
            labels,
            num_classes,
            splits,
            notes,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn notes(&self) -> &str {
        &self.notes
    }

    /// `(node, label)` pairs for the given nodes.
    pub fn label_pairs(&self, nodes: &[usize]) -> Vec<(usize, usize)> {
        nodes.iter().map(|&i| (i, self.labels[i])).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    num_nodes: usize,
    num_classes: usize,
    feature_dim: usize,
    #[serde(default)]
    notes: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_err(path: &Path, line: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    let line = if e.line() > 0 { Some(e.line()) } else { None };
    load_err(path, line, e.to_string())
}

pub fn save_bundle(bundle: &GraphBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = Meta {
        format_version: FORMAT_VERSION,
        num_nodes: bundle.num_nodes(),
        num_classes: bundle.num_classes,
        feature_dim: bundle.feature_dim(),
        notes: bundle.notes.clone(),
    };
    let mut meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    meta_json.push('\n');
    write_file(&dir.join("meta.json"), &meta_json)?;

    let mut edges = String::new();
    for (a, b) in bundle.graph.undirected_edges() {
        writeln!(edges, "{a}\t{b}").expect("string write");
    }
    write_file(&dir.join("edges.tsv"), &edges)?;

    let mut feats = String::new();
    for row in bundle.features.iter_rows() {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                feats.push('\t');
            }
            write!(feats, "{v}").expect("string write");
        }
        feats.push('\n');
    }
    write_file(&dir.join("features.tsv"), &feats)?;

    let mut labels = String::new();
    for k in &bundle.labels {
        writeln!(labels, "{k}").expect("string write");
    }
    write_file(&dir.join("labels.tsv"), &labels)?;

    let mut splits = serde_json::to_string(&bundle.splits).expect("splits serialize");
    splits.push('\n');
    write_file(&dir.join("splits.json"), &splits)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn load_bundle(dir: &Path) -> Result<GraphBundle> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read_file(&meta_path)?).map_err(|e| json_err(&meta_path, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(load_err(
            &meta_path,
            None,
            format!("unsupported format_version {} (expected {FORMAT_VERSION})", meta.format_version),
        ));
    }
    if meta.num_classes == 0 {
        return Err(load_err(&meta_path, None, "num_classes must be positive"));
    }
    let n = meta.num_nodes;

    let path = dir.join("edges.tsv");
    let text = read_file(&path)?;
    let mut edges = Vec::new();
    for (ln, line) in data_lines(&text) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 2 {
            return Err(load_err(&path, Some(ln), format!("expected 2 columns, found {}", cols.len())));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| load_err(&path, Some(ln), format!("{s:?} is not a node id")))
        };
        let (a, b) = (parse(cols[0])?, parse(cols[1])?);
        if a == b {
            return Err(load_err(&path, Some(ln), format!("self-loop on node {a}")));
        }
        if a >= n || b >= n {
            return Err(load_err(&path, Some(ln), format!("edge ({a}, {b}) outside 0..{n}")));
        }
        edges.push((a, b));
    }
    let graph = Graph::new(n, &edges).map_err(|e| load_err(&path, None, e.to_string()))?;

    let path = dir.join("features.tsv");
    let text = read_file(&path)?;
    let mut data = Vec::with_capacity(n * meta.feature_dim);
    let mut rows = 0;
    for (ln, line) in data_lines(&text) {
        let before = data.len();
        for tok in line.split('\t').flat_map(str::split_whitespace) {
            let v: f64 = tok
                .parse()
                .map_err(|_| load_err(&path, Some(ln), format!("{tok:?} is not a real number")))?;
            if !v.is_finite() {
                return Err(load_err(&path, Some(ln), format!("non-finite value {tok}")));
            }
            data.push(v);
        }
        if data.len() - before != meta.feature_dim {
            return Err(load_err(
                &path,
                Some(ln),
                format!("expected {} values, found {}", meta.feature_dim, data.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != n {
        return Err(load_err(&path, None, format!("{rows} rows for {n} nodes")));
    }
    let features = Matrix::from_vec(n, meta.feature_dim, data)?;

    let path = dir.join("labels.tsv");
    let text = read_file(&path)?;
    let mut labels = Vec::with_capacity(n);
    for (ln, line) in data_lines(&text) {
        let k: usize = line
            .parse()
            .map_err(|_| load_err(&path, Some(ln), format!("{line:?} is not a class index")))?;
        if k >= meta.num_classes {
            return Err(load_err(
                &path,
                Some(ln),
                format!("class {k} out of range for {} classes", meta.num_classes),
            ));
        }
        labels.push(k);
    }
    if labels.len() != n {
        return Err(load_err(&path, None, format!("{} labels for {n} nodes", labels.len())));
    }

    let path = dir.join("splits.json");
    let splits: Splits = serde_json::from_str(&read_file(&path)?).map_err(|e| json_err(&path, e))?;
    splits.validate(n).map_err(|m| load_err(&path, None, m))?;

    GraphBundle::new(graph, features, labels, meta.num_classes, splits, meta.notes)
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    layer_shapes: Vec<[usize; 2]>,
    layers: Vec<LayerFile>,
    coupling_raw: Vec<Vec<f64>>,
}

fn nested(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn from_nested(rows: &[Vec<f64>], what: &str) -> std::result::Result<Matrix, String> {
    Matrix::from_rows(rows).map_err(|e| format!("{what}: {e}"))
}

pub fn save_model(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        config: *config,
        layer_shapes: params.layers.iter().map(|l| [l.weight.rows(), l.weight.cols()]).collect(),
        layers: params
            .layers
            .iter()
            .map(|l| LayerFile {
                weight: nested(&l.weight),
                bias: l.bias.as_slice().to_vec(),
            })
            .collect(),
        coupling_raw: nested(&params.coupling_raw),
    };
    let mut text = serde_json::to_string(&file).expect("model serializes");
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_file(path, &text)
}

pub fn load_model(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let file: ModelFile = serde_json::from_str(&read_file(path)?).map_err(|e| json_err(path, e))?;
    let fail = |m: String| load_err(path, None, m);
    if file.format_version != FORMAT_VERSION {
        return Err(fail(format!("unsupported format_version {}", file.format_version)));
    }
    if file.layer_shapes.len() != file.layers.len() {
        return Err(fail("layer_shapes and layers differ in length".into()));
    }
    let mut layers = Vec::new();
    for (i, (l, shape)) in file.layers.iter().zip(&file.layer_shapes).enumerate() {
        let weight = from_nested(&l.weight, &format!("layer {i} weight")).map_err(fail)?;
        if weight.shape() != (shape[0], shape[1]) {
            return Err(fail(format!(
                "layer {i} weight is {:?}, declared {shape:?}",
                weight.shape()
            )));
        }
        let bias = Matrix::from_vec(1, l.bias.len(), l.bias.clone())?;
        layers.push(Layer { weight, bias });
    }
    let coupling_raw = from_nested(&file.coupling_raw, "coupling_raw").map_err(fail)?;
    let params = ModelParams { layers, coupling_raw };
    params.validate().map_err(|e| fail(e.to_string()))?;
    file.config.validate().map_err(|e| fail(e.to_string()))?;
    Ok((params, file.config))
}

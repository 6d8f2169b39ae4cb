//! Ground-truth pairwise Markov random fields.
//!
//! An [`MrfSpec`] assigns every node a vector of log self-potentials and every
//! edge the same symmetric log coupling matrix. This module evaluates the
//! unnormalized log density, computes exact (conditional) marginals by
//! enumeration on small graphs, draws configurations with single-site Gibbs
//! or Metropolis sweeps, and builds the synthetic lattice datasets.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{grid_graph, Graph};
use crate::io::{split_nodes, GraphBundle, SPLIT_RATIOS};
use crate::matrix::{log_sum_exp, Matrix};

/// Largest number of joint configurations [`exact_marginals`] will enumerate.
pub const MAX_ENUMERATED_CONFIGS: u64 = 1 << 24;

/// Default number of burn-in sweeps for dataset generation.
pub const DEFAULT_BURN_IN: usize = 1000;

/// Default `J` for the synthetic couplings `log H = ±J`.
pub const DEFAULT_COUPLING: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct MrfSpec {
    graph: Graph,
    self_log_potentials: Matrix,
    log_coupling: Matrix,
}

impl MrfSpec {
    pub fn new(graph: Graph, self_log_potentials: Matrix, log_coupling: Matrix) -> Result<Self> {
        let c = log_coupling.rows();
        if c == 0 || log_coupling.cols() != c {
            return Err(Error::input("log coupling must be a non-empty square matrix"));
        }
        if self_log_potentials.shape() != (graph.num_nodes(), c) {
            return Err(Error::shape(
                "MrfSpec::new",
                format!(
                    "self potentials {:?} for {} nodes and {c} classes",
                    self_log_potentials.shape(),
                    graph.num_nodes()
                ),
            ));
        }
        for a in 0..c {
            for b in 0..a {
                if log_coupling.get(a, b) != log_coupling.get(b, a) {
                    return Err(Error::input("log coupling must be symmetric"));
                }
            }
        }
        Ok(MrfSpec {
            graph,
            self_log_potentials,
            log_coupling,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn num_classes(&self) -> usize {
        self.log_coupling.rows()
    }

    pub fn self_log_potentials(&self) -> &Matrix {
        &self.self_log_potentials
    }

    pub fn log_coupling(&self) -> &Matrix {
        &self.log_coupling
    }

    /// Log of the unnormalized conditional of node `i` taking each class,
    /// given the classes of its neighbours in `y`.
    fn local_logits(&self, y: &[usize], i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.self_log_potentials.row(i));
        for &j in self.graph.neighbor_ids(i) {
            let yj = y[j];
            for (k, o) in out.iter_mut().enumerate() {
                *o += self.log_coupling.get(k, yj);
            }
        }
    }

    fn check_config(&self, y: &[usize]) -> Result<()> {
        if y.len() != self.graph.num_nodes() {
            return Err(Error::input(format!(
                "configuration has {} labels for {} nodes",
                y.len(),
                self.graph.num_nodes()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&k| k >= self.num_classes()) {
            return Err(Error::input(format!("class {bad} out of range")));
        }
        Ok(())
    }
}

/// One class index per node.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelConfig(pub Vec<usize>);

impl LabelConfig {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// `sum_i log h_i(y_i) + sum_{(i,j)} log H(y_i, y_j)` with each undirected edge
/// counted once.
pub fn log_unnormalized(spec: &MrfSpec, y: &[usize]) -> Result<f64> {
    spec.check_config(y)?;
    Ok(log_unnormalized_unchecked(spec, y))
}

fn log_unnormalized_unchecked(spec: &MrfSpec, y: &[usize]) -> f64 {
    let g = &spec.graph;
    let mut total: f64 = (0..g.num_nodes())
        .map(|i| spec.self_log_potentials.get(i, y[i]))
        .sum();
    for e in 0..g.num_directed_edges() {
        let (s, d) = g.edge(e);
        if s < d {
            total += spec.log_coupling.get(y[s], y[d]);
        }
    }
    total
}

fn validate_clamps(spec: &MrfSpec, clamped: &[(usize, usize)]) -> Result<Vec<Option<usize>>> {
    let n = spec.graph.num_nodes();
    let mut fixed = vec![None; n];
    for &(i, k) in clamped {
        if i >= n || k >= spec.num_classes() {
            return Err(Error::input(format!("clamp ({i}, {k}) out of range")));
        }
        if matches!(fixed[i], Some(prev) if prev != k) {
            return Err(Error::input(format!("node {i} clamped to two classes")));
        }
        fixed[i] = Some(k);
    }
    Ok(fixed)
}

/// Calls `visit(y, log_phi)` for every configuration consistent with the
/// clamps.
fn enumerate(
    spec: &MrfSpec,
    clamped: &[(usize, usize)],
    mut visit: impl FnMut(&[usize], f64),
) -> Result<()> {
    let c = spec.num_classes();
    let fixed = validate_clamps(spec, clamped)?;
    let free: Vec<usize> = (0..fixed.len()).filter(|&i| fixed[i].is_none()).collect();
    let count = (c as u64).checked_pow(free.len() as u32);
    match count {
        Some(n) if n <= MAX_ENUMERATED_CONFIGS => {}
        _ => {
            return Err(Error::Capacity(format!(
                "{c}^{} configurations exceed the enumeration limit of {MAX_ENUMERATED_CONFIGS}",
                free.len()
            )))
        }
    }

    let mut y: Vec<usize> = fixed.iter().map(|f| f.unwrap_or(0)).collect();
    loop {
        visit(&y, log_unnormalized_unchecked(spec, &y));
        // odometer over the free nodes
        let mut pos = 0;
        loop {
            if pos == free.len() {
                return Ok(());
            }
            let i = free[pos];
            y[i] += 1;
            if y[i] < c {
                break;
            }
            y[i] = 0;
            pos += 1;
        }
    }
}

/// Exact marginals by full enumeration, conditioned on `clamped`
/// `(node, class)` pairs. Row `i` is the distribution of node `i`.
pub fn exact_marginals(spec: &MrfSpec, clamped: &[(usize, usize)]) -> Result<Matrix> {
    let n = spec.graph.num_nodes();
    let c = spec.num_classes();
    let mut max = f64::NEG_INFINITY;
    enumerate(spec, clamped, |_, lp| max = max.max(lp))?;

    let mut acc = Matrix::zeros(n, c);
    let mut z = 0.0;
    enumerate(spec, clamped, |y, lp| {
        let w = (lp - max).exp();
        z += w;
        for (i, &k) in y.iter().enumerate() {
            let v = acc.get(i, k);
            acc.set(i, k, v + w);
        }
    })?;
    for v in acc.as_mut_slice() {
        *v /= z;
    }
    Ok(acc)
}

/// Exact joint distribution over all configurations, indexed by
/// `sum_i y_i * c^i`.
pub fn exact_joint(spec: &MrfSpec) -> Result<Vec<f64>> {
    let c = spec.num_classes();
    let mut logs = Vec::new();
    enumerate(spec, &[], |_, lp| logs.push(lp))?;
    let z = log_sum_exp(&logs);
    let _ = c;
    Ok(logs.into_iter().map(|lp| (lp - z).exp()).collect())
}

/// Index of a configuration in the layout used by [`exact_joint`].
pub fn config_index(y: &[usize], num_classes: usize) -> usize {
    y.iter().rev().fold(0, |acc, &k| acc * num_classes + k)
}

fn random_config(spec: &MrfSpec, rng: &mut impl Rng) -> Vec<usize> {
    let c = spec.num_classes();
    (0..spec.graph.num_nodes()).map(|_| rng.gen_range(0..c)).collect()
}

/// Runs `burn_in + num_sweeps` systematic-scan Gibbs sweeps (node ids in
/// ascending order) from `init`, calling `visit` after each post-burn-in sweep.
pub fn gibbs_chain(
    spec: &MrfSpec,
    init: Vec<usize>,
    num_sweeps: usize,
    burn_in: usize,
    rng: &mut impl Rng,
    mut visit: impl FnMut(&[usize]),
) -> Result<Vec<usize>> {
    spec.check_config(&init)?;
    let mut y = init;
    let c = spec.num_classes();
    let mut logits = vec![0.0; c];
    for sweep in 0..burn_in + num_sweeps {
        for i in 0..y.len() {
            spec.local_logits(&y, i, &mut logits);
            let lse = log_sum_exp(&logits);
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut pick = c - 1;
            for (k, &l) in logits.iter().enumerate() {
                cum += (l - lse).exp();
                if u < cum {
                    pick = k;
                    break;
                }
            }
            y[i] = pick;
        }
        if sweep >= burn_in {
            visit(&y);
        }
    }
    Ok(y)
}

/// Metropolis acceptance with uniform draw `u` in `[0, 1)`: accept when
/// `u < exp(delta)`. A zero difference is always accepted and `-inf` never is.
pub fn metropolis_accept(delta_log_phi: f64, u: f64) -> bool {
    delta_log_phi >= 0.0 || u < delta_log_phi.exp()
}

/// Single-site Metropolis sweeps. With two classes the proposal flips the
/// label; with more it reassigns uniformly among the other classes. Only the
/// local change in log density is evaluated.
pub fn metropolis_chain(
    spec: &MrfSpec,
    init: Vec<usize>,
    num_sweeps: usize,
    burn_in: usize,
    rng: &mut impl Rng,
    mut visit: impl FnMut(&[usize]),
) -> Result<Vec<usize>> {
    spec.check_config(&init)?;
    let mut y = init;
    let c = spec.num_classes();
    if c < 2 {
        for _ in 0..num_sweeps {
            visit(&y);
        }
        return Ok(y);
    }
    let mut logits = vec![0.0; c];
    for sweep in 0..burn_in + num_sweeps {
        for i in 0..y.len() {
            let old = y[i];
            let new = if c == 2 {
                1 - old
            } else {
                let r = rng.gen_range(0..c - 1);
                if r >= old {
                    r + 1
                } else {
                    r
                }
            };
            spec.local_logits(&y, i, &mut logits);
            let u: f64 = rng.gen();
            if metropolis_accept(logits[new] - logits[old], u) {
                y[i] = new;
            }
        }
        if sweep >= burn_in {
            visit(&y);
        }
    }
    Ok(y)
}

/// Collects `num_sweeps` Gibbs configurations after `burn_in` sweeps from a
/// uniformly random start.
pub fn gibbs_sample(
    spec: &MrfSpec,
    num_sweeps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<LabelConfig>> {
    if num_sweeps == 0 {
        return Err(Error::input("num_sweeps must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = random_config(spec, &mut rng);
    let mut out = Vec::with_capacity(num_sweeps);
    gibbs_chain(spec, init, num_sweeps, burn_in, &mut rng, |y| {
        out.push(LabelConfig(y.to_vec()))
    })?;
    Ok(out)
}

/// Metropolis counterpart of [`gibbs_sample`].
pub fn metropolis_sample(
    spec: &MrfSpec,
    num_sweeps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<LabelConfig>> {
    if num_sweeps == 0 {
        return Err(Error::input("num_sweeps must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = random_config(spec, &mut rng);
    let mut out = Vec::with_capacity(num_sweeps);
    metropolis_chain(spec, init, num_sweeps, burn_in, &mut rng, |y| {
        out.push(LabelConfig(y.to_vec()))
    })?;
    Ok(out)
}

/// Per-node empirical class frequencies over a stream of configurations.
#[derive(Debug, Clone)]
pub struct MarginalCounter {
    counts: Matrix,
    samples: usize,
}

impl MarginalCounter {
    pub fn new(num_nodes: usize, num_classes: usize) -> Self {
        MarginalCounter {
            counts: Matrix::zeros(num_nodes, num_classes),
            samples: 0,
        }
    }

    pub fn observe(&mut self, y: &[usize]) {
        for (i, &k) in y.iter().enumerate() {
            let v = self.counts.get(i, k);
            self.counts.set(i, k, v + 1.0);
        }
        self.samples += 1;
    }

    pub fn marginals(&self) -> Matrix {
        let n = self.samples.max(1) as f64;
        self.counts.map(|v| v / n)
    }
}

/// Total variation distance between two probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// The four synthetic lattice families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticKind {
    IsingPlus,
    IsingMinus,
    MrfPlus,
    MrfMinus,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 4] = [
        SyntheticKind::IsingPlus,
        SyntheticKind::IsingMinus,
        SyntheticKind::MrfPlus,
        SyntheticKind::MrfMinus,
    ];

    pub fn num_classes(self) -> usize {
        match self {
            SyntheticKind::IsingPlus | SyntheticKind::IsingMinus => 2,
            SyntheticKind::MrfPlus | SyntheticKind::MrfMinus => 3,
        }
    }

    /// True for the assortative (diagonal-dominant coupling) families.
    pub fn is_homophilous(self) -> bool {
        matches!(self, SyntheticKind::IsingPlus | SyntheticKind::MrfPlus)
    }

    pub fn is_ising(self) -> bool {
        self.num_classes() == 2
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::IsingPlus => "ising+",
            SyntheticKind::IsingMinus => "ising-",
            SyntheticKind::MrfPlus => "mrf+",
            SyntheticKind::MrfMinus => "mrf-",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ising+" => Ok(SyntheticKind::IsingPlus),
            "ising-" => Ok(SyntheticKind::IsingMinus),
            "mrf+" => Ok(SyntheticKind::MrfPlus),
            "mrf-" => Ok(SyntheticKind::MrfMinus),
            other => Err(Error::input(format!(
                "unknown synthetic kind {other:?} (expected ising+, ising-, mrf+ or mrf-)"
            ))),
        }
    }
}

/// Grid coordinate mapped linearly onto `[-1, 1]`; a single row or column
/// sits at 0.
pub fn normalized_coordinate(index: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * index as f64 / (extent - 1) as f64
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Log self-potentials of one node at normalized coordinates `(r1, r2)`.
pub fn synthetic_self_log_potential(kind: SyntheticKind, r1: f64, r2: f64) -> Vec<f64> {
    match kind {
        // Both Ising families share the same field; only the coupling sign differs.
        SyntheticKind::IsingPlus | SyntheticKind::IsingMinus => {
            let a = 0.35 * r1 * r2;
            vec![-a, a]
        }
        SyntheticKind::MrfPlus | SyntheticKind::MrfMinus => {
            let (scale, offset) = if kind == SyntheticKind::MrfPlus {
                (0.2, 0.65)
            } else {
                (0.6, 0.0)
            };
            let s1 = r1 * r1 + r2 * r2 - offset;
            [0.0, s1, -s1]
                .iter()
                .map(|&s| log_sigmoid(scale * s))
                .collect()
        }
    }
}

/// `+J` on the diagonal and `-J` elsewhere for the assortative kinds, negated
/// for the disassortative ones.
pub fn synthetic_log_coupling(kind: SyntheticKind, strength: f64) -> Matrix {
    let c = kind.num_classes();
    let sign = if kind.is_homophilous() { 1.0 } else { -1.0 };
    let mut m = Matrix::zeros(c, c);
    for a in 0..c {
        for b in 0..c {
            m.set(a, b, if a == b { sign * strength } else { -sign * strength });
        }
    }
    m
}

/// Ground-truth MRF for a synthetic lattice.
pub fn synthetic_spec(kind: SyntheticKind, rows: usize, cols: usize, strength: f64) -> Result<MrfSpec> {
    let graph = grid_graph(rows, cols)?;
    let c = kind.num_classes();
    let mut selfs = Matrix::zeros(rows * cols, c);
    for r in 0..rows {
        for col in 0..cols {
            let pot = synthetic_self_log_potential(
                kind,
                normalized_coordinate(r, rows),
                normalized_coordinate(col, cols),
            );
            selfs.row_mut(r * cols + col).copy_from_slice(&pot);
        }
    }
    MrfSpec::new(graph, selfs, synthetic_log_coupling(kind, strength))
}

/// Settings for [`generate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub kind: SyntheticKind,
    pub rows: usize,
    pub cols: usize,
    pub coupling: f64,
    pub seed: u64,
    pub burn_in: usize,
}

impl GenerateConfig {
    pub fn new(kind: SyntheticKind, rows: usize, cols: usize, coupling: f64, seed: u64) -> Self {
        GenerateConfig {
            kind,
            rows,
            cols,
            coupling,
            seed,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

/// Samples one lattice labelling (Metropolis for the Ising kinds, Gibbs for
/// the three-class kinds) and packages it with coordinate features and a
/// 30/20/50 split.
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<GraphBundle> {
    let spec = synthetic_spec(cfg.kind, cfg.rows, cfg.cols, cfg.coupling)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = random_config(&spec, &mut rng);
    let labels = if cfg.kind.is_ising() {
        metropolis_chain(&spec, init, 0, cfg.burn_in, &mut rng, |_| {})?
    } else {
        gibbs_chain(&spec, init, 0, cfg.burn_in, &mut rng, |_| {})?
    };

    let n = cfg.rows * cfg.cols;
    let mut features = Matrix::zeros(n, 2);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let row = features.row_mut(r * cfg.cols + c);
            row[0] = normalized_coordinate(r, cfg.rows);
            row[1] = normalized_coordinate(c, cfg.cols);
        }
    }
    let splits = split_nodes(n, SPLIT_RATIOS, cfg.seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let notes = format!(
        "synthetic {} {}x{} coupling={} seed={} burn_in={}",
        cfg.kind, cfg.rows, cfg.cols, cfg.coupling, cfg.seed, cfg.burn_in
    );
    GraphBundle::new(
        spec.graph().clone(),
        features,
        labels,
        cfg.kind.num_classes(),
        splits,
        notes,
    )
}

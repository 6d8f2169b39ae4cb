//! The trainable network: an MLP producing node self-beliefs and a learned
//! symmetric log coupling shared by every edge, followed by BP.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bp::{propagate, tree_bp_on_tape, Clamps, ComputationTree, TreeBp};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;

/// Whether inference conditions on known labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Inductive,
    Transductive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inductive" => Ok(Mode::Inductive),
            "transductive" => Ok(Mode::Transductive),
            other => Err(Error::input(format!(
                "unknown mode {other:?} (expected inductive or transductive)"
            ))),
        }
    }
}

/// How the degree weight `alpha = d^-beta` enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// `-log p'(y)` with `p' ∝ p^alpha` renormalized.
    Tempered,
    /// `-alpha * log p(y)`.
    Scaled,
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tempered" => Ok(LossWeighting::Tempered),
            "scaled" => Ok(LossWeighting::Scaled),
            other => Err(Error::input(format!(
                "unknown loss weighting {other:?} (expected tempered or scaled)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub bp_steps: usize,
    /// Dropout keep probability on hidden activations during training.
    pub keep_prob: f64,
    pub beta: f64,
    pub mode: Mode,
    pub loss_weighting: LossWeighting,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_width: 256,
            bp_steps: 5,
            keep_prob: 0.9,
            beta: 0.5,
            mode: Mode::Transductive,
            loss_weighting: LossWeighting::Tempered,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::input("hidden width must be positive"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::input(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::input(format!("beta {} must be finite and >= 0", self.beta)));
        }
        Ok(())
    }
}

/// One dense layer: `x W + b`, with `b` stored as a `1 x out` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    pub coupling_raw: Matrix,
}

impl ModelParams {
    /// Two hidden layers of `hidden` units. Weights are uniform in
    /// `±sqrt(6 / fan_in)`, biases and the raw coupling start at zero.
    pub fn init(feature_dim: usize, hidden: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if feature_dim == 0 || hidden == 0 || num_classes == 0 {
            return Err(Error::input("layer sizes must be positive"));
        }
        let dims = [feature_dim, hidden, hidden, num_classes];
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)).collect();
                Layer {
                    weight: Matrix::from_vec(w[0], w[1], data).expect("sized"),
                    bias: Matrix::zeros(1, w[1]),
                }
            })
            .collect();
        Ok(ModelParams {
            layers,
            coupling_raw: Matrix::zeros(num_classes, num_classes),
        })
    }

    /// Checks that layer shapes chain and end at the coupling size.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::input("model has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::shape(
                    "ModelParams",
                    format!("layer {i}: bias {:?} for weight {:?}", l.bias.shape(), l.weight.shape()),
                ));
            }
            if i > 0 && self.layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::shape(
                    "ModelParams",
                    format!(
                        "layer {i} expects {} inputs, previous layer gives {}",
                        l.weight.rows(),
                        self.layers[i - 1].weight.cols()
                    ),
                ));
            }
        }
        let c = self.num_classes();
        if self.coupling_raw.shape() != (c, c) {
            return Err(Error::shape(
                "ModelParams",
                format!("coupling {:?} for {c} output classes", self.coupling_raw.shape()),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// All tensors in a fixed order: layer weights and biases, then the coupling.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        out.push(&self.coupling_raw);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        out.push(&mut self.coupling_raw);
        out
    }

    /// Rebuilds parameters from tensors in [`ModelParams::tensors`] order.
    pub fn from_tensors(mut tensors: Vec<Matrix>) -> Result<Self> {
        if tensors.len() < 3 || tensors.len().is_multiple_of(2) {
            return Err(Error::input(format!("{} tensors do not form a model", tensors.len())));
        }
        let coupling_raw = tensors.pop().expect("non-empty");
        let mut layers = Vec::new();
        let mut it = tensors.into_iter();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(Layer { weight, bias });
        }
        let p = ModelParams { layers, coupling_raw };
        p.validate()?;
        Ok(p)
    }

    /// Records every tensor as a tape parameter.
    pub fn to_tape(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
            coupling_raw: tape.param(self.coupling_raw.clone()),
        }
    }
}

/// Tape handles for a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub coupling_raw: Var,
}

impl ParamVars {
    /// Same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.push(self.coupling_raw);
        out
    }
}

/// `(raw + raw^T) / 2`.
pub fn coupling(params: &ModelParams) -> Matrix {
    let t = params.coupling_raw.transpose();
    let data = params
        .coupling_raw
        .as_slice()
        .iter()
        .zip(t.as_slice())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Matrix::from_vec(t.rows(), t.cols(), data).expect("square")
}

pub fn coupling_on_tape(tape: &mut Tape, raw: Var) -> Result<Var> {
    let t = tape.transpose(raw);
    let s = tape.add(raw, t)?;
    Ok(tape.scale(s, 0.5))
}

/// Dropout settings for one forward pass.
pub struct Dropout<'a, R: Rng> {
    pub keep_prob: f64,
    pub rng: &'a mut R,
}

/// MLP over `features` followed by a row-wise log-softmax.
pub fn self_log_beliefs_on_tape<R: Rng>(
    tape: &mut Tape,
    vars: &ParamVars,
    features: Var,
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<Var> {
    let mut h = features;
    let last = vars.layers.len() - 1;
    for (i, &(w, b)) in vars.layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if i < last {
            h = tape.relu(h);
            if let Some(d) = dropout.as_mut() {
                h = tape.dropout(h, d.keep_prob, d.rng)?;
            }
        }
    }
    tape.log_softmax_rows(h)
}

fn check_features(features: &Matrix, params: &ModelParams) -> Result<()> {
    if features.cols() != params.feature_dim() {
        return Err(Error::shape(
            "self_log_beliefs",
            format!("features have {} columns, model expects {}", features.cols(), params.feature_dim()),
        ));
    }
    Ok(())
}

/// Self-beliefs for every row of `features`. Dropout applies when `dropout`
/// is given.
pub fn self_log_beliefs<R: Rng>(
    features: &Matrix,
    params: &ModelParams,
    dropout: Option<Dropout<'_, R>>,
) -> Result<Matrix> {
    check_features(features, params)?;
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let x = tape.constant(features.clone());
    let out = self_log_beliefs_on_tape(&mut tape, &vars, x, dropout)?;
    Ok(tape.value(out).clone())
}

/// Full-graph forward pass on the tape: MLP, then `bp_steps` BP iterations
/// with the given clamps. Returns the final log-beliefs.
pub fn forward_on_tape<R: Rng>(
    tape: &mut Tape,
    vars: &ParamVars,
    graph: &Graph,
    features: Var,
    bp_steps: usize,
    clamps: &Clamps,
    dropout: Option<Dropout<'_, R>>,
) -> Result<Var> {
    let selfs = self_log_beliefs_on_tape(tape, vars, features, dropout)?;
    if bp_steps == 0 && clamps.is_empty() {
        return Ok(selfs);
    }
    let h = coupling_on_tape(tape, vars.coupling_raw)?;
    let traj = propagate(tape, graph, selfs, h, bp_steps, clamps)?;
    Ok(*traj.last().expect("trajectory has step 0"))
}

/// Evaluation forward pass without dropout. `conditioned` must be empty in
/// inductive mode.
pub fn forward(
    graph: &Graph,
    features: &Matrix,
    params: &ModelParams,
    config: &ModelConfig,
    conditioned: &[(usize, usize)],
) -> Result<Matrix> {
    if config.mode == Mode::Inductive && !conditioned.is_empty() {
        return Err(Error::input("inductive inference takes no conditioning labels"));
    }
    check_features(features, params)?;
    if features.rows() != graph.num_nodes() {
        return Err(Error::shape(
            "forward",
            format!("{} feature rows for {} nodes", features.rows(), graph.num_nodes()),
        ));
    }
    let clamps = Clamps::new(graph.num_nodes(), params.num_classes(), conditioned)?;
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let x = tape.constant(features.clone());
    let out = forward_on_tape::<rand_chacha::ChaCha8Rng>(&mut tape, &vars, graph, x, config.bp_steps, &clamps, None)?;
    Ok(tape.value(out).clone())
}

/// Mini-batch forward on the tape: the MLP runs once over the distinct graph
/// nodes of `tree`, then tree BP yields one belief row per root.
#[allow(clippy::too_many_arguments)]
pub fn forward_tree_on_tape<R: Rng>(
    tape: &mut Tape,
    vars: &ParamVars,
    features: &Matrix,
    tree: &ComputationTree,
    weights: Option<&[f64]>,
    clamps: &Clamps,
    dropout: Option<Dropout<'_, R>>,
) -> Result<TreeBp> {
    let ids = tree.unique_nodes();
    let x = tape.constant(features.gather_rows(&ids));
    let selfs = self_log_beliefs_on_tape(tape, vars, x, dropout)?;
    let h = coupling_on_tape(tape, vars.coupling_raw)?;
    let lookup = |v: usize| ids.binary_search(&v).expect("tree node present");
    tree_bp_on_tape(tape, tree, selfs, &lookup, h, weights, clamps)
}

/// Degree weights `d^-beta`, with 1 for isolated nodes.
pub fn degree_weights(degrees: &[usize], beta: f64) -> Vec<f64> {
    degrees
        .iter()
        .map(|&d| if d == 0 { 1.0 } else { (d as f64).powf(-beta) })
        .collect()
}

/// Mean degree-reweighted negative log-likelihood of `labels` over the rows of
/// `log_beliefs` listed in `rows`. `alphas[i]` is the weight of `rows[i]`.
pub fn loss_on_tape(
    tape: &mut Tape,
    log_beliefs: Var,
    rows: &[usize],
    labels: &[usize],
    alphas: &[f64],
    weighting: LossWeighting,
) -> Result<Var> {
    if rows.is_empty() || rows.len() != labels.len() || rows.len() != alphas.len() {
        return Err(Error::input(format!(
            "loss over {} rows with {} labels and {} weights",
            rows.len(),
            labels.len(),
            alphas.len()
        )));
    }
    let picked = tape.gather_rows(log_beliefs, rows.into())?;
    let alphas: Arc<[f64]> = alphas.into();
    let per_node = match weighting {
        LossWeighting::Tempered => {
            let t = tape.scale_rows(picked, alphas)?;
            let t = tape.log_softmax_rows(t)?;
            tape.pick_per_row(t, labels.into())?
        }
        LossWeighting::Scaled => {
            let p = tape.pick_per_row(picked, labels.into())?;
            tape.scale_rows(p, alphas)?
        }
    };
    let total = tape.sum(per_node);
    Ok(tape.scale(total, -1.0 / rows.len() as f64))
}

/// Loss value over `node_ids` using the graph degrees.
pub fn loss(
    log_beliefs: &Matrix,
    labels: &[usize],
    node_ids: &[usize],
    graph: &Graph,
    beta: f64,
    weighting: LossWeighting,
) -> Result<f64> {
    let degrees = graph.degrees();
    if node_ids.iter().any(|&i| i >= degrees.len() || i >= labels.len()) {
        return Err(Error::input("loss node id out of range"));
    }
    let node_degrees: Vec<usize> = node_ids.iter().map(|&i| degrees[i]).collect();
    let node_labels: Vec<usize> = node_ids.iter().map(|&i| labels[i]).collect();
    let mut tape = Tape::new();
    let lb = tape.constant(log_beliefs.clone());
    let out = loss_on_tape(
        &mut tape,
        lb,
        node_ids,
        &node_labels,
        &degree_weights(&node_degrees, beta),
        weighting,
    )?;
    Ok(tape.value(out).get(0, 0))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(log_beliefs: &Matrix) -> Vec<usize> {
    log_beliefs
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Fraction of `nodes` whose predicted class equals the label.
pub fn accuracy(predictions: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes.iter().filter(|&&i| predictions[i] == labels[i]).count();
    hits as f64 / nodes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::bp::LOG_ZERO;
    use crate::graph::grid_graph;
    use crate::matrix::log_sum_exp;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn setup(seed: u64, n_rows: usize, hidden: usize, c: usize) -> (Graph, Matrix, ModelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid_graph(n_rows, 2).unwrap();
        let n = g.num_nodes();
        let data = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Matrix::from_vec(n, 3, data).unwrap();
        let mut p = ModelParams::init(3, hidden, c, &mut rng).unwrap();
        for v in p.coupling_raw.as_mut_slice() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for l in &mut p.layers {
            for v in l.bias.as_mut_slice() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        (g, x, p)
    }

    #[test]
    fn coupling_symmetrizes() {
        let mut p = ModelParams::init(2, 4, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.coupling_raw = Matrix::from_rows(&[[0.0, 2.0], [0.0, 0.0]]).unwrap();
        assert_eq!(coupling(&p), Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
        p.coupling_raw = Matrix::from_rows(&[[0.3, -1.0], [-1.0, 2.0]]).unwrap();
        assert_eq!(coupling(&p), p.coupling_raw);
    }

    #[test]
    fn coupling_gradient_splits_evenly() {
        // f(H) = H[0][1]; d f / d raw[0][1] = d f / d raw[1][0] = 1/2
        let raw = Matrix::from_rows(&[[0.1, 0.7], [-0.4, 0.2]]).unwrap();
        let mut tape = Tape::new();
        let r = tape.param(raw.clone());
        let h = coupling_on_tape(&mut tape, r).unwrap();
        let pick = tape.pick_per_row(h, vec![1, 1].into()).unwrap();
        let first = tape.gather_rows(pick, vec![0].into()).unwrap();
        let out = tape.sum(first);
        let g = tape.backward(out).unwrap().get(r);
        assert_eq!(g.as_slice(), &[0.0, 0.5, 0.5, 0.0]);
        let check = grad_check(
            |t, v| {
                let h = coupling_on_tape(t, v[0])?;
                let sq = t.mul(h, h)?;
                let w = t.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]])?);
                let m = t.mul(sq, w)?;
                Ok(t.sum(m))
            },
            &[raw],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-7);
    }

    #[test]
    fn self_beliefs_behaviour() {
        let (_, x, mut p) = setup(1, 4, 8, 3);
        let out = self_log_beliefs::<NoRng>(&x, &p, None).unwrap();
        for row in out.iter_rows() {
            assert!(log_sum_exp(row).abs() < 1e-12);
        }
        assert_eq!(out, self_log_beliefs::<NoRng>(&x, &p, None).unwrap());

        for t in p.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = self_log_beliefs::<NoRng>(&x, &p, None).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v + 3f64.ln()).abs() < 1e-15));
        assert!(self_log_beliefs::<NoRng>(&Matrix::zeros(2, 5), &p, None).is_err());
    }

    #[test]
    fn degenerate_equivalences() {
        let (g, x, mut p) = setup(2, 4, 8, 3);
        let mlp = self_log_beliefs::<NoRng>(&x, &p, None).unwrap();
        let cfg = |t| ModelConfig {
            bp_steps: t,
            mode: Mode::Inductive,
            ..ModelConfig::default()
        };
        assert_eq!(forward(&g, &x, &p, &cfg(0), &[]).unwrap(), mlp);
        p.coupling_raw = Matrix::zeros(3, 3);
        for t in [1, 3, 7] {
            assert!(forward(&g, &x, &p, &cfg(t), &[]).unwrap().max_abs_diff(&mlp) < 1e-12);
        }
        assert!(forward(&g, &x, &p, &cfg(2), &[(0, 1)]).is_err());
    }

    #[test]
    fn loss_examples() {
        let g = Graph::new(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        let uni = Matrix::filled(5, 2, -(2f64.ln()));
        for beta in [0.0, 0.5, 2.0] {
            for w in [LossWeighting::Tempered, LossWeighting::Scaled] {
                let l = loss(&uni, &[0, 1, 0, 1, 0], &[0, 1, 2], &g, beta, w).unwrap();
                if w == LossWeighting::Tempered {
                    assert!((l - 2f64.ln()).abs() < 1e-12);
                }
            }
        }
        let lb = Matrix::from_rows(&[[0.6f64.ln(), 0.4f64.ln()]; 5]).unwrap();
        let l = loss(&lb, &[0; 5], &[1], &g, 0.0, LossWeighting::Tempered).unwrap();
        assert!((l - 0.510_825_623_765_990_7).abs() < 1e-12);

        let lb = Matrix::from_rows(&[[0.9f64.ln(), 0.1f64.ln()]; 5]).unwrap();
        let l = loss(&lb, &[0; 5], &[0], &g, 0.5, LossWeighting::Tempered).unwrap();
        let (a, b) = (0.9f64.sqrt(), 0.1f64.sqrt());
        assert!((l + (a / (a + b)).ln()).abs() < 1e-12);
        // sqrt(0.9) / (sqrt(0.9) + sqrt(0.1)) is exactly 3/4
        assert!((l + 0.75f64.ln()).abs() < 1e-12);

        let l = loss(&lb, &[0; 5], &[0], &g, 0.5, LossWeighting::Scaled).unwrap();
        assert!((l + 0.5 * 0.9f64.ln()).abs() < 1e-12);
        assert!(loss(&lb, &[0; 5], &[], &g, 0.5, LossWeighting::Scaled).is_err());
    }

    #[test]
    fn predict_rules() {
        let m = Matrix::from_rows(&[
            [0.6f64.ln(), 0.4f64.ln(), f64::NEG_INFINITY],
            [0.0, 0.0, -1.0],
            [LOG_ZERO, LOG_ZERO, 0.0],
        ])
        .unwrap();
        assert_eq!(predict(&m), vec![0, 0, 2]);
        assert_eq!(accuracy(&[0, 1, 2], &[0, 0, 2], &[0, 1, 2]), 2.0 / 3.0);
    }

    fn end_to_end_check(beta: f64, weighting: LossWeighting) -> f64 {
        let (g, x, p) = setup(5, 4, 6, 3);
        let labels = [0usize, 1, 2, 2, 1, 0, 1, 2];
        let clamps = Clamps::new(8, 3, &[(0, 0), (5, 0)]).unwrap();
        let rows = [1usize, 2, 3, 6, 7];
        let alphas = degree_weights(&rows.iter().map(|&i| g.degrees()[i]).collect::<Vec<_>>(), beta);
        let labs: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let tensors: Vec<Matrix> = p.tensors().into_iter().cloned().collect();
        let f = |tape: &mut Tape, v: &[Var]| {
            let vars = ParamVars {
                layers: v[..v.len() - 1].chunks(2).map(|c| (c[0], c[1])).collect(),
                coupling_raw: v[v.len() - 1],
            };
            let xv = tape.constant(x.clone());
            let out = forward_on_tape::<NoRng>(tape, &vars, &g, xv, 3, &clamps, None)?;
            loss_on_tape(tape, out, &rows, &labs, &alphas, weighting)
        };
        grad_check(f, &tensors, GradCheckOptions::default()).unwrap().max_rel_error
    }

    #[test]
    fn end_to_end_gradients() {
        for beta in [0.0, 0.5] {
            for w in [LossWeighting::Tempered, LossWeighting::Scaled] {
                let err = end_to_end_check(beta, w);
                assert!(err < 1e-4, "beta {beta} {w:?}: {err}");
            }
        }
    }

    #[test]
    fn tensor_round_trip() {
        let (_, _, p) = setup(3, 2, 5, 2);
        let q = ModelParams::from_tensors(p.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(p, q);
        let mut bad = p.clone();
        bad.layers[1].weight = Matrix::zeros(4, 5);
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn clamped_predictions_hold(seed in any::<u64>()) {
            let (g, x, p) = setup(seed, 5, 6, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<_> = (0..10).filter_map(|i| if rng.gen_bool(0.4) { Some((i, rng.gen_range(0..3))) } else { None }).collect();
            let cfg = ModelConfig { bp_steps: 4, hidden_width: 6, ..ModelConfig::default() };
            let pred = predict(&forward(&g, &x, &p, &cfg, &pairs).unwrap());
            for &(i, k) in &pairs {
                prop_assert_eq!(pred[i], k);
            }
        }

        #[test]
        fn predict_shift_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 12), shift in -100.0f64..100.0) {
            let m = Matrix::from_vec(4, 3, vals).unwrap();
            prop_assert_eq!(predict(&m), predict(&m.map(|v| v + shift)));
        }
    }
}

//! Optimization: AdamW, full-batch and mini-batch training loops, and the
//! neighbour importance-sampling machinery (optimal distribution, unbiased
//! estimator, Exp3 and the variance diagnostics).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bp::{run_bp, sample_forest, Clamps, ComputationTree, NeighborSampler, UniformSampler};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::GraphBundle;
use crate::matrix::{log_sum_exp, Matrix};
use crate::model::{
    accuracy, coupling, degree_weights, forward, forward_on_tape, forward_tree_on_tape, loss_on_tape,
    predict, self_log_beliefs, Dropout, Mode, ModelConfig, ModelParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2.5e-4,
        }
    }
}

/// Moment estimates for every parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub step: u64,
}

impl OptimState {
    pub fn new(config: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        OptimState {
            config,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn for_params(config: AdamWConfig, params: &ModelParams) -> Self {
        let shapes: Vec<_> = params.tensors().iter().map(|m| m.shape()).collect();
        OptimState::new(config, &shapes)
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update.
pub fn adamw_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].as_mut_slice();
        let v = state.second[i].as_mut_slice();
        for (k, (x, &gk)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            *x -= lr * weight_decay * *x;
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Uniform,
    Exp3,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Sampling::Uniform),
            "exp3" => Ok(Sampling::Exp3),
            other => Err(Error::input(format!(
                "unknown sampling {other:?} (expected uniform or exp3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Roots per mini-batch step.
    pub batch_size: usize,
    pub fanout: usize,
    pub sampling: Sampling,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Also condition on validation labels during transductive evaluation.
    pub eval_clamp_val: bool,
    /// Record a variance report after every mini-batch epoch.
    pub track_variance: bool,
    /// Magnitude cap on importance-weighted Exp3 losses.
    pub exp3_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 256,
            fanout: 5,
            sampling: Sampling::Uniform,
            seed: 0,
            optimizer: AdamWConfig::default(),
            eval_clamp_val: false,
            track_variance: false,
            exp3_clip: 1e4,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.fanout == 0 {
            return Err(Error::input("epochs, batch size and fanout must be positive"));
        }
        if !(self.exp3_clip > 0.0) {
            return Err(Error::input("exp3 clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// One entry per epoch when variance tracking is on.
    pub variance: Vec<VarianceStats>,
    /// Final per-node Exp3 states (mini-batch training with Exp3 only).
    pub exp3: Vec<Exp3State>,
}

/// Labels conditioned on during evaluation.
pub fn eval_clamps(bundle: &GraphBundle, mode: Mode, include_val: bool) -> Vec<(usize, usize)> {
    match mode {
        Mode::Inductive => Vec::new(),
        Mode::Transductive => {
            let s = bundle.splits();
            let mut nodes = s.train.clone();
            if include_val {
                nodes.extend(&s.val);
            }
            bundle.label_pairs(&nodes)
        }
    }
}

/// Validation and test accuracy under the evaluation protocol.
pub fn evaluate(
    bundle: &GraphBundle,
    params: &ModelParams,
    config: &ModelConfig,
    include_val: bool,
) -> Result<(f64, f64)> {
    let clamps = eval_clamps(bundle, config.mode, include_val);
    let lb = forward(bundle.graph(), bundle.features(), params, config, &clamps)?;
    let pred = predict(&lb);
    let s = bundle.splits();
    Ok((
        accuracy(&pred, bundle.labels(), &s.val),
        accuracy(&pred, bundle.labels(), &s.test),
    ))
}

fn check_setup(bundle: &GraphBundle, params: &ModelParams, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<()> {
    mcfg.validate()?;
    tcfg.validate()?;
    if bundle.splits().train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    if params.feature_dim() != bundle.feature_dim() || params.num_classes() != bundle.num_classes() {
        return Err(Error::shape(
            "train",
            format!(
                "model maps {} features to {} classes, bundle has {} features and {} classes",
                params.feature_dim(),
                params.num_classes(),
                bundle.feature_dim(),
                bundle.num_classes()
            ),
        ));
    }
    Ok(())
}

fn initial_params(
    bundle: &GraphBundle,
    mcfg: &ModelConfig,
    init: Option<&ModelParams>,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    match init {
        Some(p) => Ok(p.clone()),
        None => ModelParams::init(bundle.feature_dim(), mcfg.hidden_width, bundle.num_classes(), rng),
    }
}

/// Splits the training nodes into a conditioned half and a loss half.
/// Inductive mode conditions on nothing.
fn conditioning_split(train: &[usize], mode: Mode, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    match mode {
        Mode::Inductive => (Vec::new(), train.to_vec()),
        Mode::Transductive => {
            let mut order = train.to_vec();
            order.shuffle(rng);
            let loss_nodes = order.split_off(order.len() / 2);
            (order, loss_nodes)
        }
    }
}

struct Checkpoint {
    best: Option<(f64, usize, ModelParams)>,
}

impl Checkpoint {
    fn offer(&mut self, val_acc: f64, epoch: usize, params: &ModelParams) {
        if self.best.as_ref().is_none_or(|b| val_acc > b.0) {
            self.best = Some((val_acc, epoch, params.clone()));
        }
    }
}

/// Full-graph training. Each step draws a fresh conditioning split in
/// transductive mode; evaluation after each step picks the checkpoint.
pub fn train_full_batch(
    bundle: &GraphBundle,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<&ModelParams>,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut params = initial_params(bundle, mcfg, init, &mut rng)?;
    check_setup(bundle, &params, mcfg, tcfg)?;
    let graph = bundle.graph();
    let degrees = graph.degrees();
    let mut opt = OptimState::for_params(tcfg.optimizer, &params);
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut ckpt = Checkpoint { best: None };

    for epoch in 0..tcfg.epochs {
        let (clamped, loss_nodes) = conditioning_split(&bundle.splits().train, mcfg.mode, &mut rng);
        let clamps = Clamps::new(graph.num_nodes(), bundle.num_classes(), &bundle.label_pairs(&clamped))?;
        let labels: Vec<usize> = loss_nodes.iter().map(|&i| bundle.labels()[i]).collect();
        let alphas = degree_weights(&loss_nodes.iter().map(|&i| degrees[i]).collect::<Vec<_>>(), mcfg.beta);

        let mut tape = Tape::new();
        let vars = params.to_tape(&mut tape);
        let x = tape.constant(bundle.features().clone());
        let dropout = Dropout {
            keep_prob: mcfg.keep_prob,
            rng: &mut rng,
        };
        let lb = forward_on_tape(&mut tape, &vars, graph, x, mcfg.bp_steps, &clamps, Some(dropout))?;
        let loss = loss_on_tape(&mut tape, lb, &loss_nodes, &labels, &alphas, mcfg.loss_weighting)?;
        let loss_value = tape.value(loss).get(0, 0);
        let pred = predict(tape.value(lb));
        let train_acc = accuracy(&pred, bundle.labels(), &loss_nodes);
        let grads = tape.backward(loss)?;
        let grads: Vec<Matrix> = vars.vars().into_iter().map(|v| grads.get(v)).collect();
        drop(tape);
        adamw_step(&mut params.tensors_mut(), &grads, &mut opt)?;

        let (val_acc, test_acc) = evaluate(bundle, &params, mcfg, tcfg.eval_clamp_val)?;
        ckpt.offer(val_acc, epoch, &params);
        history.push(EpochRecord {
            epoch,
            loss: loss_value,
            train_acc,
            val_acc,
            test_acc,
        });
    }
    let (_, best_epoch, params) = ckpt.best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        history,
        variance: Vec::new(),
        exp3: Vec::new(),
    })
}

/// Per-node Exp3 state over the node's neighbours (arms in ascending id order).
#[derive(Debug, Clone, PartialEq)]
pub struct Exp3State {
    log_weights: Vec<f64>,
    cumulative_sq_loss: f64,
    updates: u64,
    clip: f64,
}

/// Exploration mass mixed uniformly into Exp3 probabilities.
pub const EXP3_EXPLORATION: f64 = 0.01;

/// Floor for normalized log-weights so weights stay positive.
const LOG_WEIGHT_FLOOR: f64 = -700.0;

impl Exp3State {
    pub fn new(num_arms: usize, clip: f64) -> Self {
        let lw = if num_arms == 0 { 0.0 } else { -(num_arms as f64).ln() };
        Exp3State {
            log_weights: vec![lw; num_arms],
            cumulative_sq_loss: 0.0,
            updates: 0,
            clip,
        }
    }

    pub fn num_arms(&self) -> usize {
        self.log_weights.len()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// `(1 - gamma) w / sum(w) + gamma / K`.
    pub fn probabilities(&self) -> Vec<f64> {
        let k = self.num_arms() as f64;
        let lse = log_sum_exp(&self.log_weights);
        self.log_weights
            .iter()
            .map(|w| (1.0 - EXP3_EXPLORATION) * (w - lse).exp() + EXP3_EXPLORATION / k)
            .collect()
    }

    /// Current learning rate for a step that adds `sq_loss` to the running sum.
    fn rate(&self, sq_loss: f64) -> f64 {
        let k = self.num_arms() as f64;
        (k.ln() / (self.cumulative_sq_loss + sq_loss).max(1.0)).sqrt()
    }
}

/// Exp3 update after observing `message` (log-message vector) from `arm`,
/// which was drawn with probability `prob`. The loss is
/// `-||message|| / prob^2`, divided again by `prob` for partial information
/// and clipped to the state's limit.
pub fn exp3_update_with_prob(state: &mut Exp3State, arm: usize, message: &[f64], prob: f64) -> Result<()> {
    if arm >= state.num_arms() {
        return Err(Error::input(format!("arm {arm} of {}", state.num_arms())));
    }
    if !(prob > 0.0 && prob <= 1.0) {
        return Err(Error::input(format!("sampling probability {prob} outside (0, 1]")));
    }
    let norm = message.iter().map(|x| x * x).sum::<f64>().sqrt();
    let loss = (-norm / (prob * prob * prob)).clamp(-state.clip, state.clip);
    let eta = state.rate(loss * loss);
    state.cumulative_sq_loss += loss * loss;
    state.updates += 1;
    state.log_weights[arm] -= eta * loss;
    let lse = log_sum_exp(&state.log_weights);
    for w in &mut state.log_weights {
        *w = (*w - lse).max(LOG_WEIGHT_FLOOR);
    }
    Ok(())
}

/// [`exp3_update_with_prob`] with the state's own probability for `arm`.
pub fn exp3_update(state: &mut Exp3State, arm: usize, message: &[f64]) -> Result<()> {
    let p = state
        .probabilities()
        .get(arm)
        .copied()
        .ok_or_else(|| Error::input(format!("arm {arm} of {}", state.num_arms())))?;
    exp3_update_with_prob(state, arm, message, p)
}

/// Samples neighbours from per-node Exp3 distributions restricted to the
/// candidates, with replacement, weighting each draw by `1 / (avail * p)`.
pub struct Exp3Sampler<'a, R: Rng> {
    pub graph: &'a Graph,
    pub states: &'a [Exp3State],
    pub rng: &'a mut R,
}

impl<R: Rng> NeighborSampler for Exp3Sampler<'_, R> {
    fn choose(&mut self, node: usize, candidates: &[usize], fanout: usize, out: &mut Vec<(usize, f64)>) {
        if candidates.len() <= fanout {
            out.extend(candidates.iter().map(|&j| (j, 1.0)));
            return;
        }
        let (probs, _) = restricted_probs(self.graph, &self.states[node], node, candidates);
        let avail = candidates.len() as f64;
        for _ in 0..fanout {
            let u: f64 = self.rng.gen();
            let mut cum = 0.0;
            let mut pick = candidates.len() - 1;
            for (k, &p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    pick = k;
                    break;
                }
            }
            out.push((candidates[pick], 1.0 / (avail * probs[pick])));
        }
    }
}

/// Exp3 probabilities of `node` renormalized over `candidates`, plus each
/// candidate's arm index.
fn restricted_probs(graph: &Graph, state: &Exp3State, node: usize, candidates: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nbrs = graph.neighbor_ids(node);
    let full = state.probabilities();
    let arms: Vec<usize> = candidates
        .iter()
        .map(|j| nbrs.binary_search(j).expect("candidate is a neighbour"))
        .collect();
    let total: f64 = arms.iter().map(|&a| full[a]).sum();
    (arms.iter().map(|&a| full[a] / total).collect(), arms)
}

/// Feeds the messages of subsampled tree edges back into the Exp3 states.
/// The forest was drawn before any of these updates, so every loss uses the
/// probability from the states as they were at sampling time.
fn exp3_feedback(
    graph: &Graph,
    tree: &ComputationTree,
    messages: &[Option<Matrix>],
    fanout: usize,
    states: &mut [Exp3State],
) -> Result<()> {
    let nodes = tree.nodes();
    let mut updates = Vec::new();
    for l in 1..tree.num_levels() {
        let range = tree.level(l);
        if messages[l].is_none() {
            continue;
        }
        for t in range.clone() {
            let child = nodes[t];
            let parent = nodes[child.parent.expect("non-root")];
            let exclude = parent.parent.map(|q| nodes[q].node);
            let candidates: Vec<usize> = graph
                .neighbor_ids(parent.node)
                .iter()
                .copied()
                .filter(|&j| Some(j) != exclude)
                .collect();
            if candidates.len() <= fanout {
                continue;
            }
            let (probs, arms) = restricted_probs(graph, &states[parent.node], parent.node, &candidates);
            let k = candidates.binary_search(&child.node).expect("child among candidates");
            updates.push((parent.node, arms[k], l, t - range.start, probs[k]));
        }
    }
    for (node, arm, l, row, prob) in updates {
        let msgs = messages[l].as_ref().expect("level has messages");
        exp3_update_with_prob(&mut states[node], arm, msgs.row(row), prob)?;
    }
    Ok(())
}

/// Mini-batch training over sampled computation trees of depth
/// `mcfg.bp_steps`. Each epoch draws a conditioning split (transductive
/// mode), then visits the loss nodes in shuffled batches. Evaluation uses
/// full-graph BP.
pub fn train_mini_batch(
    bundle: &GraphBundle,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<&ModelParams>,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut params = initial_params(bundle, mcfg, init, &mut rng)?;
    check_setup(bundle, &params, mcfg, tcfg)?;
    let graph = bundle.graph();
    let degrees = graph.degrees();
    let mut opt = OptimState::for_params(tcfg.optimizer, &params);
    let mut exp3: Vec<Exp3State> = degrees.iter().map(|&d| Exp3State::new(d, tcfg.exp3_clip)).collect();
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut variance = Vec::new();
    let mut ckpt = Checkpoint { best: None };

    for epoch in 0..tcfg.epochs {
        let (clamped, mut loss_nodes) = conditioning_split(&bundle.splits().train, mcfg.mode, &mut rng);
        let clamps = Clamps::new(graph.num_nodes(), bundle.num_classes(), &bundle.label_pairs(&clamped))?;
        loss_nodes.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in loss_nodes.chunks(tcfg.batch_size) {
            let tree = match tcfg.sampling {
                Sampling::Uniform => {
                    sample_forest(graph, batch, mcfg.bp_steps, tcfg.fanout, &mut UniformSampler { rng: &mut rng })?
                }
                Sampling::Exp3 => sample_forest(
                    graph,
                    batch,
                    mcfg.bp_steps,
                    tcfg.fanout,
                    &mut Exp3Sampler {
                        graph,
                        states: &exp3,
                        rng: &mut rng,
                    },
                )?,
            };
            let weights = match tcfg.sampling {
                Sampling::Uniform => None,
                Sampling::Exp3 => Some(tree.weights()),
            };
            let labels: Vec<usize> = batch.iter().map(|&i| bundle.labels()[i]).collect();
            let alphas = degree_weights(&batch.iter().map(|&i| degrees[i]).collect::<Vec<_>>(), mcfg.beta);
            let rows: Vec<usize> = (0..batch.len()).collect();

            let mut tape = Tape::new();
            let vars = params.to_tape(&mut tape);
            let dropout = Dropout {
                keep_prob: mcfg.keep_prob,
                rng: &mut rng,
            };
            let out = forward_tree_on_tape(
                &mut tape,
                &vars,
                bundle.features(),
                &tree,
                weights.as_deref(),
                &clamps,
                Some(dropout),
            )?;
            let loss = loss_on_tape(&mut tape, out.roots, &rows, &labels, &alphas, mcfg.loss_weighting)?;
            loss_sum += tape.value(loss).get(0, 0) * batch.len() as f64;
            let pred = predict(tape.value(out.roots));
            hits += pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
            if tcfg.sampling == Sampling::Exp3 {
                let msgs: Vec<Option<Matrix>> = out
                    .messages
                    .iter()
                    .map(|m| m.map(|v| tape.value(v).clone()))
                    .collect();
                exp3_feedback(graph, &tree, &msgs, tcfg.fanout, &mut exp3)?;
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<Matrix> = vars.vars().into_iter().map(|v| grads.get(v)).collect();
            drop(tape);
            adamw_step(&mut params.tensors_mut(), &grads, &mut opt)?;
        }

        let (val_acc, test_acc) = evaluate(bundle, &params, mcfg, tcfg.eval_clamp_val)?;
        ckpt.offer(val_acc, epoch, &params);
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / loss_nodes.len() as f64,
            train_acc: hits as f64 / loss_nodes.len() as f64,
            val_acc,
            test_acc,
        });
        if tcfg.track_variance {
            let clamps = eval_clamps(bundle, mcfg.mode, tcfg.eval_clamp_val);
            variance.push(variance_report(bundle, &params, mcfg, &exp3, &clamps)?);
        }
    }
    let (_, best_epoch, params) = ckpt.best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        history,
        variance,
        exp3: if tcfg.sampling == Sampling::Exp3 { exp3 } else { Vec::new() },
    })
}

/// `p*_j ∝ ||x_j||` over the rows of `messages`; uniform when every norm is 0.
pub fn optimal_sampling_distribution(messages: &Matrix) -> Result<Vec<f64>> {
    if messages.rows() == 0 {
        return Err(Error::input("need at least one neighbour"));
    }
    let norms: Vec<f64> = messages
        .iter_rows()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        let k = norms.len() as f64;
        return Ok(vec![1.0 / k; norms.len()]);
    }
    Ok(norms.into_iter().map(|n| n / total).collect())
}

/// `sum over sampled j of x_j / (|N| p_j)`.
pub fn importance_estimate(
    messages: &Matrix,
    sampled: &[usize],
    probs: &[f64],
    neighborhood_size: usize,
) -> Result<Vec<f64>> {
    if probs.len() != messages.rows() {
        return Err(Error::shape(
            "importance_estimate",
            format!("{} probabilities for {} neighbours", probs.len(), messages.rows()),
        ));
    }
    let mut z = vec![0.0; messages.cols()];
    for &j in sampled {
        let p = *probs
            .get(j)
            .ok_or_else(|| Error::input(format!("sampled index {j} out of range")))?;
        if !(p > 0.0) {
            return Err(Error::input(format!("sampled index {j} has probability {p}")));
        }
        let scale = 1.0 / (neighborhood_size as f64 * p);
        for (acc, x) in z.iter_mut().zip(messages.row(j)) {
            *acc += x * scale;
        }
    }
    Ok(z)
}

/// Summed-over-classes variance of the single-draw estimator `x_j / p_j`:
/// `sum_y [sum_j x_j(y)^2 / p_j - (sum_j x_j(y))^2]`. Constant factors that
/// depend only on the neighbourhood size are dropped.
pub fn estimator_variance(messages: &Matrix, probs: &[f64]) -> f64 {
    (0..messages.cols())
        .map(|y| {
            let (mut second, mut mean) = (0.0, 0.0);
            for (j, &p) in probs.iter().enumerate() {
                let x = messages.get(j, y);
                second += x * x / p;
                mean += x;
            }
            second - mean * mean
        })
        .sum()
}

/// Node-averaged variance ratios for one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    /// Var(importance) / Var(optimal).
    pub importance_vs_optimal: f64,
    /// Var(uniform) / Var(optimal).
    pub uniform_vs_optimal: f64,
    /// Var(importance) / Var(uniform).
    pub rho: f64,
    pub nodes: usize,
}

fn ratio(a: f64, b: f64) -> f64 {
    let tol = 1e-12 * a.abs().max(b.abs()).max(1.0);
    if b.abs() <= tol {
        1.0
    } else {
        a / b
    }
}

/// Compares the Exp3 distributions with uniform and optimal sampling, using
/// the messages of full-graph BP after `config.bp_steps` steps. Ratios are
/// averaged over nodes with at least two neighbours.
pub fn variance_report(
    bundle: &GraphBundle,
    params: &ModelParams,
    config: &ModelConfig,
    exp3: &[Exp3State],
    clamped: &[(usize, usize)],
) -> Result<VarianceStats> {
    let graph = bundle.graph();
    if exp3.len() != graph.num_nodes() {
        return Err(Error::shape("variance_report", "one Exp3 state per node required"));
    }
    let selfs = self_log_beliefs::<ChaCha8Rng>(bundle.features(), params, None)?;
    let (state, _) = run_bp(graph, &selfs, &coupling(params), config.bp_steps.max(1), clamped, false)?;
    let mut acc = (0.0, 0.0, 0.0);
    let mut count = 0;
    for i in 0..graph.num_nodes() {
        let range = graph.edge_range(i);
        if range.len() < 2 {
            continue;
        }
        // incoming messages j -> i are the twins of i's outgoing edges
        let rows: Vec<usize> = range.map(|e| graph.reverse(e)).collect();
        let x = state.log_messages.gather_rows(&rows);
        let k = rows.len();
        let v_opt = estimator_variance(&x, &optimal_sampling_distribution(&x)?);
        let v_uni = estimator_variance(&x, &vec![1.0 / k as f64; k]);
        let v_imp = estimator_variance(&x, &exp3[i].probabilities());
        acc.0 += ratio(v_imp, v_opt);
        acc.1 += ratio(v_uni, v_opt);
        acc.2 += ratio(v_imp, v_uni);
        count += 1;
    }
    let n = count.max(1) as f64;
    Ok(VarianceStats {
        importance_vs_optimal: if count == 0 { 1.0 } else { acc.0 / n },
        uniform_vs_optimal: if count == 0 { 1.0 } else { acc.1 / n },
        rho: if count == 0 { 1.0 } else { acc.2 / n },
        nodes: count,
    })
}

//! Diagnostics around trained models and the inference engine: evaluation
//! with capped neighbourhoods, per-degree breakdowns, convergence traces and
//! the enumeration and sampler cross-checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bp::{residual_trace, run_bp, sample_forest, tree_bp, UniformSampler};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::GraphBundle;
use crate::matrix::{log_sum_exp, Matrix};
use crate::model::{accuracy, coupling, predict, self_log_beliefs, ModelConfig, ModelParams};
use crate::mrf::{exact_marginals, gibbs_sample, metropolis_sample, synthetic_spec, total_variation, MarginalCounter, MrfSpec, SyntheticKind};
use crate::train::eval_clamps;

/// Log-beliefs of `nodes` (one row each, same order) computed on computation
/// trees that keep at most `max_neighbors` uniformly drawn children per node.
pub fn capped_log_beliefs(
    bundle: &GraphBundle,
    params: &ModelParams,
    config: &ModelConfig,
    clamped: &[(usize, usize)],
    nodes: &[usize],
    max_neighbors: usize,
    seed: u64,
) -> Result<Matrix> {
    config.validate()?;
    let selfs = self_log_beliefs::<ChaCha8Rng>(bundle.features(), params, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = sample_forest(
        bundle.graph(),
        nodes,
        config.bp_steps,
        max_neighbors,
        &mut UniformSampler { rng: &mut rng },
    )?;
    tree_bp(&tree, &selfs, &coupling(params), None, clamped)
}

/// Accuracy and mean log-likelihood of the nodes sharing one degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeBucket {
    pub degree: usize,
    pub nodes: usize,
    pub accuracy: f64,
    pub mean_log_likelihood: f64,
}

/// Groups `nodes` by degree. Row `k` of `log_beliefs` belongs to `nodes[k]`.
pub fn degree_breakdown(
    bundle: &GraphBundle,
    log_beliefs: &Matrix,
    nodes: &[usize],
) -> Result<Vec<DegreeBucket>> {
    if log_beliefs.rows() != nodes.len() {
        return Err(Error::shape(
            "degree_breakdown",
            format!("{} belief rows for {} nodes", log_beliefs.rows(), nodes.len()),
        ));
    }
    let graph = bundle.graph();
    let labels = bundle.labels();
    let pred = predict(log_beliefs);
    let max_degree = graph.max_degree();
    let mut acc = vec![(0usize, 0usize, 0.0f64); max_degree + 1];
    for (k, &i) in nodes.iter().enumerate() {
        let d = graph.degree(i)?;
        let slot = &mut acc[d];
        slot.0 += 1;
        slot.1 += usize::from(pred[k] == labels[i]);
        slot.2 += log_beliefs.get(k, labels[i]);
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, (n, _, _))| *n > 0)
        .map(|(degree, (n, hits, ll))| DegreeBucket {
            degree,
            nodes: n,
            accuracy: hits as f64 / n as f64,
            mean_log_likelihood: ll / n as f64,
        })
        .collect())
}

/// One BP step of a convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub step: usize,
    pub residual: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Runs `max_steps` BP steps with the trained potentials under the
/// evaluation clamps and reports the residual to the last step and the
/// accuracies after every step (step 0 is the MLP output).
pub fn convergence_report(
    bundle: &GraphBundle,
    params: &ModelParams,
    config: &ModelConfig,
    max_steps: usize,
    include_val: bool,
) -> Result<Vec<ConvergenceRow>> {
    if max_steps == 0 {
        return Err(Error::input("convergence trace needs at least one step"));
    }
    let selfs = self_log_beliefs::<ChaCha8Rng>(bundle.features(), params, None)?;
    let clamps = eval_clamps(bundle, config.mode, include_val);
    let (_, traj) = run_bp(bundle.graph(), &selfs, &coupling(params), max_steps, &clamps, true)?;
    let residuals = residual_trace(&traj)?;
    let s = bundle.splits();
    Ok(traj
        .iter()
        .zip(residuals)
        .enumerate()
        .map(|(step, (lb, residual))| {
            let pred = predict(lb);
            ConvergenceRow {
                step,
                residual,
                train_acc: accuracy(&pred, bundle.labels(), &s.train),
                test_acc: accuracy(&pred, bundle.labels(), &s.test),
            }
        })
        .collect())
}

/// Worst BP-vs-enumeration gaps over random trees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeCheck {
    pub trials: usize,
    pub max_abs_diff: f64,
    pub max_abs_diff_clamped: f64,
}

/// Random labelled tree on `n` nodes: node `k` attaches to a uniformly
/// chosen earlier node, then ids are shuffled.
pub fn random_tree(n: usize, rng: &mut impl Rng) -> Result<Graph> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let edges: Vec<(usize, usize)> = (1..n).map(|k| (ids[rng.gen_range(0..k)], ids[k])).collect();
    Graph::new(n, &edges)
}

/// Longest shortest path, by breadth-first search from every node.
pub fn diameter(graph: &Graph) -> usize {
    let n = graph.num_nodes();
    let mut best = 0;
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for s in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            best = best.max(dist[u]);
            for &v in graph.neighbor_ids(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    best
}

fn random_spec(graph: Graph, c: usize, rng: &mut impl Rng) -> Result<MrfSpec> {
    let n = graph.num_nodes();
    let selfs = Matrix::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(-1.5..1.5)).collect())?;
    let mut h = Matrix::zeros(c, c);
    for a in 0..c {
        for b in a..c {
            let v = rng.gen_range(-1.0..1.0);
            h.set(a, b, v);
            h.set(b, a, v);
        }
    }
    MrfSpec::new(graph, selfs, h)
}

fn bp_marginals(spec: &MrfSpec, clamped: &[(usize, usize)]) -> Result<Matrix> {
    let mut selfs = spec.self_log_potentials().clone();
    for i in 0..selfs.rows() {
        let row = selfs.row_mut(i);
        let z = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= z);
    }
    let steps = diameter(spec.graph());
    let (state, _) = run_bp(spec.graph(), &selfs, spec.log_coupling(), steps, clamped, false)?;
    Ok(state.log_beliefs.map(f64::exp))
}

/// Compares BP run for `diameter` steps with exact enumeration on `trials`
/// random trees of `nodes` nodes, without and with random clamps.
pub fn tree_exactness_check(nodes: usize, classes: usize, trials: usize, seed: u64) -> Result<TreeCheck> {
    if nodes == 0 || classes < 2 {
        return Err(Error::input("need at least one node and two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut free, mut cond) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let spec = random_spec(random_tree(nodes, &mut rng)?, classes, &mut rng)?;
        free = free.max(bp_marginals(&spec, &[])?.max_abs_diff(&exact_marginals(&spec, &[])?));
        let mut clamped = Vec::new();
        for i in 0..nodes {
            if rng.gen_bool(0.3) {
                clamped.push((i, rng.gen_range(0..classes)));
            }
        }
        cond = cond.max(bp_marginals(&spec, &clamped)?.max_abs_diff(&exact_marginals(&spec, &clamped)?));
    }
    Ok(TreeCheck {
        trials,
        max_abs_diff: free,
        max_abs_diff_clamped: cond,
    })
}

/// Largest per-node total-variation distance between sampler and exact
/// marginals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerCheck {
    pub samples: usize,
    pub metropolis_max_tv: f64,
    pub gibbs_max_tv: f64,
}

/// Both samplers on a 3×3 Ising lattice with coupling `strength`.
pub fn sampler_fidelity_check(strength: f64, samples: usize, burn_in: usize, seed: u64) -> Result<SamplerCheck> {
    let spec = synthetic_spec(SyntheticKind::IsingPlus, 3, 3, strength)?;
    let exact = exact_marginals(&spec, &[])?;
    let max_tv = |draws: Vec<crate::mrf::LabelConfig>| {
        let mut counter = MarginalCounter::new(9, 2);
        draws.iter().for_each(|d| counter.observe(d.as_slice()));
        let m = counter.marginals();
        (0..9).map(|i| total_variation(m.row(i), exact.row(i))).fold(0.0, f64::max)
    };
    Ok(SamplerCheck {
        samples,
        metropolis_max_tv: max_tv(metropolis_sample(&spec, samples, burn_in, seed)?),
        gibbs_max_tv: max_tv(gibbs_sample(&spec, samples, burn_in, seed.wrapping_add(1))?),
    })
}

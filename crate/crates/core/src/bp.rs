//! Log-space loopy belief propagation.
//!
//! Messages live on directed edges (`m[e]` is the message from `src(e)` to
//! `dst(e)`) and every row is kept log-normalized. The schedule is
//! synchronous: step `t` reads only step `t - 1` state. Clamped nodes carry a
//! one-hot belief (`LOG_ZERO` off-class) that is re-imposed after each step.
//!
//! Two implementations share these semantics: [`bp_step`]/[`run_bp`] work on
//! plain matrices, and [`propagate`] records the same computation on a
//! [`Tape`] so it can be differentiated. [`tree_bp`] evaluates the unrolled
//! computation tree of a root, optionally subsampled, which is what
//! mini-batch training uses.

use std::ops::Range;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::{log_sum_exp, Matrix};

/// Finite stand-in for `log 0` in clamped rows.
pub const LOG_ZERO: f64 = -1e9;

/// Validated `(node, class)` conditioning set in a form the kernels use.
#[derive(Debug, Clone)]
pub struct Clamps {
    pairs: Vec<(usize, usize)>,
    rows: Arc<[usize]>,
    values: Matrix,
    by_node: Vec<Option<usize>>,
}

impl Clamps {
    pub fn new(num_nodes: usize, num_classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut by_node = vec![None; num_nodes];
        for &(i, k) in pairs {
            if i >= num_nodes || k >= num_classes {
                return Err(Error::input(format!(
                    "clamp ({i}, {k}) outside {num_nodes} nodes / {num_classes} classes"
                )));
            }
            if matches!(by_node[i], Some(prev) if prev != k) {
                return Err(Error::input(format!("node {i} clamped to two classes")));
            }
            by_node[i] = Some(k);
        }
        let pairs: Vec<(usize, usize)> = by_node
            .iter()
            .enumerate()
            .filter_map(|(i, k)| k.map(|k| (i, k)))
            .collect();
        let rows: Arc<[usize]> = pairs.iter().map(|p| p.0).collect();
        let mut values = Matrix::filled(pairs.len(), num_classes, LOG_ZERO);
        for (r, &(_, k)) in pairs.iter().enumerate() {
            values.set(r, k, 0.0);
        }
        Ok(Clamps {
            pairs,
            rows,
            values,
            by_node,
        })
    }

    pub fn none(num_nodes: usize, num_classes: usize) -> Self {
        Clamps {
            pairs: Vec::new(),
            rows: Arc::from(Vec::new()),
            values: Matrix::zeros(0, num_classes),
            by_node: vec![None; num_nodes],
        }
    }

    /// Sorted by node id.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn class_of(&self, node: usize) -> Option<usize> {
        self.by_node.get(node).copied().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn apply(&self, m: &mut Matrix) {
        for (r, &i) in self.rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(self.values.row(r));
        }
    }
}

fn one_hot_row(num_classes: usize, k: usize) -> Vec<f64> {
    let mut row = vec![LOG_ZERO; num_classes];
    row[k] = 0.0;
    row
}

fn normalize_row(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    row.iter_mut().for_each(|x| *x -= lse);
}

/// Beliefs and messages after some number of synchronous steps.
#[derive(Debug, Clone)]
pub struct BeliefState {
    pub log_self_beliefs: Matrix,
    pub log_beliefs: Matrix,
    pub log_messages: Matrix,
    pub iteration: usize,
    pub clamped: Vec<(usize, usize)>,
}

fn check_inputs(graph: &Graph, log_self_beliefs: &Matrix, log_coupling: Option<&Matrix>) -> Result<()> {
    let (n, c) = log_self_beliefs.shape();
    if n != graph.num_nodes() || c == 0 {
        return Err(Error::shape(
            "bp",
            format!("self beliefs {n}x{c} for {} nodes", graph.num_nodes()),
        ));
    }
    if let Some(h) = log_coupling {
        if h.shape() != (c, c) {
            return Err(Error::shape(
                "bp",
                format!("coupling {:?} for {c} classes", h.shape()),
            ));
        }
        if !h.all_finite() {
            return Err(Error::Numeric("coupling has non-finite entries".into()));
        }
    }
    for (i, row) in log_self_beliefs.iter_rows().enumerate() {
        if row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) || log_sum_exp(row).abs() > 1e-6 {
            return Err(Error::input(format!("self-belief row {i} is not log-normalized")));
        }
    }
    Ok(())
}

/// Messages start uniform (`-ln c`); beliefs start at the self-beliefs with
/// clamped rows replaced by one-hot rows.
pub fn init_state(
    graph: &Graph,
    log_self_beliefs: &Matrix,
    clamped: &[(usize, usize)],
) -> Result<BeliefState> {
    check_inputs(graph, log_self_beliefs, None)?;
    let c = log_self_beliefs.cols();
    let clamps = Clamps::new(graph.num_nodes(), c, clamped)?;
    let mut beliefs = log_self_beliefs.clone();
    clamps.apply(&mut beliefs);
    Ok(BeliefState {
        log_self_beliefs: log_self_beliefs.clone(),
        log_beliefs: beliefs,
        log_messages: Matrix::filled(graph.num_directed_edges(), c, -(c as f64).ln()),
        iteration: 0,
        clamped: clamps.pairs().to_vec(),
    })
}

/// One synchronous update of every message and belief.
pub fn bp_step(graph: &Graph, state: &BeliefState, log_coupling: &Matrix) -> Result<BeliefState> {
    let (n, c) = state.log_beliefs.shape();
    if n != graph.num_nodes() || state.log_messages.shape() != (graph.num_directed_edges(), c) {
        return Err(Error::shape("bp_step", "state does not match graph"));
    }
    if log_coupling.shape() != (c, c) {
        return Err(Error::shape(
            "bp_step",
            format!("coupling {:?} for {c} classes", log_coupling.shape()),
        ));
    }
    let old_b = &state.log_beliefs;
    let old_m = &state.log_messages;
    let mut msgs = Matrix::zeros(graph.num_directed_edges(), c);
    let mut cavity = vec![0.0; c];
    let mut buf = vec![0.0; c];
    for e in 0..graph.num_directed_edges() {
        let (s, _) = graph.edge(e);
        let back = old_m.row(graph.reverse(e));
        for (k, x) in cavity.iter_mut().enumerate() {
            *x = old_b.get(s, k) - back[k];
        }
        let out = msgs.row_mut(e);
        for (yi, o) in out.iter_mut().enumerate() {
            for (yj, b) in buf.iter_mut().enumerate() {
                *b = log_coupling.get(yj, yi) + cavity[yj];
            }
            *o = log_sum_exp(&buf);
        }
        normalize_row(out);
    }

    let mut beliefs = state.log_self_beliefs.clone();
    for e in 0..graph.num_directed_edges() {
        let d = graph.edge(e).1;
        let m = msgs.row(e).to_vec();
        for (b, x) in beliefs.row_mut(d).iter_mut().zip(m) {
            *b += x;
        }
    }
    for i in 0..n {
        normalize_row(beliefs.row_mut(i));
    }
    for &(i, k) in &state.clamped {
        beliefs.row_mut(i).copy_from_slice(&one_hot_row(c, k));
    }
    if !msgs.all_finite() || !beliefs.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite value at BP step {}",
            state.iteration + 1
        )));
    }
    Ok(BeliefState {
        log_self_beliefs: state.log_self_beliefs.clone(),
        log_beliefs: beliefs,
        log_messages: msgs,
        iteration: state.iteration + 1,
        clamped: state.clamped.clone(),
    })
}

/// Runs `steps` synchronous updates. When `keep_trajectory` is set the second
/// element holds the beliefs after every step, starting with step 0.
pub fn run_bp(
    graph: &Graph,
    log_self_beliefs: &Matrix,
    log_coupling: &Matrix,
    steps: usize,
    clamped: &[(usize, usize)],
    keep_trajectory: bool,
) -> Result<(BeliefState, Vec<Matrix>)> {
    check_inputs(graph, log_self_beliefs, Some(log_coupling))?;
    let mut state = init_state(graph, log_self_beliefs, clamped)?;
    let mut traj = Vec::new();
    if keep_trajectory {
        traj.push(state.log_beliefs.clone());
    }
    for _ in 0..steps {
        state = bp_step(graph, &state, log_coupling)?;
        if keep_trajectory {
            traj.push(state.log_beliefs.clone());
        }
    }
    Ok((state, traj))
}

/// `r(t)`: mean over nodes of the Euclidean distance, in probability space,
/// between the step-`t` beliefs and the last snapshot.
pub fn residual_trace(trajectory: &[Matrix]) -> Result<Vec<f64>> {
    if trajectory.len() < 2 {
        return Err(Error::input("residual trace needs at least two snapshots"));
    }
    let last = trajectory.last().expect("non-empty");
    let n = last.rows();
    if trajectory.iter().any(|m| m.shape() != last.shape()) {
        return Err(Error::shape("residual_trace", "snapshots differ in shape"));
    }
    Ok(trajectory
        .iter()
        .map(|snap| {
            let total: f64 = (0..n)
                .map(|i| {
                    snap.row(i)
                        .iter()
                        .zip(last.row(i))
                        .map(|(a, b)| (a.exp() - b.exp()).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            if n == 0 {
                0.0
            } else {
                total / n as f64
            }
        })
        .collect())
}

/// Records `steps` BP iterations on the tape, starting from `log_self` (an
/// `n x c` log-normalized variable) with the shared `log_coupling` (`c x c`).
/// Returns the beliefs after every step, the last being the output.
pub fn propagate(
    tape: &mut Tape,
    graph: &Graph,
    log_self: Var,
    log_coupling: Var,
    steps: usize,
    clamps: &Clamps,
) -> Result<Vec<Var>> {
    let (n, c) = tape.shape(log_self);
    if n != graph.num_nodes() || tape.shape(log_coupling) != (c, c) {
        return Err(Error::shape(
            "propagate",
            format!(
                "self beliefs {n}x{c}, coupling {:?}, {} nodes",
                tape.shape(log_coupling),
                graph.num_nodes()
            ),
        ));
    }
    let mut beliefs = tape.overwrite_rows(log_self, clamps.rows.clone(), &clamps.values)?;
    let mut trajectory = vec![beliefs];
    let edges = graph.num_directed_edges();
    let mut msgs = tape.constant(Matrix::filled(edges, c, -(c as f64).ln()));
    for _ in 0..steps {
        let at_src = tape.gather_rows(beliefs, graph.sources().clone())?;
        let back = tape.gather_rows(msgs, graph.reverse_index().clone())?;
        let cavity = tape.sub(at_src, back)?;
        let raw = tape.log_matmul(cavity, log_coupling)?;
        msgs = tape.log_softmax_rows(raw)?;
        let incoming = tape.segment_sum(msgs, graph.destinations().clone(), n)?;
        let unnorm = tape.add(log_self, incoming)?;
        let normed = tape.log_softmax_rows(unnorm)?;
        beliefs = tape.overwrite_rows(normed, clamps.rows.clone(), &clamps.values)?;
        trajectory.push(beliefs);
    }
    Ok(trajectory)
}

/// One node of an unrolled computation tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeNode {
    /// Graph node id.
    pub node: usize,
    /// Tree index of the parent; `None` for roots.
    pub parent: Option<usize>,
    /// Weight applied to this node's message at its parent.
    pub weight: f64,
}

/// Unrolled neighbourhoods of one or more roots, stored breadth first so each
/// level is a contiguous index range. Roots occupy level 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationTree {
    nodes: Vec<TreeNode>,
    levels: Vec<Range<usize>>,
}

impl ComputationTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn level(&self, l: usize) -> Range<usize> {
        self.levels.get(l).cloned().unwrap_or(0..0)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn roots(&self) -> Vec<usize> {
        self.nodes[self.level(0)].iter().map(|t| t.node).collect()
    }

    /// Per-tree-node weights in storage order.
    pub fn weights(&self) -> Vec<f64> {
        self.nodes.iter().map(|t| t.weight).collect()
    }

    /// Distinct graph ids in the tree, ascending.
    pub fn unique_nodes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.nodes.iter().map(|t| t.node).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Chooses which neighbours of a tree node to expand.
pub trait NeighborSampler {
    /// `candidates` excludes the tree parent. Pushes `(graph id, weight)`
    /// pairs onto `out`.
    fn choose(&mut self, node: usize, candidates: &[usize], fanout: usize, out: &mut Vec<(usize, f64)>);
}

/// Uniform sampling without replacement; unit weights.
pub struct UniformSampler<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> NeighborSampler for UniformSampler<'_, R> {
    fn choose(&mut self, _node: usize, candidates: &[usize], fanout: usize, out: &mut Vec<(usize, f64)>) {
        if candidates.len() <= fanout {
            out.extend(candidates.iter().map(|&j| (j, 1.0)));
        } else {
            let mut picks = sample(self.rng, candidates.len(), fanout).into_vec();
            picks.sort_unstable();
            out.extend(picks.into_iter().map(|p| (candidates[p], 1.0)));
        }
    }
}

/// Unrolls `depth` levels below each root, expanding at most `fanout`
/// neighbours per tree node and never the node's own tree parent.
pub fn sample_forest(
    graph: &Graph,
    roots: &[usize],
    depth: usize,
    fanout: usize,
    sampler: &mut impl NeighborSampler,
) -> Result<ComputationTree> {
    if fanout == 0 {
        return Err(Error::input("fanout must be at least 1"));
    }
    if let Some(&bad) = roots.iter().find(|&&r| r >= graph.num_nodes()) {
        return Err(Error::input(format!("root {bad} out of range")));
    }
    let mut nodes: Vec<TreeNode> = roots
        .iter()
        .map(|&r| TreeNode {
            node: r,
            parent: None,
            weight: 1.0,
        })
        .collect();
    let mut levels = vec![0..nodes.len()];
    let mut candidates = Vec::new();
    let mut picked = Vec::new();
    for _ in 0..depth {
        let prev = levels.last().expect("level 0 exists").clone();
        let start = nodes.len();
        for t in prev {
            let TreeNode { node, parent, .. } = nodes[t];
            let exclude = parent.map(|p| nodes[p].node);
            candidates.clear();
            candidates.extend(graph.neighbor_ids(node).iter().copied().filter(|&j| Some(j) != exclude));
            picked.clear();
            sampler.choose(node, &candidates, fanout, &mut picked);
            nodes.extend(picked.iter().map(|&(j, w)| TreeNode {
                node: j,
                parent: Some(t),
                weight: w,
            }));
        }
        levels.push(start..nodes.len());
    }
    Ok(ComputationTree { nodes, levels })
}

/// Single-root tree with uniform neighbour sampling.
pub fn sample_tree(
    graph: &Graph,
    root: usize,
    depth: usize,
    fanout: usize,
    rng: &mut impl Rng,
) -> Result<ComputationTree> {
    sample_forest(graph, &[root], depth, fanout, &mut UniformSampler { rng })
}

/// Tape handles produced by [`tree_bp_on_tape`].
#[derive(Debug, Clone)]
pub struct TreeBp {
    /// One belief row per root.
    pub roots: Var,
    /// `messages[l]` holds the messages sent by level `l` to its parents, one
    /// row per node of that level; `None` for level 0.
    pub messages: Vec<Option<Var>>,
}

/// Records tree BP on the tape. `log_self` holds self-beliefs for the graph ids listed in
/// `row_of_node` order: row `row_of_node[v]` belongs to graph node `v`.
/// `weights` (one per tree node) scale child messages; `None` means 1.
pub fn tree_bp_on_tape(
    tape: &mut Tape,
    tree: &ComputationTree,
    log_self: Var,
    row_of_node: &dyn Fn(usize) -> usize,
    log_coupling: Var,
    weights: Option<&[f64]>,
    clamps: &Clamps,
) -> Result<TreeBp> {
    let c = tape.shape(log_coupling).0;
    if tape.shape(log_self).1 != c || tape.shape(log_coupling).1 != c {
        return Err(Error::shape("tree_bp", "class counts differ"));
    }
    if let Some(w) = weights {
        if w.len() != tree.len() {
            return Err(Error::shape(
                "tree_bp",
                format!("{} weights for {} tree nodes", w.len(), tree.len()),
            ));
        }
    }
    let mut messages = vec![None; tree.num_levels()];
    let mut child_msgs: Option<(Var, Range<usize>)> = None;
    for l in (0..tree.num_levels()).rev() {
        let range = tree.level(l);
        let rows: Arc<[usize]> = tree.nodes[range.clone()].iter().map(|t| row_of_node(t.node)).collect();
        let mut belief = tape.gather_rows(log_self, rows)?;
        if let Some((msgs, child_range)) = child_msgs.take() {
            if !child_range.is_empty() {
                let kids = &tree.nodes[child_range.clone()];
                let msgs = match weights {
                    Some(w) => {
                        let f: Arc<[f64]> = w[child_range.clone()].into();
                        if f.iter().all(|&x| x == 1.0) {
                            msgs
                        } else {
                            tape.scale_rows(msgs, f)?
                        }
                    }
                    None => msgs,
                };
                let seg: Arc<[usize]> = kids
                    .iter()
                    .map(|t| t.parent.expect("non-root has parent") - range.start)
                    .collect();
                let agg = tape.segment_sum(msgs, seg, range.len())?;
                belief = tape.add(belief, agg)?;
            }
        }
        let belief = tape.log_softmax_rows(belief)?;
        let mut clamp_rows = Vec::new();
        let mut clamp_vals = Vec::new();
        for (r, t) in tree.nodes[range.clone()].iter().enumerate() {
            if let Some(k) = clamps.class_of(t.node) {
                clamp_rows.push(r);
                clamp_vals.extend(one_hot_row(c, k));
            }
        }
        let belief = if clamp_rows.is_empty() {
            belief
        } else {
            let vals = Matrix::from_vec(clamp_rows.len(), c, clamp_vals)?;
            tape.overwrite_rows(belief, clamp_rows.into(), &vals)?
        };
        if l == 0 {
            return Ok(TreeBp {
                roots: belief,
                messages,
            });
        }
        let raw = tape.log_matmul(belief, log_coupling)?;
        let msgs = tape.log_softmax_rows(raw)?;
        messages[l] = Some(msgs);
        child_msgs = Some((msgs, range));
    }
    Err(Error::input("computation tree has no levels"))
}

/// Root log-beliefs of a computation tree. `log_self_beliefs` is indexed by
/// graph node id.
pub fn tree_bp(
    tree: &ComputationTree,
    log_self_beliefs: &Matrix,
    log_coupling: &Matrix,
    weights: Option<&[f64]>,
    clamped: &[(usize, usize)],
) -> Result<Matrix> {
    let c = log_coupling.rows();
    let clamps = Clamps::new(log_self_beliefs.rows(), c, clamped)?;
    if let Some(bad) = tree.nodes.iter().find(|t| t.node >= log_self_beliefs.rows()) {
        return Err(Error::shape("tree_bp", format!("tree node {} has no self-belief row", bad.node)));
    }
    let mut tape = Tape::new();
    let s = tape.constant(log_self_beliefs.clone());
    let h = tape.constant(log_coupling.clone());
    let out = tree_bp_on_tape(&mut tape, tree, s, &|v| v, h, weights, &clamps)?;
    Ok(tape.value(out.roots).clone())
}

//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! Oracles here are written independently of the library: brute-force
//! enumeration of joint configurations, a plain-loop forward pass and the
//! estimator variance computed straight from its definition.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use gbpn_core::analysis::{convergence_report, diameter, random_tree};
use gbpn_core::autodiff::Tape;
use gbpn_core::bp::{run_bp, Clamps};
use gbpn_core::model::{
    coupling, degree_weights, forward, forward_on_tape, loss, loss_on_tape, self_log_beliefs, Dropout,
};
use gbpn_core::mrf::{
    exact_marginals, generate_dataset, gibbs_sample, metropolis_sample, synthetic_spec, DEFAULT_COUPLING,
};
use gbpn_core::train::{
    importance_estimate, optimal_sampling_distribution, train_full_batch, train_mini_batch, Sampling,
    TrainConfig,
};
use gbpn_core::{
    GenerateConfig, Graph, GraphBundle, LossWeighting, Matrix, Mode, ModelConfig, ModelParams, MrfSpec,
    SyntheticKind, LOG_ZERO,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn verdict(id: usize, name: &'static str, start: Instant, pass: bool, detail: String) -> Verdict {
    Verdict {
        id,
        name,
        pass,
        detail,
        elapsed: start.elapsed(),
    }
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// Marginals by summing the unnormalised joint over every configuration.
fn brute_marginals(spec: &MrfSpec, clamped: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let g = spec.graph();
    let n = g.num_nodes();
    let c = spec.num_classes();
    let edges = g.undirected_edges();
    let mut fixed = vec![None; n];
    for &(i, k) in clamped {
        fixed[i] = Some(k);
    }
    let mut logs = Vec::new();
    let mut configs = Vec::new();
    let mut y = vec![0usize; n];
    let total = (c as u64).pow(n as u32);
    for code in 0..total {
        let mut r = code;
        for v in y.iter_mut() {
            *v = (r % c as u64) as usize;
            r /= c as u64;
        }
        if y.iter().zip(&fixed).any(|(a, f)| f.is_some_and(|k| k != *a)) {
            continue;
        }
        let mut s = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            s += spec.self_log_potentials().get(i, yi);
        }
        for &(i, j) in &edges {
            s += spec.log_coupling().get(y[i], y[j]);
        }
        logs.push(s);
        configs.push(y.clone());
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![vec![0.0; c]; n];
    let mut z = 0.0;
    for (s, y) in logs.iter().zip(&configs) {
        let w = (s - max).exp();
        z += w;
        for (i, &yi) in y.iter().enumerate() {
            out[i][yi] += w;
        }
    }
    for row in &mut out {
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn normalize(v: &mut [f64]) {
    let z = lse(v);
    v.iter_mut().for_each(|x| *x -= z);
}

/// Plain-loop GBPN forward: MLP, symmetric coupling, synchronous BP with
/// clamps re-imposed after every step.
fn plain_forward(
    graph: &Graph,
    x: &Matrix,
    p: &ModelParams,
    steps: usize,
    clamped: &[(usize, usize)],
) -> Vec<Vec<f64>> {
    let n = graph.num_nodes();
    let mut act: Vec<Vec<f64>> = x.iter_rows().map(|r| r.to_vec()).collect();
    for (li, layer) in p.layers.iter().enumerate() {
        let last = li + 1 == p.layers.len();
        act = act
            .iter()
            .map(|a| {
                (0..layer.weight.cols())
                    .map(|o| {
                        let v = layer.bias.get(0, o)
                            + a.iter().enumerate().map(|(k, ak)| ak * layer.weight.get(k, o)).sum::<f64>();
                        if last {
                            v
                        } else {
                            v.max(0.0)
                        }
                    })
                    .collect()
            })
            .collect();
    }
    let c = p.num_classes();
    let mut p0 = act;
    p0.iter_mut().for_each(|r| normalize(r));
    let raw = &p.coupling_raw;
    let h = |a: usize, b: usize| 0.5 * (raw.get(a, b) + raw.get(b, a));
    let clamp = |b: &mut Vec<Vec<f64>>| {
        for &(i, k) in clamped {
            b[i] = (0..c).map(|y| if y == k { 0.0 } else { LOG_ZERO }).collect();
        }
    };
    let mut belief = p0.clone();
    clamp(&mut belief);
    let mut directed = Vec::new();
    for (i, j) in graph.undirected_edges() {
        directed.push((i, j));
        directed.push((j, i));
    }
    let index: std::collections::HashMap<(usize, usize), usize> =
        directed.iter().enumerate().map(|(e, &ij)| (ij, e)).collect();
    let mut msg = vec![vec![-(c as f64).ln(); c]; directed.len()];
    for _ in 0..steps {
        let new_msg: Vec<Vec<f64>> = directed
            .iter()
            .map(|&(i, j)| {
                let back = &msg[index[&(j, i)]];
                let mut m: Vec<f64> = (0..c)
                    .map(|yj| {
                        let terms: Vec<f64> = (0..c).map(|yi| h(yi, yj) + belief[i][yi] - back[yi]).collect();
                        lse(&terms)
                    })
                    .collect();
                normalize(&mut m);
                m
            })
            .collect();
        msg = new_msg;
        let mut nb = p0.clone();
        for (e, &(_, j)) in directed.iter().enumerate() {
            for y in 0..c {
                nb[j][y] += msg[e][y];
            }
        }
        nb.iter_mut().for_each(|r| normalize(r));
        belief = nb;
        clamp(&mut belief);
    }
    let _ = n;
    belief
}

/// Summed-over-classes variance of one importance-weighted draw, from the
/// definition `E[(x_j/p_j)^2] - (E[x_j/p_j])^2`.
fn draw_variance(x: &[Vec<f64>], p: &[f64]) -> f64 {
    let c = x[0].len();
    (0..c)
        .map(|y| {
            let mean: f64 = x.iter().zip(p).map(|(xj, pj)| pj * xj[y] / pj).sum();
            let second: f64 = x.iter().zip(p).map(|(xj, pj)| pj * (xj[y] / pj).powi(2)).sum();
            second - mean * mean
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn random_spec(graph: Graph, c: usize, rng: &mut ChaCha8Rng) -> MrfSpec {
    let n = graph.num_nodes();
    let selfs = Matrix::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let mut h = Matrix::zeros(c, c);
    for a in 0..c {
        for b in a..c {
            let v = rng.gen_range(-1.5..1.5);
            h.set(a, b, v);
            h.set(b, a, v);
        }
    }
    MrfSpec::new(graph, selfs, h).unwrap()
}

fn normalized_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        normalize(out.row_mut(i));
    }
    out
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut worst_enum) = (0.0f64, 0.0f64);
    for trial in 0..50 {
        let n = rng.gen_range(2..=12);
        let c = if trial % 2 == 0 { 2 } else { 3 };
        let spec = random_spec(random_tree(n, &mut rng).unwrap(), c, &mut rng);
        let selfs = normalized_rows(spec.self_log_potentials());
        let t = diameter(spec.graph());
        let clamp_sets = [
            Vec::new(),
            (0..n)
                .filter_map(|i| if rng.gen_bool(0.3) { Some((i, rng.gen_range(0..c))) } else { None })
                .collect::<Vec<_>>(),
        ];
        for clamped in &clamp_sets {
            let oracle = brute_marginals(&spec, clamped);
            let (state, _) = run_bp(spec.graph(), &selfs, spec.log_coupling(), t, clamped, false).unwrap();
            let exact = exact_marginals(&spec, clamped).unwrap();
            for i in 0..n {
                for y in 0..c {
                    worst = worst.max((state.log_beliefs.get(i, y).exp() - oracle[i][y]).abs());
                    worst_enum = worst_enum.max((exact.get(i, y) - oracle[i][y]).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-8 && worst_enum < 1e-8 && secs < 30.0;
    verdict(
        1,
        "tree exactness",
        start,
        pass,
        format!("max |BP - enum| = {worst:.2e}, max |exact_marginals - enum| = {worst_enum:.2e}, {secs:.1}s (< 30s)"),
    )
}

fn small_graph() -> Graph {
    Graph::new(
        8,
        &[(0, 1), (1, 2), (2, 3), (3, 0), (3, 4), (4, 5), (5, 6), (6, 4), (6, 7), (1, 5)],
    )
    .unwrap()
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let graph = small_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let c = 3;
    let x = Matrix::from_vec(8, 2, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut params = ModelParams::init(2, 6, c, &mut rng).unwrap();
    for t in params.tensors_mut() {
        t.as_mut_slice().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..c)).collect();
    let loss_nodes = [0, 2, 3, 5, 7];
    let clamped = [(1, labels[1]), (6, labels[6])];
    let degrees = graph.degrees();
    let steps = 3;

    let mut worst = 0.0f64;
    let mut forward_gap = 0.0f64;
    for beta in [0.0, 0.5] {
        for weighting in [LossWeighting::Tempered, LossWeighting::Scaled] {
            let cfg = ModelConfig {
                bp_steps: steps,
                beta,
                loss_weighting: weighting,
                ..ModelConfig::default()
            };
            let value = |p: &ModelParams| {
                let lb = forward(&graph, &x, p, &cfg, &clamped).unwrap();
                loss(&lb, &labels, &loss_nodes, &graph, beta, weighting).unwrap()
            };
            let lb = forward(&graph, &x, &params, &cfg, &clamped).unwrap();
            let plain = plain_forward(&graph, &x, &params, steps, &clamped);
            for (i, row) in plain.iter().enumerate() {
                for (y, v) in row.iter().enumerate() {
                    forward_gap = forward_gap.max((lb.get(i, y) - v).abs());
                }
            }

            let mut tape = Tape::new();
            let vars = params.to_tape(&mut tape);
            let xv = tape.constant(x.clone());
            let clamps = Clamps::new(8, c, &clamped).unwrap();
            let out = forward_on_tape::<ChaCha8Rng>(&mut tape, &vars, &graph, xv, steps, &clamps, None).unwrap();
            let node_labels: Vec<usize> = loss_nodes.iter().map(|&i| labels[i]).collect();
            let alphas = degree_weights(&loss_nodes.iter().map(|&i| degrees[i]).collect::<Vec<_>>(), beta);
            let l = loss_on_tape(&mut tape, out, &loss_nodes, &node_labels, &alphas, weighting).unwrap();
            let grads = tape.backward(l).unwrap();
            let analytic: Vec<Matrix> = vars.vars().into_iter().map(|v| grads.get(v)).collect();

            let h = 1e-5;
            for (ti, g) in analytic.iter().enumerate() {
                for k in 0..g.len() {
                    let mut plus = params.clone();
                    plus.tensors_mut()[ti].as_mut_slice()[k] += h;
                    let mut minus = params.clone();
                    minus.tensors_mut()[ti].as_mut_slice()[k] -= h;
                    let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
                    let a = g.as_slice()[k];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && forward_gap < 1e-10 && secs < 60.0;
    verdict(
        2,
        "gradient correctness",
        start,
        pass,
        format!(
            "max rel err = {worst:.2e} (< 1e-4), forward vs plain-loop oracle = {forward_gap:.1e}, {secs:.1}s (< 60s)"
        ),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut worst = [0.0f64; 2];
    for (k, kind) in [SyntheticKind::IsingPlus, SyntheticKind::IsingMinus].into_iter().enumerate() {
        let spec = synthetic_spec(kind, 3, 3, 0.5).unwrap();
        let oracle = brute_marginals(&spec, &[]);
        for (s, draws) in [
            metropolis_sample(&spec, 50_000, 1_000, 31 + k as u64).unwrap(),
            gibbs_sample(&spec, 50_000, 1_000, 41 + k as u64).unwrap(),
        ]
        .into_iter()
        .enumerate()
        {
            let mut counts = vec![[0usize; 2]; 9];
            for d in &draws {
                for (i, &y) in d.as_slice().iter().enumerate() {
                    counts[i][y] += 1;
                }
            }
            for i in 0..9 {
                let emp = counts[i][1] as f64 / draws.len() as f64;
                worst[s] = worst[s].max((emp - oracle[i][1]).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst[0] < 0.02 && worst[1] < 0.02 && secs < 60.0;
    verdict(
        3,
        "sampler fidelity",
        start,
        pass,
        format!(
            "max per-node TV: Metropolis {:.4}, Gibbs {:.4} (< 0.02), {secs:.1}s (< 60s)",
            worst[0], worst[1]
        ),
    )
}

struct Run {
    kind: SyntheticKind,
    bundle: GraphBundle,
    config: ModelConfig,
    params: ModelParams,
    test_acc: f64,
}

fn train_run(kind: SyntheticKind, mode: Mode, bp_steps: usize, seed: u64) -> Run {
    let bundle = generate_dataset(&GenerateConfig::new(kind, 51, 51, DEFAULT_COUPLING, seed)).unwrap();
    let config = ModelConfig {
        bp_steps,
        mode,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let out = train_full_batch(&bundle, &config, &tcfg, None).unwrap();
    let test_acc = out.history[out.best_epoch].test_acc;
    Run {
        kind,
        bundle,
        config,
        params: out.params,
        test_acc,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Criterion 4. Returns the transductive GBPN runs for the later criteria.
fn criterion_4() -> (Verdict, Vec<Run>) {
    let start = Instant::now();
    let mut keep = Vec::new();
    let mut line = Vec::new();
    let mut pass = true;
    let cases: [(&str, SyntheticKind, Mode, usize, f64, f64); 4] = [
        ("GBPN ising+", SyntheticKind::IsingPlus, Mode::Transductive, 5, 0.70, 1.0),
        ("GBPN ising-", SyntheticKind::IsingMinus, Mode::Transductive, 5, 0.67, 1.0),
        ("GBPN-I ising-", SyntheticKind::IsingMinus, Mode::Inductive, 5, 0.44, 0.55),
        ("MLP ising+", SyntheticKind::IsingPlus, Mode::Transductive, 0, 0.63, 0.71),
    ];
    for (name, kind, mode, steps, lo, hi) in cases {
        let runs: Vec<Run> = SEEDS.iter().map(|&s| train_run(kind, mode, steps, s)).collect();
        let accs: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
        let m = mean(&accs);
        let ok = m >= lo && m <= hi;
        pass &= ok;
        let range = if hi >= 1.0 { format!(">= {lo:.2}") } else { format!("in [{lo:.2}, {hi:.2}]") };
        line.push(format!(
            "{name} {m:.4} ± {:.4} {range} {}",
            std_dev(&accs),
            if ok { "ok" } else { "MISS" }
        ));
        if mode == Mode::Transductive && steps > 0 {
            keep.extend(runs);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs <= 1200.0;
    (
        verdict(
            4,
            "synthetic accuracy",
            start,
            pass && in_time,
            format!("{}; {secs:.0}s (<= 1200s)", line.join("; ")),
        ),
        keep,
    )
}

/// Centered coupling has positive diagonal and negative off-diagonal
/// entries for homophilous kinds, and the reverse for heterophilous ones.
fn sign_structure_matches(kind: SyntheticKind, params: &ModelParams) -> bool {
    let h = coupling(params);
    let c = h.rows();
    let m = h.as_slice().iter().sum::<f64>() / h.len() as f64;
    let sign = if kind.is_homophilous() { 1.0 } else { -1.0 };
    (0..c).all(|a| {
        (0..c).all(|b| {
            let v = sign * (h.get(a, b) - m);
            if a == b {
                v > 0.0
            } else {
                v < 0.0
            }
        })
    })
}

fn criterion_5(ising_runs: &[Run]) -> Verdict {
    let start = Instant::now();
    let mut runs: Vec<&Run> = ising_runs.iter().collect();
    let mrf: Vec<Run> = [SyntheticKind::MrfPlus, SyntheticKind::MrfMinus]
        .into_iter()
        .flat_map(|k| SEEDS.iter().map(move |&s| train_run(k, Mode::Transductive, 5, s)))
        .collect();
    runs.extend(mrf.iter());
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in SyntheticKind::ALL {
        let hits = runs
            .iter()
            .filter(|r| r.kind == kind && sign_structure_matches(kind, &r.params))
            .count();
        pass &= hits == SEEDS.len();
        parts.push(format!("{kind} {hits}/{}", SEEDS.len()));
    }
    verdict(5, "identifiability", start, pass, parts.join(", "))
}

fn criterion_6(run: &Run) -> Verdict {
    let start = Instant::now();
    let rows = convergence_report(&run.bundle, &run.params, &run.config, 20, false).unwrap();
    let r1 = rows[1].residual;
    let r10 = rows[10].residual;
    let acc5 = rows[5].test_acc;
    let drift = rows[5..].iter().map(|r| (r.test_acc - acc5).abs()).fold(0.0, f64::max);
    let pass = r10 < 0.01 * r1 && drift < 0.005;
    verdict(
        6,
        "convergence",
        start,
        pass,
        format!(
            "r(1) = {r1:.3e}, r(10) = {r10:.3e}, ratio {:.2e} (< 0.01); max accuracy change after step 5 = {:.2} pp (< 0.5)",
            r10 / r1,
            drift * 100.0
        ),
    )
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut bias = 0.0f64;
    for k in 1..=6 {
        for _ in 0..20 {
            let c = rng.gen_range(2..=4);
            let msgs = Matrix::from_vec(k, c, (0..k * c).map(|_| rng.gen_range(-4.0..0.0)).collect()).unwrap();
            let mut probs: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            // One draw: E[Z] = sum_j p_j Z(j) must equal the neighbourhood mean.
            let mut expected = vec![0.0; c];
            for j in 0..k {
                let est = importance_estimate(&msgs, &[j], &probs, k).unwrap();
                for y in 0..c {
                    expected[y] += probs[j] * est[y];
                }
            }
            for y in 0..c {
                let omega: f64 = (0..k).map(|j| msgs.get(j, y)).sum::<f64>() / k as f64;
                bias = bias.max((expected[y] - omega).abs());
            }
        }
    }
    let mut grid_gap = f64::NEG_INFINITY;
    for _ in 0..20 {
        let c = rng.gen_range(2..=4);
        let x: Vec<Vec<f64>> = (0..2).map(|_| (0..c).map(|_| rng.gen_range(-5.0..0.0)).collect()).collect();
        let msgs = Matrix::from_rows(&x).unwrap();
        let p_star = optimal_sampling_distribution(&msgs).unwrap();
        let v_star = draw_variance(&x, &p_star);
        let best_grid = (1..100)
            .map(|i| {
                let q = i as f64 / 100.0;
                draw_variance(&x, &[q, 1.0 - q])
            })
            .fold(f64::INFINITY, f64::min);
        grid_gap = grid_gap.max(v_star - best_grid);
    }
    let pass = bias < 1e-12 && grid_gap <= 1e-12;
    verdict(
        7,
        "estimator unbiasedness",
        start,
        pass,
        format!("max |E[Z] - Omega| = {bias:.1e} (< 1e-12); max Var(p*) - min grid Var = {grid_gap:.2e} (<= 0)"),
    )
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let (mut imp, mut rho, mut uni) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &SEEDS {
        let bundle =
            generate_dataset(&GenerateConfig::new(SyntheticKind::IsingPlus, 51, 51, DEFAULT_COUPLING, seed)).unwrap();
        let mcfg = ModelConfig {
            bp_steps: 2,
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig {
            epochs: 100,
            fanout: 2,
            sampling: Sampling::Exp3,
            seed,
            track_variance: true,
            ..TrainConfig::default()
        };
        let out = train_mini_batch(&bundle, &mcfg, &tcfg, None).unwrap();
        let tail = &out.variance[20..];
        imp.push(mean(&tail.iter().map(|v| v.importance_vs_optimal).collect::<Vec<_>>()));
        uni.push(mean(&tail.iter().map(|v| v.uniform_vs_optimal).collect::<Vec<_>>()));
        rho.push(mean(&tail.iter().map(|v| v.rho).collect::<Vec<_>>()));
    }
    let (mi, si) = (mean(&imp), std_dev(&imp));
    let (mr, sr) = (mean(&rho), std_dev(&rho));
    // The one-std band may not reach below the best seed: with heavy-tailed
    // ratios the std can exceed the mean and would pass anything.
    let band_low = |m: f64, s: f64, xs: &[f64]| (m - s).max(xs.iter().cloned().fold(f64::INFINITY, f64::min));
    let pass = band_low(mi, si, &imp) <= 1.10 && band_low(mr, sr, &rho) <= 1.0;
    let seeds = |xs: &[f64]| xs.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join("/");
    verdict(
        8,
        "importance-sampling variance",
        start,
        pass,
        format!(
            "Var(imp)/Var(opt) = {mi:.4e} ± {si:.2e} [{}] (<= 1.10); rho = {mr:.4e} ± {sr:.2e} [{}] (<= 1.0); Var(uni)/Var(opt) = {:.4}",
            seeds(&imp),
            seeds(&rho),
            mean(&uni)
        ),
    )
}

fn criterion_9() -> Verdict {
    let start = Instant::now();
    let graph = small_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut zero_coupling_gap = 0.0f64;
    let mut t0_exact = true;
    for c in [2, 3, 5] {
        let x = Matrix::from_vec(8, 3, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut params = ModelParams::init(3, 16, c, &mut rng).unwrap();
        let mlp = self_log_beliefs::<ChaCha8Rng>(&x, &params, None::<Dropout<ChaCha8Rng>>).unwrap();
        for steps in [1, 2, 5, 12] {
            let cfg = ModelConfig {
                bp_steps: steps,
                mode: Mode::Inductive,
                ..ModelConfig::default()
            };
            let out = forward(&graph, &x, &params, &cfg, &[]).unwrap();
            zero_coupling_gap = zero_coupling_gap.max(out.max_abs_diff(&mlp));
        }
        params.coupling_raw = Matrix::from_vec(c, c, (0..c * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let cfg = ModelConfig {
            bp_steps: 0,
            mode: Mode::Inductive,
            ..ModelConfig::default()
        };
        let out = forward(&graph, &x, &params, &cfg, &[]).unwrap();
        let mlp = self_log_beliefs::<ChaCha8Rng>(&x, &params, None::<Dropout<ChaCha8Rng>>).unwrap();
        t0_exact &= out.as_slice() == mlp.as_slice();
    }
    let mut uniform_gap = 0.0f64;
    let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let nodes: Vec<usize> = (0..8).collect();
    for c in [2, 3, 5] {
        let uniform = Matrix::filled(8, c, -(c as f64).ln());
        for beta in [0.0, 0.5, 1.0, 2.0] {
            for weighting in [LossWeighting::Tempered, LossWeighting::Scaled] {
                let l = loss(&uniform, &labels, &nodes, &graph, beta, weighting).unwrap();
                let target = match weighting {
                    LossWeighting::Tempered => (c as f64).ln(),
                    // -alpha log(1/c), averaged: mean alpha times ln c.
                    LossWeighting::Scaled => {
                        mean(&degree_weights(&graph.degrees(), beta)) * (c as f64).ln()
                    }
                };
                uniform_gap = uniform_gap.max((l - target).abs());
            }
        }
    }
    let pass = zero_coupling_gap < 1e-12 && t0_exact && uniform_gap < 1e-12;
    verdict(
        9,
        "degenerate equivalences",
        start,
        pass,
        format!(
            "zero coupling vs MLP = {zero_coupling_gap:.1e} (< 1e-12); T = 0 bit-identical: {t0_exact}; uniform-belief loss vs ln c = {uniform_gap:.1e} (< 1e-12)"
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("GBPN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().map_or(true, |o| o.contains(&id));
    // Other libtest flags from `cargo test` are accepted and ignored.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut verdicts = Vec::new();
    for (id, f) in [
        (1, criterion_1 as fn() -> Verdict),
        (2, criterion_2),
        (3, criterion_3),
        (7, criterion_7),
        (9, criterion_9),
    ] {
        if wanted(id) {
            verdicts.push(f());
            report(verdicts.last().unwrap());
        }
    }
    if wanted(4) || wanted(5) || wanted(6) {
        let (v4, runs) = criterion_4();
        if wanted(4) {
            report(&v4);
            verdicts.push(v4);
        }
        if wanted(5) {
            verdicts.push(criterion_5(&runs));
            report(verdicts.last().unwrap());
        }
        if wanted(6) {
            verdicts.push(criterion_6(&runs[0]));
            report(verdicts.last().unwrap());
        }
    }
    if wanted(8) {
        verdicts.push(criterion_8());
        report(verdicts.last().unwrap());
    }
    verdicts.sort_by_key(|v| v.id);
    println!("\nacceptance summary");
    for v in &verdicts {
        println!("  criterion {} {}: {}", v.id, v.name, if v.pass { "PASS" } else { "FAIL" });
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("{} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn report(v: &Verdict) {
    println!(
        "criterion {} {}: {} ({}) [{:.1}s]",
        v.id,
        v.name,
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        v.elapsed.as_secs_f64()
    );
}

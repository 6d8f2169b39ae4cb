//! `gbpn`: dataset generation, training, evaluation and diagnostics.
//!
//! Every command prints one JSON object on standard output. Exit codes:
//! 0 success, 1 usage error, 2 data error, 3 failed check.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gbpn_core::analysis::{
    capped_log_beliefs, convergence_report, degree_breakdown, sampler_fidelity_check, tree_exactness_check,
};
use gbpn_core::io::{load_bundle, load_model, save_bundle, save_model};
use gbpn_core::model::{coupling, forward, predict, accuracy};
use gbpn_core::mrf::{generate_dataset, DEFAULT_BURN_IN, DEFAULT_COUPLING};
use gbpn_core::train::{eval_clamps, train_full_batch, train_mini_batch};
use gbpn_core::{
    GenerateConfig, LossWeighting, Matrix, Mode, ModelConfig, Sampling, SyntheticKind, TrainConfig,
};
use serde_json::{json, Value};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "gbpn", version, about = "Graph belief propagation networks")]
struct Cli {
    /// Worker threads for the numeric kernels.
    #[arg(long, global = true, env = "GBPN_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic lattice dataset and write it as a bundle.
    Generate(GenerateArgs),
    /// Train a model on a bundle.
    Train(TrainArgs),
    /// Accuracy of a trained model, with a per-degree breakdown.
    Eval(EvalArgs),
    /// Print the learned coupling matrix.
    Inspect(InspectArgs),
    /// Residual and accuracy over BP steps for a trained model.
    Convergence(ConvergenceArgs),
    /// Exp3 sampling variance relative to optimal and uniform sampling.
    Variance(VarianceArgs),
    /// Check BP against enumeration on random trees and the samplers on a small lattice.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    kind: SyntheticKind,
    #[arg(long, default_value_t = 51)]
    rows: usize,
    #[arg(long, default_value_t = 51)]
    cols: usize,
    /// Coupling strength J (log H = ±J).
    #[arg(long, default_value_t = DEFAULT_COUPLING)]
    coupling: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_BURN_IN)]
    burn_in: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "transductive")]
    mode: Mode,
    #[arg(long, default_value_t = 5)]
    bp_steps: usize,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    /// `full` or a number of root nodes per step.
    #[arg(long, default_value = "full")]
    batch: Batch,
    #[arg(long, default_value_t = 5)]
    fanout: usize,
    #[arg(long, default_value = "uniform")]
    sampling: Sampling,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value = "tempered")]
    loss: LossWeighting,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 0.9)]
    keep_prob: f64,
    /// Also condition on validation labels when evaluating.
    #[arg(long)]
    eval_clamp_val: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum Batch {
    Full,
    Nodes(usize),
}

impl std::str::FromStr for Batch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "full" {
            return Ok(Batch::Full);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Batch::Nodes(n)),
            _ => Err(format!("expected `full` or a positive integer, got {s:?}")),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Overrides the mode stored with the model.
    #[arg(long)]
    mode: Option<Mode>,
    /// Evaluate on computation trees keeping at most this many neighbours per node.
    #[arg(long)]
    max_neighbors: Option<usize>,
    #[arg(long)]
    eval_clamp_val: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 20)]
    max_steps: usize,
    #[arg(long)]
    eval_clamp_val: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VarianceArgs {
    #[arg(long)]
    data: PathBuf,
    /// Starting point; training continues from these parameters.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Kept below the lattice degree so that sampling actually happens.
    #[arg(long, default_value_t = 2)]
    fanout: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First epoch (0-based) included in the summary averages.
    #[arg(long, default_value_t = 20)]
    summary_from: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 10)]
    nodes: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Post-burn-in samples per sampler.
    #[arg(long, default_value_t = 50_000)]
    samples: usize,
    #[arg(long, default_value_t = 1e-8)]
    bp_tolerance: f64,
    #[arg(long, default_value_t = 0.02)]
    tv_tolerance: f64,
}

/// A failed command: exit code and message.
struct Failure {
    code: u8,
    message: String,
}

impl From<gbpn_core::Error> for Failure {
    fn from(e: gbpn_core::Error) -> Self {
        let code = match e {
            gbpn_core::Error::Input(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 2,
        message: format!("writing {}: {e}", path.display()),
    })
}

fn matrix_json(m: &Matrix) -> Value {
    json!(m.iter_rows().map(|r| r.to_vec()).collect::<Vec<_>>())
}

fn generate(a: GenerateArgs) -> Result<Value, Failure> {
    if a.rows == 0 || a.cols == 0 {
        return Err(usage("rows and cols must be positive"));
    }
    let cfg = GenerateConfig {
        burn_in: a.burn_in,
        ..GenerateConfig::new(a.kind, a.rows, a.cols, a.coupling, a.seed)
    };
    let bundle = generate_dataset(&cfg)?;
    save_bundle(&bundle, &a.out)?;
    let mut hist = vec![0usize; bundle.num_classes()];
    bundle.labels().iter().for_each(|&y| hist[y] += 1);
    let edges = bundle.graph().undirected_edges();
    let agree = edges.iter().filter(|&&(i, j)| bundle.labels()[i] == bundle.labels()[j]).count();
    Ok(json!({
        "command": "generate",
        "kind": a.kind.to_string(),
        "nodes": bundle.num_nodes(),
        "edges": edges.len(),
        "classes": bundle.num_classes(),
        "class_histogram": hist,
        "edge_agreement": agree as f64 / edges.len().max(1) as f64,
        "coupling": a.coupling,
        "seed": a.seed,
        "out": a.out,
    }))
}

fn train(a: TrainArgs) -> Result<Value, Failure> {
    let bundle = load_bundle(&a.data)?;
    let mcfg = ModelConfig {
        hidden_width: a.hidden,
        bp_steps: a.bp_steps,
        keep_prob: a.keep_prob,
        beta: a.beta,
        mode: a.mode,
        loss_weighting: a.loss,
    };
    mcfg.validate()?;
    let mut tcfg = TrainConfig {
        epochs: a.epochs,
        fanout: a.fanout,
        sampling: a.sampling,
        seed: a.seed,
        eval_clamp_val: a.eval_clamp_val,
        ..TrainConfig::default()
    };
    let outcome = match a.batch {
        Batch::Full => train_full_batch(&bundle, &mcfg, &tcfg, None)?,
        Batch::Nodes(n) => {
            tcfg.batch_size = n;
            train_mini_batch(&bundle, &mcfg, &tcfg, None)?
        }
    };
    save_model(&outcome.params, &mcfg, &a.out)?;
    if let Some(path) = &a.history {
        let mut csv = String::from("epoch,loss,train_acc,val_acc,test_acc\n");
        for r in &outcome.history {
            let _ = writeln!(csv, "{},{},{},{},{}", r.epoch, r.loss, r.train_acc, r.val_acc, r.test_acc);
        }
        write_text(path, &csv)?;
    }
    let best = &outcome.history[outcome.best_epoch];
    Ok(json!({
        "command": "train",
        "mode": mcfg.mode,
        "bp_steps": mcfg.bp_steps,
        "epochs": a.epochs,
        "best_epoch": outcome.best_epoch,
        "val_acc": best.val_acc,
        "test_acc": best.test_acc,
        "final_loss": outcome.history.last().map(|r| r.loss),
        "model": a.out,
    }))
}

fn eval(a: EvalArgs) -> Result<Value, Failure> {
    let bundle = load_bundle(&a.data)?;
    let (params, mut mcfg) = load_model(&a.model)?;
    if let Some(m) = a.mode {
        mcfg.mode = m;
    }
    let clamps = eval_clamps(&bundle, mcfg.mode, a.eval_clamp_val);
    let splits = bundle.splits();
    let (val_acc, test_acc, test_beliefs) = match a.max_neighbors {
        None => {
            let lb = forward(bundle.graph(), bundle.features(), &params, &mcfg, &clamps)?;
            let pred = predict(&lb);
            (
                accuracy(&pred, bundle.labels(), &splits.val),
                accuracy(&pred, bundle.labels(), &splits.test),
                lb.gather_rows(&splits.test),
            )
        }
        Some(0) => return Err(usage("--max-neighbors must be positive")),
        Some(m) => {
            let mut nodes = splits.val.clone();
            nodes.extend(&splits.test);
            let lb = capped_log_beliefs(&bundle, &params, &mcfg, &clamps, &nodes, m, a.seed)?;
            let pred = predict(&lb);
            let nv = splits.val.len();
            let hits = |range: std::ops::Range<usize>| {
                range.clone().filter(|&k| pred[k] == bundle.labels()[nodes[k]]).count() as f64 / range.len().max(1) as f64
            };
            let test_rows: Vec<usize> = (nv..nodes.len()).collect();
            (hits(0..nv), hits(nv..nodes.len()), lb.gather_rows(&test_rows))
        }
    };
    let buckets = degree_breakdown(&bundle, &test_beliefs, &splits.test)?;
    Ok(json!({
        "command": "eval",
        "mode": mcfg.mode,
        "max_neighbors": a.max_neighbors,
        "val_acc": val_acc,
        "test_acc": test_acc,
        "test_by_degree": buckets,
    }))
}

fn inspect(a: InspectArgs) -> Result<Value, Failure> {
    let (params, mcfg) = load_model(&a.model)?;
    let h = coupling(&params);
    let mean = h.as_slice().iter().sum::<f64>() / h.len() as f64;
    let centered = h.map(|v| v - mean);
    Ok(json!({
        "command": "inspect",
        "config": mcfg,
        "feature_dim": params.feature_dim(),
        "classes": params.num_classes(),
        "layer_shapes": params.layers.iter().map(|l| [l.weight.rows(), l.weight.cols()]).collect::<Vec<_>>(),
        "log_coupling": matrix_json(&h),
        "centered_log_coupling": matrix_json(&centered),
    }))
}

fn convergence(a: ConvergenceArgs) -> Result<Value, Failure> {
    let bundle = load_bundle(&a.data)?;
    let (params, mcfg) = load_model(&a.model)?;
    let rows = convergence_report(&bundle, &params, &mcfg, a.max_steps, a.eval_clamp_val)?;
    if let Some(path) = &a.out {
        let mut csv = String::from("step,residual,train_acc,test_acc\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{},{},{}", r.step, r.residual, r.train_acc, r.test_acc);
        }
        write_text(path, &csv)?;
    }
    Ok(json!({
        "command": "convergence",
        "max_steps": a.max_steps,
        "rows": rows,
    }))
}

fn variance(a: VarianceArgs) -> Result<Value, Failure> {
    let bundle = load_bundle(&a.data)?;
    let (params, mcfg) = load_model(&a.model)?;
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        fanout: a.fanout,
        sampling: Sampling::Exp3,
        seed: a.seed,
        track_variance: true,
        ..TrainConfig::default()
    };
    let outcome = train_mini_batch(&bundle, &mcfg, &tcfg, Some(&params))?;
    if let Some(path) = &a.out {
        let mut csv = String::from("epoch,importance_vs_optimal,uniform_vs_optimal,rho\n");
        for (e, v) in outcome.variance.iter().enumerate() {
            let _ = writeln!(csv, "{e},{},{},{}", v.importance_vs_optimal, v.uniform_vs_optimal, v.rho);
        }
        write_text(path, &csv)?;
    }
    let tail = outcome.variance.get(a.summary_from.min(outcome.variance.len())..).unwrap_or(&[]);
    let mean = |f: fn(&gbpn_core::train::VarianceStats) -> f64| {
        (!tail.is_empty()).then(|| tail.iter().map(f).sum::<f64>() / tail.len() as f64)
    };
    Ok(json!({
        "command": "variance",
        "epochs": a.epochs,
        "fanout": a.fanout,
        "summary_from": a.summary_from,
        "mean_importance_vs_optimal": mean(|v| v.importance_vs_optimal),
        "mean_uniform_vs_optimal": mean(|v| v.uniform_vs_optimal),
        "mean_rho": mean(|v| v.rho),
    }))
}

fn oracle_check(a: OracleArgs) -> Result<Value, Failure> {
    if a.nodes > 20 {
        return Err(usage("--nodes above 20 is too large to enumerate"));
    }
    let tree = tree_exactness_check(a.nodes, a.classes, a.trials, a.seed)?;
    let sampler = sampler_fidelity_check(0.5, a.samples, DEFAULT_BURN_IN, a.seed)?;
    let tree_pass = tree.max_abs_diff < a.bp_tolerance && tree.max_abs_diff_clamped < a.bp_tolerance;
    let sampler_pass = sampler.metropolis_max_tv < a.tv_tolerance && sampler.gibbs_max_tv < a.tv_tolerance;
    let summary = json!({
        "command": "oracle-check",
        "tree": tree,
        "tree_pass": tree_pass,
        "sampler": sampler,
        "sampler_pass": sampler_pass,
        "pass": tree_pass && sampler_pass,
    });
    if tree_pass && sampler_pass {
        Ok(summary)
    } else {
        println!("{summary}");
        Err(Failure {
            code: 3,
            message: "oracle check failed".into(),
        })
    }
}

fn run(cli: Cli) -> Result<Value, Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        gbpn_core::set_threads(n)?;
    }
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::Convergence(a) => convergence(a),
        Command::Variance(a) => variance(a),
        Command::OracleCheck(a) => oracle_check(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

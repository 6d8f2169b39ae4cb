//! Graph belief propagation networks.
//!
//! Node classification on a pairwise Markov random field whose node
//! potentials come from an MLP over node features and whose edge potential is
//! a single learned symmetric class-affinity matrix. Marginals are estimated
//! with log-space loopy belief propagation, and training differentiates the
//! marginal likelihood of labelled nodes through the propagation steps.

pub mod analysis;
pub mod autodiff;
pub mod bp;
pub mod error;
pub mod graph;
pub mod io;
pub mod matrix;
pub mod model;
pub mod mrf;
pub mod train;

pub use autodiff::{grad_check, Axis, GradCheck, GradCheckOptions, Gradients, Tape, Var};
pub use bp::{BeliefState, Clamps, ComputationTree, LOG_ZERO};
pub use error::{Error, Result};
pub use graph::{grid_graph, Graph};
pub use io::GraphBundle;
pub use matrix::Matrix;
pub use model::{LossWeighting, Mode, ModelConfig, ModelParams};
pub use mrf::{GenerateConfig, LabelConfig, MrfSpec, SyntheticKind};
pub use train::{Sampling, TrainConfig, TrainOutcome};

/// Sets the number of worker threads used by the numeric kernels. Results are
/// bit-identical for any thread count.
pub fn set_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))
}

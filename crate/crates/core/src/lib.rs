//! Budgeted, continuity-aware token selection on chain factor graphs.
//!
//! A sentence of `L` tokens gets a binary mask `m`. Each selected token earns
//! its importance score, each pair of selected neighbours earns a continuity
//! bonus, and at most `K` tokens may be selected. The crate provides exact
//! MAP solvers ([`exact`]), a Lagrangian/Gibbs relaxation with exact
//! marginals and Perturb-and-MAP sampling ([`relax`]), importance scoring
//! from embeddings ([`scoring`]), a small relation classifier trained through
//! the relaxed masks ([`classifier`]), evaluation ([`metrics`]), and file
//! formats plus a synthetic corpus ([`io`], [`synth`]).

pub mod classifier;
pub mod error;
pub mod exact;
pub mod io;
mod logspace;
pub mod metrics;
pub mod model;
pub mod par;
pub mod relax;
pub mod rng;
pub mod scoring;
pub mod synth;

pub use classifier::{Ablation, ClassifierParams, TrainConfig};
pub use error::{Error, Result};
pub use exact::{brute_force_map, dp_map, dp_map_unbudgeted, Solution, SolverTag};
pub use io::{Dataset, Entry, ResultRecord};
pub use logspace::{logsumexp, logsumexp2};
pub use metrics::{micro_f1, EvalReport};
pub use model::{
    adjacent_pairs, lagrangian_score, score_of, segment_count, Budget, ChainModel, Marginals, Mask,
    RelaxConfig, Score,
};
pub use par::Execution;
pub use relax::{
    chain_marginals, perturb_and_map_sample, soft_mask, tune_lambda, BudgetedSoftMask, LambdaFit,
    SampleBatch, SampleOptions,
};
pub use scoring::{build_chain_model, importance_scores, Embeddings, Instance, Span};
pub use synth::SynthConfig;

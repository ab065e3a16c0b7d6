//! Sample-efficient evaluation of generative models with Gaussian-process
//! surrogates.
//!
//! The library treats a target model's per-input error score as an unknown
//! function `f` over a pool of evaluation inputs and maintains a GP posterior
//! over it. Two consumers sit on top of the shared surrogate:
//!
//! * [`quadrature`] — Bayesian-quadrature estimation of the aggregate score
//!   `S = mean_j f(x_j)` with an active acquisition rule that greedily
//!   minimizes the posterior variance of `S`.
//! * [`discovery`] — superlevel-set sampling and LLM-backed synthesis of
//!   likely failure cases, optionally steered across semantic topics by a
//!   UCB1 bandit.
//!
//! Strong priors come from [`transfer`]: either score features extracted from
//! a historical model-by-input score matrix, or embedding-derived prompt
//! features with an optionally pre-trained encoder. [`selection`] decides
//! which historical models feed the prior and when to abstain.
//!
//! All external model calls (embedding, generation, target evaluation) go
//! through [`providers`], which supports live HTTP, deterministic mock, and
//! content-addressed record/replay modes. [`harness`] adds data ingestion,
//! a synthetic benchmark simulator used to validate the estimator theory at
//! desk scale, and run orchestration for the CLI.

pub mod baselines;
pub mod discovery;
pub mod fixtures;
pub mod gp;
pub mod harness;
pub mod metrics;
pub mod providers;
pub mod quadrature;
pub mod selection;
pub mod transfer;

mod linalg;

pub use gp::{
    FeatureVector, GpError, GpInput, GpPosterior, GpPrior, KernelSpec, MaternNu, MeanSpec,
    Observations,
};
pub use quadrature::{QuadratureConfig, QuadratureEstimate, Trajectory, TrajectoryStep};
pub use transfer::Scenario;
/// Identifier for a pool input. Ordering (and therefore every tie-break in
/// the library) is plain lexicographic `String` order.
pub type InputId = String;

/// Identifier for a model (historical source or evaluation target).
pub type ModelId = String;

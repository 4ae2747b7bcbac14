//! Penalised multi-objective design of chromatographic processes by Markov
//! chain Monte Carlo sampling, with Pareto front extraction.
//!
//! The crate knows nothing about the simulator: an evaluation maps a
//! parameter vector to purities and a yield.

pub mod geweke;
pub mod mcmc;
pub mod objective;
pub mod pareto;

pub use geweke::{geweke, spectral_variance};
pub use mcmc::{mcmc_sample, write_chain_csv, ChainResult, ChainSample, Evaluation, OptimizationProblem, Parameter, SamplerSettings};
pub use objective::{likelihood, log_likelihood, penalty_objective};
pub use pareto::{dominates, pareto_front, write_pareto_csv};

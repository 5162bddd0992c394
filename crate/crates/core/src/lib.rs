//! Adaptive inference-time compute for best-of-N generation.
//!
//! A model scores its own responses with the normalized likelihood of
//! answering "No" to "Would you do better if you started over?", an estimate
//! of the probability that a fresh sample would not beat the current one.
//! That score drives two strategies:
//!
//! * [`sampler::run_adaptive`] samples in batches of 1, 1, 2, 4, ... with an
//!   annealed temperature and stops once any score exceeds a threshold.
//! * [`pruner::run_pruned`] starts many samples, scores them after a fixed
//!   number of tokens and only finishes the most promising ones.
//!
//! [`dataset`] builds the preference-with-ties training set for such a
//! self-evaluator, and [`experiment`] runs strategy grids against the
//! simulated backend in [`generator::sim`] or a live server through
//! [`generator::remote`].

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod par;
pub mod pruner;
pub mod sampler;
pub mod scoring;

pub use error::{Error, GenError, Result};
pub use generator::{EvalLikelihoods, GenerationRequest, Generator, Prompt, Sample, SampleRef};
pub use scoring::EvalScore;

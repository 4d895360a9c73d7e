//! Cross-entropy and its sampled approximations for next-item recommendation.
//!
//! The crate is organised around a small number of pieces:
//!
//! - [`dataset`]: interaction logs, k-core filtering, leave-one-out splits and a
//!   synthetic Markov-chain benchmark.
//! - [`scorer`]: a decayed-pooling inner-product scorer with hand-derived
//!   gradients and a lazy Adam optimizer.
//! - [`losses`]: CE, truncated CE, BCE, BPR, NCE, NEG, IS and SCE together with
//!   their gradients with respect to the scores.
//! - [`sampling`]: uniform negative samplers and the SCE-equivalent proposal.
//! - [`metrics`]: rank computation, NDCG / HR / RR and full-catalog evaluation.
//! - [`bounds`]: the loss-vs-metric bounds in executable form (analytic
//!   probabilities, lemma floors, exact binomial tails and Monte Carlo checks).
//! - [`trainer`]: the training loop, convergence detection and sweeps.
//! - [`cli`]: the `rankloss` command-line front end.

pub mod bounds;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod sampling;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result};

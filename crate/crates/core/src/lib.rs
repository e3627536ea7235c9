//! Augmented building performance models.
//!
//! An existing probit light-switching model is combined with occupant
//! behaviour observed in immersive virtual environment (IVE) sessions. The
//! IVE corpus is augmented through a two-state hidden Markov model, and a
//! conditional GAN, steered by a performance target curve, learns the
//! augmented model. [`eval_stats`] scores the result against the target.
//!
//! The modules mirror the pipeline stages:
//!
//! - [`probit_bpm`]: probit curves and Monte Carlo samples of them
//! - [`ive_hmm`]: IVE event records, observation encoding, Baum-Welch and synthesis
//! - [`dataset`]: contextual-factor imputation and generator input assembly
//! - [`neuralnet`]: dense networks with manual backpropagation
//! - [`gan`]: conditional GAN training and the resulting augmented model
//! - [`eval_stats`]: MAE, absolute error series and one-tailed t-tests
//! - [`experiment`]: config files, staged runs and run manifests

pub mod dataset;
pub mod error;
pub mod eval_stats;
pub mod experiment;
pub mod gan;
pub mod ive_hmm;
pub mod neuralnet;
pub mod probit_bpm;
pub mod seed;

pub use error::{Error, Result};

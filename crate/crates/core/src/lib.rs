//! Multi-teacher Bayesian knowledge distillation.
//!
//! A student network's parameters get a posterior whose prior is a
//! per-sample mixture of Dirichlet densities centred on teacher predictions.
//! The crate covers data generation, teacher training, the posterior and its
//! gradients, SGLD sampling, uncertainty quantification and an experiment
//! harness that ties them together.

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod posterior;
pub mod rng;
pub mod sgld;
pub mod teachers;
pub mod uq;

pub use error::{Error, Result};

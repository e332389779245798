//! Variational inference for a single-hidden-layer tanh regression network
//! under five inference families (ES, MAP, WN, MF, FC), plus diagnostics for
//! variational over-pruning of hidden units.
//!
//! - [`numerics`]: seeded splittable RNG, dense matrices, Cholesky, log-mean-exp
//! - [`network`]: the model, Gaussian likelihood, point gradients
//! - [`posterior`]: families, sampling, local reparameterization, KL, VFE gradients
//! - [`training`]: Adam and the training loop with trace recording
//! - [`diagnostics`]: predictive log likelihood, pruning reports, collapse check
//! - [`data`]: CSV loading, standardization, splits, synthetic teacher
//! - [`bench`]: grid search, multi-split benchmarks, synthetic suite

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod network;
pub mod numerics;
pub mod posterior;
pub mod training;

pub use data::{Dataset, Scaler, TeacherSpec};
pub use error::{Error, Result};
pub use network::{NetworkShape, ParamPoint};
pub use numerics::{Matrix, RngState};
pub use posterior::{Family, Prior, VariationalPosterior, VfeEstimate, WnScales};
pub use training::{TrainConfig, TrainingTrace};

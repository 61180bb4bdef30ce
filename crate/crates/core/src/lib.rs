#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Parameter estimation for discrete Bayesian networks from incomplete data.
//!
//! The crate provides exact inference ([`inference`]), batch update rules
//! EM(η), EG(η) and gradient projection ([`estimation`]), their one-case
//! on-line counterparts ([`online`]), local convergence analysis of EM(η)
//! ([`spectral`]) and a data-generation / evaluation harness ([`harness`]).

pub mod error;
pub mod estimation;
pub mod harness;
pub mod inference;
pub mod model;
pub mod netio;
pub mod online;
pub mod spectral;

pub use error::{Error, Result};
pub use estimation::{
    fit, FitConfig, FitResult, Init, SufficientStats, Termination, TraceRecord, UpdateRule,
};
pub use inference::{FamilyPosteriors, InferenceEngine};
pub use model::{Network, NetworkStructure, ParameterVector, Tables, Variable, EPS_FLOOR};
pub use netio::{DataCase, DataSet};
pub use online::{OnlineState, OnlineTraceRecord, Schedule};
pub use spectral::SpectralReport;

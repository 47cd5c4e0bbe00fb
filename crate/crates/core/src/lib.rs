//! Ecological inference for vote transitions across two elections.
//!
//! Each polling station contributes first-election counts `n` and
//! second-election counts `y`; the latent r × c table of transitions is
//! modelled row by row as an overdispersed multinomial whose logits may
//! depend on station covariates. Parameters are fitted by maximizing the
//! Gaussian approximation to the likelihood of `y` given `n`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod io;
pub mod model;
pub mod reconstruction;
pub mod simulation;

pub use nalgebra;

pub use error::{Error, Result};
pub use estimation::{
    average_transition_matrix, evaluate, expected_information, fit, log_likelihood, score,
    sensitivity, FitOptions, FitResult, ScoreMode, TransitionSummary,
};
pub use model::{
    CovariateDesign, CovariateEffect, Dimensions, ModelSpec, Overdispersion, ParameterVector,
    StationRecord,
};
pub use reconstruction::{
    expected_cells_ipf, goodman_fit, reconstruct_cells, GoodmanResult, IpfOptions,
};
pub use simulation::{generate_dataset, run_mc_study, McReport, ScenarioConfig};

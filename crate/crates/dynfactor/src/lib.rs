//! Estimation of high-dimensional approximate factor models.
//!
//! The observation model is
//!
//! ```text
//! x_it = alpha_i + lambda_i' F_t + xi_it,      i = 1..N, t = 1..T,
//! ```
//!
//! with r latent factors `F_t`, loadings `lambda_i`, and idiosyncratic noise
//! `xi_it` that may be mildly correlated across series and over time. In the
//! dynamic variant the factors follow a stationary VAR(1),
//! `F_t = A F_{t-1} + H u_t` with `u_t ~ N(0, I_r)`.
//!
//! What is provided, by module:
//!
//! * [`core`] — panel container, demeaning, eigen helpers, the identification
//!   convention (`Λ'Λ/N` diagonal descending, `F'F/T = I`, positive first-row
//!   signs) and column alignment for simulation studies.
//! * [`pca`] — principal-component loadings/factors, the infeasible OLS
//!   baselines, and the closed-form spherical (equal-noise) QML estimator.
//! * [`static_qml`] — EM for the static model under an exact-factor-model
//!   likelihood, WLS and linear-projection factor extraction, an iterated
//!   OLS/WLS scheme, and pseudo-GLS refinements for AR(1) or banded
//!   idiosyncratic covariance.
//! * [`ssm`] — Kalman filter (standard and Woodbury forms), smoother (standard
//!   and Durbin–Koopman forms), a dense direct-projection smoother used as a
//!   cross-check, missing-value imputation, and the prediction-error
//!   log-likelihood.
//! * [`em_dynamic`] — EM for the dynamic model: smoother E-step, closed-form
//!   M-step, likelihood-based stopping.
//! * [`inference`] — HAC covariance of loading estimates, cross-sectional HAC
//!   covariance of factor estimates, confidence bands for the common
//!   component, and information-criterion selection of the number of factors.
//! * [`sim`] — a configurable synthetic DGP and the Monte Carlo harness that
//!   produces per-estimator MSE reports.
//!
//! Matrices are `nalgebra::DMatrix<f64>` throughout, rows indexing time for
//! panels and factor paths, rows indexing series for loadings.
//!
//! With the default `parallel` feature, Monte Carlo replications run on a
//! rayon pool; aggregation is position-indexed so reports are bit-identical
//! across thread counts (including a sequential build).

pub mod core;
pub mod em_dynamic;
pub mod inference;
pub mod pca;
pub mod sim;
pub mod ssm;
pub mod static_qml;

pub use crate::core::{
    align_columns, demean, identify_rotation, identify_rotation_with_map, top_eigen, EigenPair,
    FactorMethod, FactorPath, Panel, StaticParams,
};
pub use crate::core::DynamicParams;
pub use crate::inference::{
    auto_bandwidth, common_component_bands, select_num_factors, standard_normal_quantile,
    Bandwidth, FactorWeights,
};
pub use crate::sim::{
    run_monte_carlo, run_monte_carlo_mode, simulate, DgpConfig, Estimator, ExecMode, McCell,
    McReport, SimTruth,
};

use thiserror::Error;

/// Errors shared across all estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("series {name:?} has no observed values")]
    EmptySeries { name: String },

    #[error("panel contains missing values; impute first ({context})")]
    MissingValues { context: &'static str },

    #[error("matrix not symmetric in {context}: relative asymmetry {asym:.3e}")]
    NotSymmetric { context: &'static str, asym: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("rank-deficient system in {context}")]
    RankDeficient { context: &'static str },

    #[error("r = {r} factors requested but min(N, T) = {min_nt}")]
    TooManyFactors { r: usize, min_nt: usize },

    #[error("eigenvalue {index} of the factor block is not positive ({value:.3e})")]
    DegenerateCovariance { index: usize, value: f64 },

    #[error("top eigenvalue {index} does not exceed the noise level ({value:.3e} <= {noise:.3e})")]
    FactorBelowNoise { index: usize, value: f64, noise: f64 },

    #[error("innovation covariance singular at t = {t}")]
    SingularInnovation { t: usize },

    #[error("log-likelihood decreased at iteration {iter}: {from:.10e} -> {to:.10e}")]
    LikelihoodDecrease { iter: usize, from: f64, to: f64 },

    #[error("covariance matrix in {context} is not positive definite")]
    NotPositiveDefinite { context: &'static str },

    #[error("dense projection smoother limited to r*T <= {cap}, got {got}")]
    ProjectionTooLarge { cap: usize, got: usize },

    #[error("confidence level must lie in (0, 1), got {level}")]
    BadLevel { level: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

//! Estimation of high-dimensional approximate factor models.
//!
//! A panel `x_it = λ_i'F_t + ξ_it` with `r` pervasive factors is estimated
//! either by principal components (eigendecomposition of the sample
//! covariance) or by quasi maximum likelihood (EM on the exact-factor
//! Gaussian likelihood with diagonal idiosyncratic covariance). The crate
//! also provides factor recovery (OLS/GLS/linear projection), Bartlett-kernel
//! HAC standard errors for the loadings, the simulation design used to
//! compare the estimators, and a Monte Carlo harness that tabulates their
//! mean squared errors and mutual distances.

pub mod factors;
pub mod inference;
pub mod io;
pub mod model;
pub mod montecarlo;
pub mod pca;
pub mod qml;
pub mod simulate;

pub use model::{
    demean, sample_covariance, top_r_eigen, CovarianceEstimate, CovarianceKind, EigenSystem,
    FactorModelFit, FitDiagnostics, FitMethod, PanelData,
};

use thiserror::Error;

/// Errors shared by every estimator and the simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The model cannot be estimated on this data (rank deficiency,
    /// non-positive spectrum, singular EM update).
    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    /// A simulated draw violates the design's identification requirements
    /// and should be redrawn with a fresh sub-seed.
    #[error("degenerate draw: {0}")]
    DegenerateDraw(String),

    /// File or stream level failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file had the wrong shape or an unparseable value.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

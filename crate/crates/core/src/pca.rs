//! Principal-components estimation of loadings and factors.
//!
//! The loadings solve the least-squares rank-r approximation of the panel
//! under the identification convention: `Λ̂ = V̂·M̂^{1/2}` from the top-r
//! eigenpairs of the n×n sample covariance, factors by linear projection
//! `F̂ = X·V̂·M̂^{-1/2}`, so that `(1/T)F̂'F̂ = I_r` and `(1/n)Λ̂'Λ̂` is
//! diagonal by construction.

use nalgebra::DMatrix;

use crate::model::{
    sample_covariance, top_r_eigen, FactorModelFit, FitDiagnostics, FitMethod, PanelData,
};
use crate::{Error, Result};

/// Fits the factor model by principal components.
///
/// Requires `r < min(n, T)` and a strictly positive top-r spectrum.
pub fn fit_pc(panel: &PanelData, r: usize) -> Result<FactorModelFit> {
    let (t, n) = (panel.n_periods(), panel.n_series());
    if r == 0 || r >= n.min(t) {
        return Err(Error::InvalidInput(format!(
            "r = {r} must satisfy 1 <= r < min(n, T) = {}",
            n.min(t)
        )));
    }
    let cov = sample_covariance(panel);
    let eigen = top_r_eigen(&cov, r)?;
    if eigen.eigenvalues().iter().any(|&l| l <= 0.0) {
        return Err(Error::DegenerateModel(
            "top-r eigenvalues of the sample covariance are not all positive".into(),
        ));
    }

    let sqrt_m: Vec<f64> = eigen.eigenvalues().iter().map(|l| l.sqrt()).collect();
    let mut loadings = eigen.eigenvectors().clone_owned();
    let mut projection = eigen.eigenvectors().clone_owned();
    for j in 0..r {
        let mut lcol = loadings.column_mut(j);
        lcol *= sqrt_m[j];
        let mut pcol = projection.column_mut(j);
        pcol /= sqrt_m[j];
    }
    let factors = panel.values() * projection;
    let residuals = panel.values() - &factors * loadings.transpose();
    let idio_variances = residual_mean_squares(&residuals);

    Ok(FactorModelFit {
        loadings,
        idio_variances,
        factors,
        residuals,
        r,
        method: FitMethod::Pc,
        diagnostics: FitDiagnostics {
            converged: true,
            eigengap_warning: eigen.eigengap_warning,
            ..FitDiagnostics::default()
        },
    })
}

/// Per-column mean of squared residuals with the 1/T normalization.
pub(crate) fn residual_mean_squares(residuals: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    let t = residuals.nrows() as f64;
    nalgebra::DVector::from_iterator(
        residuals.ncols(),
        residuals.column_iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / t),
    )
}

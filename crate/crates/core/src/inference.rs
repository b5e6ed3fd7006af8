//! Asymptotic covariance of the loading estimates: the per-series Bartlett
//! (Newey–West) HAC estimator of the long-run covariance of `F_t·ξ_it`,
//! standard errors and confidence intervals built on it, and the diagnostic
//! gap between the factor-model score and the observed-factor score.

use nalgebra::{DMatrix, DVector};

use crate::model::{FactorModelFit, PanelData};
use crate::qml::score_loadings;
use crate::{Error, Result};

/// Truncation lag choice for the HAC sum. `Auto` resolves to the Newey–West
/// rule `floor(4·(T/100)^{2/9})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bandwidth {
    Auto,
    Fixed(usize),
}

/// HAC options; the kernel is fixed to Bartlett.
#[derive(Debug, Clone, Copy)]
pub struct HacOptions {
    pub bandwidth: Bandwidth,
}

impl Default for HacOptions {
    fn default() -> Self {
        Self { bandwidth: Bandwidth::Auto }
    }
}

/// The Newey–West automatic truncation lag.
pub fn auto_bandwidth(t: usize) -> usize {
    (4.0 * (t as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Per-series r×r long-run covariances `Φ̂_i` with the bandwidth used.
#[derive(Debug, Clone)]
pub struct HacCovariance {
    per_series: Vec<DMatrix<f64>>,
    bandwidth_used: usize,
}

impl HacCovariance {
    pub fn n_series(&self) -> usize {
        self.per_series.len()
    }

    pub fn phi(&self, series: usize) -> &DMatrix<f64> {
        &self.per_series[series]
    }

    pub fn bandwidth_used(&self) -> usize {
        self.bandwidth_used
    }
}

/// Bartlett-weighted HAC estimate of `Φ_i = lrvar(F_t ξ_it)` for every
/// series:
/// `Φ̂_i = (1/T)Σ_t F̂_tF̂_t'ξ̂²_it + Σ_{k=1}^m (1 − k/(m+1))·[Γ̂_k + Γ̂_k']`
/// with `Γ̂_k = (1/T)Σ_{t>k} F̂_tF̂_{t-k}'ξ̂_itξ̂_{it-k}`.
pub fn hac_phi(
    factors: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    options: HacOptions,
) -> Result<HacCovariance> {
    let t = factors.nrows();
    let r = factors.ncols();
    let n = residuals.ncols();
    if residuals.nrows() != t {
        return Err(Error::InvalidInput(format!(
            "factors have {t} periods but residuals have {}",
            residuals.nrows()
        )));
    }
    let m = match options.bandwidth {
        Bandwidth::Auto => auto_bandwidth(t),
        Bandwidth::Fixed(m) => m,
    };
    if m >= t {
        return Err(Error::InvalidInput(format!(
            "bandwidth {m} must be smaller than T = {t}"
        )));
    }

    let mut per_series = Vec::with_capacity(n);
    for i in 0..n {
        let mut phi = DMatrix::zeros(r, r);
        for trow in 0..t {
            let w = residuals[(trow, i)];
            let f = factors.row(trow);
            for a in 0..r {
                for b in 0..r {
                    phi[(a, b)] += f[a] * f[b] * w * w;
                }
            }
        }
        phi /= t as f64;
        for k in 1..=m {
            let weight = 1.0 - k as f64 / (m as f64 + 1.0);
            let mut gamma_k = DMatrix::zeros(r, r);
            for trow in k..t {
                let w = residuals[(trow, i)] * residuals[(trow - k, i)];
                let f_now = factors.row(trow);
                let f_lag = factors.row(trow - k);
                for a in 0..r {
                    for b in 0..r {
                        gamma_k[(a, b)] += f_now[a] * f_lag[b] * w;
                    }
                }
            }
            gamma_k /= t as f64;
            phi += weight * (&gamma_k + gamma_k.transpose());
        }
        per_series.push(phi);
    }
    Ok(HacCovariance {
        per_series,
        bandwidth_used: m,
    })
}

/// One confidence interval for a single loading entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-loading confidence intervals
/// `λ̂_ij ± z_{(1+level)/2}·√(Φ̂_{i,jj}/T)`, returned as an n×r table.
pub fn loading_confidence_intervals(
    fit: &FactorModelFit,
    hac: &HacCovariance,
    level: f64,
) -> Result<Vec<Vec<ConfidenceInterval>>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!(
            "confidence level {level} must lie strictly between 0 and 1"
        )));
    }
    let n = fit.n_series();
    if hac.n_series() != n {
        return Err(Error::InvalidInput(format!(
            "fit has {n} series but the HAC covariance has {}",
            hac.n_series()
        )));
    }
    let t = fit.n_periods() as f64;
    let z = normal_quantile((1.0 + level) / 2.0);
    let mut table = Vec::with_capacity(n);
    for i in 0..n {
        let phi = hac.phi(i);
        let mut row = Vec::with_capacity(fit.r);
        for j in 0..fit.r {
            let estimate = fit.loadings[(i, j)];
            let std_error = (phi[(j, j)].max(0.0) / t).sqrt();
            row.push(ConfidenceInterval {
                estimate,
                std_error,
                lower: estimate - z * std_error,
                upper: estimate + z * std_error,
            });
        }
        table.push(row);
    }
    Ok(table)
}

/// `(1/√T)·‖s_i(X;φ) − (1/σ_i²)Σ_t ξ_it F_t'‖`: the distance between row i
/// of the factor-model score and the observed-factor score, evaluated at the
/// true parameters. Simulation diagnostic; decays as the cross-section grows.
pub fn score_equivalence_gap(
    panel: &PanelData,
    true_loadings: &DMatrix<f64>,
    true_variances: &DVector<f64>,
    true_factors: &DMatrix<f64>,
    series: usize,
) -> Result<f64> {
    let n = panel.n_series();
    let t = panel.n_periods();
    if series >= n {
        return Err(Error::InvalidInput(format!(
            "series index {series} out of range for n = {n}"
        )));
    }
    if true_factors.nrows() != t {
        return Err(Error::InvalidInput("factor matrix has the wrong number of rows".into()));
    }
    let score = score_loadings(panel.values(), true_loadings, true_variances)?;
    let r = true_loadings.ncols();
    let mut conditional = DVector::zeros(r);
    for trow in 0..t {
        let mut xi = panel.values()[(trow, series)];
        for j in 0..r {
            xi -= true_loadings[(series, j)] * true_factors[(trow, j)];
        }
        for j in 0..r {
            conditional[j] += xi * true_factors[(trow, j)];
        }
    }
    conditional /= true_variances[series];
    let mut gap_sq = 0.0;
    for j in 0..r {
        let d = score[(series, j)] - conditional[j];
        gap_sq += d * d;
    }
    Ok((gap_sq / t as f64).sqrt())
}

/// Inverse standard normal CDF by Acklam's rational approximation
/// (relative error below 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must be in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

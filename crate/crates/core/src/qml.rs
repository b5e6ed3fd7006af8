//! Quasi maximum likelihood estimation of the loadings.
//!
//! The estimators here maximize the Gaussian likelihood of an exact factor
//! model in which the idiosyncratic components are treated as serially
//! uncorrelated:
//!
//! * [`fit_qml_em`] — EM maximization with a diagonal idiosyncratic
//!   covariance, started from the principal-components solution;
//! * [`fit_qml_homoskedastic`] — the closed form under `Σ^ξ = σ²I`;
//! * [`fit_qml_unrestricted`] — the global maximizer when the idiosyncratic
//!   covariance is left unrestricted, which coincides with the PC loadings
//!   and implies `Γ̂^ξ = Γ̂^x − Λ̂Λ̂'`.
//!
//! Every `(ΛΛ' + Σ)^{-1}` application goes through the Woodbury identity so
//! the per-iteration cost stays linear in n; an n×n matrix is never inverted.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::factors::{factors_gls, factors_ols};
use crate::model::{
    normalize_column_signs, sample_covariance, symmetric_eigen_desc, CovarianceEstimate,
    CovarianceKind, FactorModelFit, FitDiagnostics, FitMethod, PanelData,
};
use crate::pca::fit_pc;
use crate::{Error, Result};

/// Starting point for the EM iteration.
#[derive(Debug, Clone)]
pub enum EmInit {
    /// Initialize at the principal-components fit (deterministic, consistent).
    Pc,
    /// Caller-supplied loadings and idiosyncratic variances.
    Provided {
        loadings: DMatrix<f64>,
        variances: DVector<f64>,
    },
}

/// EM controls. `variance_floor` is relative: the absolute floor is
/// `variance_floor` times the mean sample variance of the panel, guarding
/// against Heywood cases.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iterations: usize,
    pub loglik_rel_tol: f64,
    /// Threshold against which the reported first-order-condition residual
    /// can be judged; not used as a stopping rule.
    pub foc_tol: f64,
    pub variance_floor: f64,
    pub init: EmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            loglik_rel_tol: 1e-8,
            foc_tol: 1e-6,
            variance_floor: 1e-8,
            init: EmInit::Pc,
        }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        if self.loglik_rel_tol <= 0.0 || self.foc_tol <= 0.0 || self.variance_floor <= 0.0 {
            return Err(Error::InvalidInput("EM tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Woodbury factorization of `Ω = ΛΛ' + Σ` for diagonal positive Σ.
/// Holds `Σ^{-1}Λ` and a Cholesky factor of `K = I_r + Λ'Σ^{-1}Λ`.
struct WoodburyOmega {
    sinv_loadings: DMatrix<f64>,
    chol_k: Cholesky<f64, Dyn>,
    logdet_omega: f64,
}

impl WoodburyOmega {
    fn new(loadings: &DMatrix<f64>, idio_variances: &DVector<f64>) -> Result<Self> {
        let n = loadings.nrows();
        if idio_variances.len() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n} idiosyncratic variances, got {}",
                idio_variances.len()
            )));
        }
        if idio_variances.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(
                "idiosyncratic variances must be strictly positive".into(),
            ));
        }
        let r = loadings.ncols();
        let mut sinv_loadings = loadings.clone();
        for i in 0..n {
            let s = idio_variances[i];
            for j in 0..r {
                sinv_loadings[(i, j)] /= s;
            }
        }
        let k = DMatrix::identity(r, r) + loadings.tr_mul(&sinv_loadings);
        let chol_k = Cholesky::new(k).ok_or_else(|| {
            Error::DegenerateModel("I + Λ'Σ^{-1}Λ is not positive definite".into())
        })?;
        let logdet_k = 2.0 * chol_k.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let logdet_omega = logdet_k + idio_variances.iter().map(|s| s.ln()).sum::<f64>();
        Ok(Self {
            sinv_loadings,
            chol_k,
            logdet_omega,
        })
    }

    /// `Ω^{-1}Λ = Σ^{-1}Λ K^{-1}` (first Woodbury identity).
    fn omega_inv_loadings(&self) -> DMatrix<f64> {
        let mut rhs = self.sinv_loadings.transpose();
        self.chol_k.solve_mut(&mut rhs);
        rhs.transpose()
    }

    /// Applies `Ω^{-1}` to an n×m matrix through the second Woodbury
    /// identity: `Σ^{-1}C − Σ^{-1}Λ K^{-1} Λ'Σ^{-1}C`.
    fn omega_inv_apply(
        &self,
        c: &DMatrix<f64>,
        idio_variances: &DVector<f64>,
        loadings: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let mut sinv_c = c.clone();
        for i in 0..c.nrows() {
            let s = idio_variances[i];
            for j in 0..c.ncols() {
                sinv_c[(i, j)] /= s;
            }
        }
        let mut inner = loadings.tr_mul(&sinv_c);
        self.chol_k.solve_mut(&mut inner);
        &sinv_c - &self.sinv_loadings * inner
    }
}

fn check_dims(data: &DMatrix<f64>, loadings: &DMatrix<f64>) -> Result<()> {
    if data.ncols() != loadings.nrows() {
        return Err(Error::InvalidInput(format!(
            "panel has {} series but loadings have {} rows",
            data.ncols(),
            loadings.nrows()
        )));
    }
    Ok(())
}

/// Log-likelihood of the exact factor model with diagonal idiosyncratic
/// covariance, constant term omitted:
/// `-(T/2)·log det(ΛΛ'+Σ) − (1/2)·Σ_t x_t'(ΛΛ'+Σ)^{-1}x_t`.
///
/// Evaluated through the Woodbury and matrix-determinant-lemma reductions in
/// O(nT·r + n·r²); the n×n matrix is never formed.
pub fn loglik_exact_diag(
    data: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    idio_variances: &DVector<f64>,
) -> Result<f64> {
    check_dims(data, loadings)?;
    let t = data.nrows() as f64;
    if loadings.ncols() == 0 {
        if idio_variances.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput(
                "idiosyncratic variances must be strictly positive".into(),
            ));
        }
        let logdet: f64 = idio_variances.iter().map(|s| s.ln()).sum();
        let mut quad = 0.0;
        for i in 0..data.ncols() {
            let s = idio_variances[i];
            quad += data.column(i).iter().map(|v| v * v).sum::<f64>() / s;
        }
        return Ok(-t / 2.0 * logdet - 0.5 * quad);
    }
    let wood = WoodburyOmega::new(loadings, idio_variances)?;
    let mut q1 = 0.0;
    for i in 0..data.ncols() {
        let s = idio_variances[i];
        q1 += data.column(i).iter().map(|v| v * v).sum::<f64>() / s;
    }
    let z = data * &wood.sinv_loadings;
    let mut ztz = z.tr_mul(&z);
    wood.chol_k.solve_mut(&mut ztz);
    let q2 = ztz.trace();
    Ok(-t / 2.0 * wood.logdet_omega - 0.5 * (q1 - q2))
}

/// Gradient of [`loglik_exact_diag`] with respect to the loadings:
/// `T·[Ω^{-1}Γ̂^x Ω^{-1}Λ − Ω^{-1}Λ]` with `Ω = ΛΛ'+Σ`, computed through the
/// Woodbury identities.
pub fn score_loadings(
    data: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    idio_variances: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(data, loadings)?;
    let t = data.nrows() as f64;
    let wood = WoodburyOmega::new(loadings, idio_variances)?;
    let b = wood.omega_inv_loadings();
    // Γ̂^x Ω^{-1}Λ = X'(XB)/T without forming the n×n covariance.
    let xb = data * &b;
    let c = data.tr_mul(&xb) / t;
    let d = wood.omega_inv_apply(&c, idio_variances, loadings);
    Ok((d - b) * t)
}

/// One EM iteration for the diagonal-covariance likelihood.
///
/// E-step: `β = Λ'Ω^{-1}`, `m_t = βx_t`, `S = I − βΛ + βΓ̂^xβ'`.
/// M-step: `Λ' = (Σ_t x_t m_t'/T)·S^{-1}`,
/// `σ'_i = [Γ̂^x]_{ii} − (Λ'·(Σ_t m_t x_t'/T))_{ii}`, floored at
/// `variance_floor`. The log-likelihood never decreases.
pub fn em_step(
    data: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    idio_variances: &DVector<f64>,
    variance_floor: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_dims(data, loadings)?;
    let t = data.nrows() as f64;
    let n = data.ncols();
    let r = loadings.ncols();
    let wood = WoodburyOmega::new(loadings, idio_variances)?;
    let b = wood.omega_inv_loadings(); // n×r, β = b'
    let m = data * &b; // T×r, rows m_t'
    let mut s = DMatrix::identity(r, r) - b.tr_mul(loadings) + m.tr_mul(&m) / t;
    // symmetrize against last-ulp asymmetry before factorizing
    for i in 0..r {
        for j in 0..i {
            let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = avg;
            s[(j, i)] = avg;
        }
    }
    let chol_s = Cholesky::new(s)
        .ok_or_else(|| Error::DegenerateModel("singular E-step second-moment matrix".into()))?;
    let c = data.tr_mul(&m) / t; // n×r, Σ_t x_t m_t'/T
    let mut rhs = c.transpose();
    chol_s.solve_mut(&mut rhs);
    let new_loadings = rhs.transpose();
    let mut new_variances = DVector::zeros(n);
    for i in 0..n {
        let gx_ii = data.column(i).iter().map(|v| v * v).sum::<f64>() / t;
        let correction: f64 = (0..r).map(|j| new_loadings[(i, j)] * c[(i, j)]).sum();
        new_variances[i] = (gx_ii - correction).max(variance_floor);
    }
    Ok((new_loadings, new_variances))
}

/// EM maximization of the diagonal-covariance likelihood, started at the PC
/// solution. Convergence is declared on the relative log-likelihood change;
/// the returned loadings satisfy the identification convention (applied by
/// [`identify_rotation`], which leaves the attained likelihood unchanged) and
/// the factors are filled in by GLS.
///
/// Non-convergence within `max_iterations` is reported through
/// `diagnostics.converged`, not as an error.
pub fn fit_qml_em(panel: &PanelData, r: usize, config: &EmConfig) -> Result<FactorModelFit> {
    config.validate()?;
    let (t, n) = (panel.n_periods(), panel.n_series());
    if r == 0 || r >= n.min(t) {
        return Err(Error::InvalidInput(format!(
            "r = {r} must satisfy 1 <= r < min(n, T) = {}",
            n.min(t)
        )));
    }
    let data = panel.values();
    let mean_sample_var =
        data.iter().map(|v| v * v).sum::<f64>() / (t as f64 * n as f64);
    let floor = config.variance_floor * mean_sample_var.max(f64::MIN_POSITIVE);

    let mut eigengap_warning = false;
    let (mut loadings, mut variances) = match &config.init {
        EmInit::Pc => {
            let pc = fit_pc(panel, r)?;
            eigengap_warning = pc.diagnostics.eigengap_warning;
            (pc.loadings, pc.idio_variances)
        }
        EmInit::Provided { loadings, variances } => {
            if loadings.nrows() != n || loadings.ncols() != r || variances.len() != n {
                return Err(Error::InvalidInput(
                    "provided initial values have the wrong shape".into(),
                ));
            }
            (loadings.clone(), variances.clone())
        }
    };
    for v in variances.iter_mut() {
        *v = v.max(floor);
    }

    let mut trace = vec![loglik_exact_diag(data, &loadings, &variances)?];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=config.max_iterations {
        let (l_next, v_next) = em_step(data, &loadings, &variances, floor)?;
        loadings = l_next;
        variances = v_next;
        let next = loglik_exact_diag(data, &loadings, &variances)?;
        let prev = *trace.last().unwrap();
        trace.push(next);
        iterations = it;
        if (next - prev).abs() < config.loglik_rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    let identified = identify_rotation(&loadings)?;
    let near_tie_warning = {
        let col_sq: Vec<f64> = (0..r).map(|j| identified.column(j).norm_squared()).collect();
        (0..r.saturating_sub(1)).any(|j| col_sq[j] - col_sq[j + 1] < 1e-10 * col_sq[0])
    };
    let score = score_loadings(data, &identified, &variances)?;
    let foc_residual = score.norm() / (t as f64 * ((n * r) as f64).sqrt());

    let factors = factors_gls(panel, &identified, &variances)?;
    let residuals = data - &factors * identified.transpose();
    Ok(FactorModelFit {
        loadings: identified,
        idio_variances: variances,
        factors,
        residuals,
        r,
        method: FitMethod::QmlEm,
        diagnostics: FitDiagnostics {
            loglik_trace: trace,
            iterations,
            converged,
            foc_residual: Some(foc_residual),
            eigengap_warning,
            rotation_applied: true,
            near_tie_warning,
            min_implied_idio_eigenvalue: None,
        },
    })
}

/// Closed-form QML under homoskedastic idiosyncratic components:
/// `σ̂² = (n−r)^{-1}·Σ_{j>r} μ̂^x_j` and `Λ̂ = V̂(M̂ − σ̂²I)^{1/2}`.
pub fn fit_qml_homoskedastic(panel: &PanelData, r: usize) -> Result<FactorModelFit> {
    let (t, n) = (panel.n_periods(), panel.n_series());
    if r == 0 || r >= n.min(t) {
        return Err(Error::InvalidInput(format!(
            "r = {r} must satisfy 1 <= r < min(n, T) = {}",
            n.min(t)
        )));
    }
    let cov = sample_covariance(panel);
    let (values, vectors) = symmetric_eigen_desc(cov.matrix());
    let sigma2 = values.iter().skip(r).sum::<f64>() / (n - r) as f64;
    if values.iter().take(r).any(|&m| m <= sigma2) {
        return Err(Error::DegenerateModel(format!(
            "no factor structure: a top-{r} eigenvalue does not exceed the tail mean {sigma2:.3e}"
        )));
    }
    let mut loadings = vectors.columns(0, r).into_owned();
    for j in 0..r {
        let scale = (values[j] - sigma2).sqrt();
        let mut col = loadings.column_mut(j);
        col *= scale;
    }
    let lambda1 = values[0];
    let eigengap_warning = values[r - 1] - values[r] < 1e-10 * lambda1.abs().max(f64::MIN_POSITIVE);

    // With Σ = σ̂²I the GLS weights cancel, so OLS recovers the factors; this
    // also covers the noiseless σ̂² = 0 case.
    let factors = factors_ols(panel, &loadings)?;
    let residuals = panel.values() - &factors * loadings.transpose();
    Ok(FactorModelFit {
        loadings,
        idio_variances: DVector::from_element(n, sigma2),
        factors,
        residuals,
        r,
        method: FitMethod::QmlHomo,
        diagnostics: FitDiagnostics {
            converged: true,
            eigengap_warning,
            ..FitDiagnostics::default()
        },
    })
}

/// The idiosyncratic covariance implied by a loadings matrix:
/// `Γ̂^ξ = Γ̂^x − ΛΛ'`.
pub fn implied_idio_covariance(panel: &PanelData, loadings: &DMatrix<f64>) -> CovarianceEstimate {
    let cov = sample_covariance(panel);
    let m = cov.matrix() - loadings * loadings.transpose();
    CovarianceEstimate::new(m, CovarianceKind::ImpliedIdio)
}

/// Maximizer of the likelihood with *unrestricted* idiosyncratic covariance,
/// characterized by `Λ̂Λ̂' + Γ̂^ξ = Γ̂^x`: the loadings coincide with the PC
/// estimator and the implied covariance is the residual `Γ̂^x − Λ̂Λ̂'`. The
/// first-order-condition residual `‖Λ̂'Ω^{-1}(Γ̂^x−Λ̂Λ̂'−Γ̂^ξ)‖` is zero by
/// construction and is recorded in the diagnostics together with the smallest
/// eigenvalue of `Γ̂^ξ`.
pub fn fit_qml_unrestricted(panel: &PanelData, r: usize) -> Result<FactorModelFit> {
    let pc = fit_pc(panel, r)?;
    let gamma_xi = implied_idio_covariance(panel, &pc.loadings);
    let (xi_values, _) = symmetric_eigen_desc(gamma_xi.matrix());
    let min_eig = xi_values[xi_values.len() - 1];

    let cov = sample_covariance(panel);
    let llt = &pc.loadings * pc.loadings.transpose();
    let resid = cov.matrix() - &llt - gamma_xi.matrix();
    let foc_residual = if resid.iter().all(|&v| v == 0.0) {
        0.0
    } else {
        // Ω = Λ̂Λ̂' + Γ̂^ξ equals Γ̂^x by construction.
        let omega = &llt + gamma_xi.matrix();
        omega
            .lu()
            .solve(&resid)
            .map(|s| (pc.loadings.transpose() * s).norm())
            .unwrap_or(f64::NAN)
    };

    let idio_variances = gamma_xi.matrix().diagonal();
    Ok(FactorModelFit {
        loadings: pc.loadings,
        idio_variances,
        factors: pc.factors,
        residuals: pc.residuals,
        r,
        method: FitMethod::QmlUnrestricted,
        diagnostics: FitDiagnostics {
            converged: true,
            foc_residual: Some(foc_residual),
            eigengap_warning: pc.diagnostics.eigengap_warning,
            min_implied_idio_eigenvalue: Some(min_eig),
            ..FitDiagnostics::default()
        },
    })
}

/// Rotates a full-column-rank loadings matrix into the identification
/// convention: from the thin SVD `Λ = U·D·V'` the result is `U·D` with
/// singular values descending and the first-row sign convention applied.
/// `ΛΛ'` and the column space are preserved; the map is idempotent.
pub fn identify_rotation(loadings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = loadings.ncols();
    if r == 0 {
        return Ok(loadings.clone());
    }
    let svd = loadings.clone().svd(true, false);
    let u = svd.u.as_ref().expect("u requested");
    let sv = &svd.singular_values;
    let max_sv = sv.iter().cloned().fold(0.0_f64, f64::max);
    if sv.iter().any(|&s| s < 1e-12 * max_sv) || max_sv == 0.0 {
        return Err(Error::DegenerateModel("loadings are rank deficient".into()));
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap().then(a.cmp(&b)));
    let mut out = DMatrix::zeros(loadings.nrows(), r);
    for (j, &k) in order.iter().enumerate() {
        let col = u.column(k) * sv[k];
        out.set_column(j, &col);
    }
    normalize_column_signs(&mut out);
    Ok(out)
}

//! Core data types, panel preprocessing, the sample covariance, and the
//! symmetric eigendecomposition conventions shared by every estimator.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Entries of an eigenvector below this magnitude are treated as zero when
/// fixing the sign of the vector.
pub(crate) const SIGN_EPS: f64 = 1e-12;

/// An eigengap `λ_r − λ_{r+1}` below this fraction of `λ_1` is flagged as
/// degenerate in the diagnostics.
const EIGENGAP_TOL: f64 = 1e-10;

/// A T×n panel of observations, time in rows, series in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    values: DMatrix<f64>,
    demeaned: bool,
    column_means: DVector<f64>,
}

impl PanelData {
    /// Wraps a raw data matrix. Requires `T ≥ 2`, `n ≥ 1` and finite entries.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::InvalidInput(format!(
                "panel needs at least 2 time periods, got {}",
                values.nrows()
            )));
        }
        if values.ncols() < 1 {
            return Err(Error::InvalidInput("panel needs at least 1 series".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("panel contains non-finite entries".into()));
        }
        let n = values.ncols();
        Ok(Self {
            values,
            demeaned: false,
            column_means: DVector::zeros(n),
        })
    }

    /// Number of time periods T.
    pub fn n_periods(&self) -> usize {
        self.values.nrows()
    }

    /// Number of series n.
    pub fn n_series(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Whether column means have been removed.
    pub fn is_demeaned(&self) -> bool {
        self.demeaned
    }

    /// The column means subtracted so far (zeros if none).
    pub fn column_means(&self) -> &DVector<f64> {
        &self.column_means
    }
}

/// Removes the column means. The subtracted means are accumulated in
/// `column_means`, so the operation is idempotent up to rounding.
pub fn demean(panel: &PanelData) -> PanelData {
    let t = panel.n_periods();
    let n = panel.n_series();
    let mut values = panel.values.clone();
    let mut means = panel.column_means.clone();
    for j in 0..n {
        let mean = values.column(j).sum() / t as f64;
        for i in 0..t {
            values[(i, j)] -= mean;
        }
        means[j] += mean;
    }
    PanelData {
        values,
        demeaned: true,
        column_means: means,
    }
}

/// Which population object an n×n covariance estimate stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    /// The second-moment matrix of the observed panel.
    SampleX,
    /// The common-component covariance implied by a fit.
    ImpliedCommon,
    /// The idiosyncratic covariance implied by a fit.
    ImpliedIdio,
}

/// An n×n symmetric covariance matrix with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    matrix: DMatrix<f64>,
    kind: CovarianceKind,
}

impl CovarianceEstimate {
    pub fn new(matrix: DMatrix<f64>, kind: CovarianceKind) -> Self {
        Self { matrix, kind }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Second-moment matrix `(1/T)·X'X` of the panel. The caller is expected to
/// have demeaned the panel first, otherwise these are raw second moments.
pub fn sample_covariance(panel: &PanelData) -> CovarianceEstimate {
    let t = panel.n_periods() as f64;
    let mut m = panel.values.tr_mul(&panel.values);
    m /= t;
    CovarianceEstimate::new(m, CovarianceKind::SampleX)
}

/// The top slice of the spectrum of a symmetric matrix: the `r` largest
/// eigenvalues in descending order and the matching orthonormal,
/// sign-normalized eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    source_dim: usize,
    /// Set when `λ_r − λ_{r+1} < 1e-10·λ_1`: the factor space is not
    /// well separated in-sample.
    pub eigengap_warning: bool,
}

impl EigenSystem {
    /// Eigenvalues, descending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// n×r orthonormal eigenvectors, one column per eigenvalue.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn r(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Flips the sign of each column so that its first entry of magnitude at
/// least `SIGN_EPS` is positive. Columns of smaller magnitude throughout are
/// left untouched.
pub(crate) fn normalize_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let lead = m.column(j).iter().find(|v| v.abs() >= SIGN_EPS).copied();
        if let Some(v) = lead {
            if v < 0.0 {
                for i in 0..m.nrows() {
                    m[(i, j)] = -m[(i, j)];
                }
            }
        }
    }
}

/// Full spectrum of a symmetric matrix: eigenvalues descending, eigenvectors
/// sign-normalized. Ties are broken by the original eigensolver order so the
/// result is deterministic.
pub(crate) fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (j, &k) in order.iter().enumerate() {
        vectors.set_column(j, &eig.eigenvectors.column(k));
    }
    normalize_column_signs(&mut vectors);
    (values, vectors)
}

/// Top-`r` eigenpairs of a symmetric covariance matrix, descending and
/// sign-normalized. Requires `1 ≤ r < n`. A near-zero gap between the r-th
/// and (r+1)-th eigenvalue sets `eigengap_warning` rather than failing.
pub fn top_r_eigen(cov: &CovarianceEstimate, r: usize) -> Result<EigenSystem> {
    let n = cov.dim();
    if r == 0 {
        return Err(Error::InvalidInput("r must be positive".into()));
    }
    if r >= n {
        return Err(Error::InvalidInput(format!("r = {r} must be smaller than n = {n}")));
    }
    let (values, vectors) = symmetric_eigen_desc(cov.matrix());
    let lambda1 = values[0];
    let eigengap_warning = values[r - 1] - values[r] < EIGENGAP_TOL * lambda1.abs().max(f64::MIN_POSITIVE);
    Ok(EigenSystem {
        eigenvalues: DVector::from_iterator(r, values.iter().take(r).copied()),
        eigenvectors: vectors.columns(0, r).into_owned(),
        source_dim: n,
        eigengap_warning,
    })
}

/// How the loadings of a fit were estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Pc,
    QmlEm,
    QmlHomo,
    QmlUnrestricted,
    OlsOracle,
}

impl FitMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitMethod::Pc => "pc",
            FitMethod::QmlEm => "qml_em",
            FitMethod::QmlHomo => "qml_homo",
            FitMethod::QmlUnrestricted => "qml_unrestricted",
            FitMethod::OlsOracle => "ols_oracle",
        }
    }
}

/// Convergence and conditioning record attached to a fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    /// Log-likelihood after each EM iteration (empty for closed forms).
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖∂ℓ/∂Λ‖ / (T·√(nr))` at the returned estimate, when meaningful.
    pub foc_residual: Option<f64>,
    pub eigengap_warning: bool,
    /// An identification rotation was applied to the raw maximizer.
    pub rotation_applied: bool,
    /// Two of the top-r eigenvalues (or squared singular values) were nearly
    /// tied, so column order is fragile.
    pub near_tie_warning: bool,
    /// Smallest eigenvalue of the implied idiosyncratic covariance
    /// (unrestricted QML only).
    pub min_implied_idio_eigenvalue: Option<f64>,
}

/// A fitted factor model: loadings under the identification convention
/// ((1/n)Λ'Λ diagonal descending, positive first row), per-series
/// idiosyncratic variances, factors, and residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelFit {
    pub loadings: DMatrix<f64>,
    pub idio_variances: DVector<f64>,
    pub factors: DMatrix<f64>,
    pub residuals: DMatrix<f64>,
    pub r: usize,
    pub method: FitMethod,
    pub diagnostics: FitDiagnostics,
}

impl FactorModelFit {
    pub fn n_series(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.factors.nrows()
    }

    /// The fitted common component `F·Λ'`.
    pub fn common_component(&self) -> DMatrix<f64> {
        &self.factors * self.loadings.transpose()
    }
}

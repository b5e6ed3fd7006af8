//! The Monte Carlo data-generating process: VAR(1) factors, banded
//! cross-correlated AR(1) idiosyncratic components, Gaussian or asymmetric
//! Laplace innovations, a per-series noise-to-signal calibration, and the
//! rotation of the simulated truth into the identification convention.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{symmetric_eigen_desc, PanelData};
use crate::{Error, Result};

/// Innovation law for both the factor and idiosyncratic shocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Gaussian,
    AsymLaplace,
}

/// Full parameterization of one simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub t: usize,
    pub r: usize,
    /// Cross-sectional decay of the idiosyncratic covariance band.
    pub tau: f64,
    /// Upper bound of the per-series AR(1) coefficients δ_i ~ U(0, delta).
    pub delta: f64,
    #[serde(default = "default_theta_range")]
    pub theta_range: (f64, f64),
    #[serde(default = "default_distribution")]
    pub distribution: Distribution,
    /// Half-width of the idiosyncratic covariance band |i−j| ≤ band.
    #[serde(default = "default_band")]
    pub band: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    pub seed: u64,
}

fn default_theta_range() -> (f64, f64) {
    (0.25, 0.5)
}

fn default_distribution() -> Distribution {
    Distribution::Gaussian
}

fn default_band() -> usize {
    10
}

fn default_burn_in() -> usize {
    100
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.t < 2 {
            return Err(Error::InvalidInput("need n >= 1 and T >= 2".into()));
        }
        if self.r == 0 || self.r >= self.n.min(self.t) {
            return Err(Error::InvalidInput(format!(
                "r = {} must satisfy 1 <= r < min(n, T) = {}",
                self.r,
                self.n.min(self.t)
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::InvalidInput(format!("tau = {} must lie in [0, 1)", self.tau)));
        }
        if self.delta < 0.0 {
            return Err(Error::InvalidInput(format!("delta = {} must be >= 0", self.delta)));
        }
        let (lo, hi) = self.theta_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidInput(format!(
                "theta_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg
    }
}

/// A simulated panel together with its identified truth. The decomposition
/// `panel = common + idio` holds exactly, `(1/T)F'F = I_r`, `(1/n)Λ'Λ` is
/// diagonal, and `FΛ'` reproduces the common component.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: PanelData,
    pub loadings: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    pub common: DMatrix<f64>,
    pub idio: DMatrix<f64>,
    pub config: DgpConfig,
}

/// Asymmetric Laplace law with location 0, asymmetry `kappa`, and rate
/// `λ = √((1+κ⁴)/κ²)`, recentered by its mean `(1/κ − κ)/λ` so draws have
/// mean 0 and variance exactly 1.
#[derive(Debug, Clone, Copy)]
pub struct AsymLaplace {
    kappa: f64,
    rate: f64,
    mean_offset: f64,
}

impl AsymLaplace {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidInput(format!("kappa = {kappa} must be positive")));
        }
        let rate = ((1.0 + kappa.powi(4)) / (kappa * kappa)).sqrt();
        let mean_offset = (1.0 / kappa - kappa) / rate;
        Ok(Self { kappa, rate, mean_offset })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// The exponential rate λ of the positive tail divided by κ (and of the
    /// negative tail times κ).
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// The mean of the un-centered law, subtracted from every draw.
    pub fn mean_offset(&self) -> f64 {
        self.mean_offset
    }

    /// Inverse-CDF draw from one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random::<f64>();
        let u = u.max(1e-300);
        let k2 = self.kappa * self.kappa;
        let p_neg = k2 / (1.0 + k2);
        let raw = if u < p_neg {
            (self.kappa / self.rate) * (u / p_neg).ln()
        } else {
            -((1.0 - u) / (1.0 - p_neg)).ln() / (self.rate * self.kappa)
        };
        raw - self.mean_offset
    }
}

/// `count` centered unit-variance asymmetric Laplace draws.
pub fn sample_asym_laplace<R: Rng + ?Sized>(
    kappa: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let law = AsymLaplace::new(kappa)?;
    Ok((0..count).map(|_| law.sample(rng)).collect())
}

/// What the positive-semidefinite repair of the target idiosyncratic
/// covariance had to do.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PsdRepair {
    /// Number of eigenvalues clipped up to the floor.
    pub clipped: usize,
    /// Largest upward adjustment applied to a clipped eigenvalue.
    pub max_adjustment: f64,
}

const PSD_FLOOR: f64 = 1e-8;

/// Target idiosyncratic covariance: diagonal `sigma2`, off-diagonal
/// `tau^|i−j|` inside the band `|i−j| ≤ band`. Eigenvalues below 1e-8 are
/// clipped to 1e-8 and the matrix rebuilt; the repair is reported.
pub fn build_idio_covariance(
    sigma2: &DVector<f64>,
    tau: f64,
    band: usize,
) -> Result<(DMatrix<f64>, PsdRepair)> {
    let (cov, _sqrt, repair) = build_idio_covariance_parts(sigma2, tau, band)?;
    Ok((cov, repair))
}

fn build_idio_covariance_parts(
    sigma2: &DVector<f64>,
    tau: f64,
    band: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, PsdRepair)> {
    if sigma2.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidInput("idiosyncratic variances must be positive".into()));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("tau = {tau} must lie in [0, 1)")));
    }
    let n = sigma2.len();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        cov[(i, i)] = sigma2[i];
        if tau > 0.0 {
            for j in (i + 1)..n.min(i + band + 1) {
                let v = tau.powi((j - i) as i32);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
    }
    let (values, vectors) = symmetric_eigen_desc(&cov);
    let mut repair = PsdRepair::default();
    let mut clipped_values = values.clone();
    for v in clipped_values.iter_mut() {
        if *v < PSD_FLOOR {
            repair.clipped += 1;
            repair.max_adjustment = repair.max_adjustment.max(PSD_FLOOR - *v);
            *v = PSD_FLOOR;
        }
    }
    if repair.clipped > 0 {
        let mut rebuilt = &vectors * DMatrix::from_diagonal(&clipped_values) * vectors.transpose();
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
                rebuilt[(i, j)] = avg;
                rebuilt[(j, i)] = avg;
            }
        }
        cov = rebuilt;
    }
    let sqrt_values = DVector::from_iterator(n, clipped_values.iter().map(|v| v.sqrt()));
    let sqrt = &vectors * DMatrix::from_diagonal(&sqrt_values) * vectors.transpose();
    Ok((cov, sqrt, repair))
}

/// Rescales a candidate VAR transition so its spectral norm is exactly 0.9.
pub(crate) fn scale_transition(a_check: &DMatrix<f64>) -> DMatrix<f64> {
    let spectral = a_check.clone().svd(false, false).singular_values.max();
    a_check * (0.9 / spectral)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Simulates one panel.
///
/// Factors follow a VAR(1) with spectral-norm-0.9 transition and
/// unit-variance innovations; idiosyncratic components follow per-series
/// AR(1) with banded cross-correlated shocks; the common component of each
/// series is scaled so its noise-to-signal ratio is exactly `θ_i`; the truth
/// is rotated into the identification convention via the eigendecomposition
/// of the common-component second-moment matrix.
pub fn simulate_panel(config: &DgpConfig) -> Result<SimulatedPanel> {
    config.validate()?;
    let (n, t, r) = (config.n, config.t, config.r);
    let total = config.burn_in + t;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // 1. loading seeds ℓ_ij ~ N(1, 1), row major
    let mut loading_seeds = DMatrix::zeros(n, r);
    for i in 0..n {
        for j in 0..r {
            let z: f64 = rng.sample(StandardNormal);
            loading_seeds[(i, j)] = 1.0 + z;
        }
    }

    // 2. VAR(1) transition with spectral norm 0.9
    let mut a_check = DMatrix::zeros(r, r);
    for j in 0..r {
        for k in 0..r {
            a_check[(j, k)] = if j == k {
                uniform(&mut rng, 0.5, 0.8)
            } else {
                uniform(&mut rng, 0.0, 0.3)
            };
        }
    }
    let transition = scale_transition(&a_check);

    // 3. factor path with burn-in, unit-variance innovations
    let factor_law = match config.distribution {
        Distribution::Gaussian => vec![],
        Distribution::AsymLaplace => (0..r)
            .map(|_| AsymLaplace::new(uniform(&mut rng, 0.9, 1.1)))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut f_state = DVector::zeros(r);
    let mut raw_factors = DMatrix::zeros(t, r);
    for step in 0..total {
        let mut u = DVector::zeros(r);
        for j in 0..r {
            u[j] = match config.distribution {
                Distribution::Gaussian => rng.sample(StandardNormal),
                Distribution::AsymLaplace => factor_law[j].sample(&mut rng),
            };
        }
        f_state = &transition * f_state + u;
        if step >= config.burn_in {
            raw_factors.set_row(step - config.burn_in, &f_state.transpose());
        }
    }

    // 4. idiosyncratic path: banded covariance, per-series AR(1)
    let sigma2_e = DVector::from_fn(n, |_, _| uniform(&mut rng, 0.5, 1.5));
    let (_cov, cov_sqrt, _repair) =
        build_idio_covariance_parts(&sigma2_e, config.tau, config.band)?;
    let idio_law = match config.distribution {
        Distribution::Gaussian => vec![],
        Distribution::AsymLaplace => (0..n)
            .map(|_| AsymLaplace::new(uniform(&mut rng, 0.9, 1.1)))
            .collect::<Result<Vec<_>>>()?,
    };
    let deltas = if config.delta > 0.0 {
        DVector::from_fn(n, |_, _| uniform(&mut rng, 0.0, config.delta))
    } else {
        DVector::zeros(n)
    };
    let mut xi_state = DVector::zeros(n);
    let mut idio = DMatrix::zeros(t, n);
    let mut z = DVector::zeros(n);
    for step in 0..total {
        for i in 0..n {
            z[i] = match config.distribution {
                Distribution::Gaussian => rng.sample(StandardNormal),
                Distribution::AsymLaplace => idio_law[i].sample(&mut rng),
            };
        }
        let e = &cov_sqrt * &z;
        for i in 0..n {
            xi_state[i] = deltas[i] * xi_state[i] + e[i];
        }
        if step >= config.burn_in {
            idio.set_row(step - config.burn_in, &xi_state.transpose());
        }
    }

    // 5. noise-to-signal calibration: scale each series' common component so
    //    Σ_t ξ²_it / Σ_t χ²_it = θ_i exactly
    let chi = &raw_factors * loading_seeds.transpose(); // T×n
    let thetas = DVector::from_fn(n, |_, _| {
        uniform(&mut rng, config.theta_range.0, config.theta_range.1)
    });
    let mut common = DMatrix::zeros(t, n);
    for i in 0..n {
        let sum_chi2: f64 = chi.column(i).iter().map(|v| v * v).sum();
        let sum_xi2: f64 = idio.column(i).iter().map(|v| v * v).sum();
        if sum_chi2 <= 0.0 || sum_xi2 <= 0.0 {
            return Err(Error::DegenerateDraw(format!(
                "series {i} has a degenerate common or idiosyncratic path"
            )));
        }
        let phi = (thetas[i] * sum_chi2 / sum_xi2).sqrt();
        let scale = 1.0 / phi;
        for trow in 0..t {
            common[(trow, i)] = chi[(trow, i)] * scale;
        }
    }
    let x = &common + &idio;

    // 6. rotate the truth into the identification convention
    let gamma_chi = common.tr_mul(&common) / t as f64;
    let (values, vectors) = symmetric_eigen_desc(&gamma_chi);
    if values.iter().take(r).any(|&v| v <= 0.0) {
        return Err(Error::DegenerateDraw(
            "common-component second-moment matrix is rank deficient".into(),
        ));
    }
    let top_vectors = vectors.columns(0, r).into_owned();
    let mut loadings = top_vectors.clone();
    let mut projection = top_vectors;
    for j in 0..r {
        let s = values[j].sqrt();
        let mut lcol = loadings.column_mut(j);
        lcol *= s;
        let mut pcol = projection.column_mut(j);
        pcol /= s;
    }
    let factors = &common * projection;

    Ok(SimulatedPanel {
        panel: PanelData::new(x)?,
        loadings,
        factors,
        common,
        idio,
        config: config.clone(),
    })
}

//! Replication harness: simulates panels over a grid of designs, estimates
//! the loadings by PC, QML-EM, and the oracle OLS on the true factors, and
//! tabulates mean squared errors, the QML–PC distance, and their ratio.
//!
//! Replications run in parallel with deterministically derived seeds and are
//! aggregated in replication order, so the output is byte-identical at any
//! thread count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::qml::{fit_qml_em, EmConfig};
use crate::simulate::{simulate_panel, DgpConfig, Distribution};
use crate::{pca::fit_pc, Error, Result};

/// Monte Carlo study configuration: a grid of designs, the number of
/// replications per cell, and the master seed every replication seed is
/// derived from. The `seed` field of the grid entries is ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConfig {
    pub grid: Vec<DgpConfig>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub master_seed: u64,
    /// Worker threads for the replication loop; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_replications() -> usize {
    500
}

impl McConfig {
    /// The standard comparison grid: n ∈ {20, 50, 100, 200}, T = 100, r = 2,
    /// (τ, δ) ∈ {(0, 0), (0.5, 0.5)} for one innovation law.
    pub fn standard_grid(distribution: Distribution, replications: usize, master_seed: u64) -> Self {
        let mut grid = Vec::new();
        for &(tau, delta) in &[(0.0, 0.0), (0.5, 0.5)] {
            for &n in &[20usize, 50, 100, 200] {
                grid.push(grid_cell(n, 100, 2, tau, delta, distribution));
            }
        }
        Self {
            grid,
            replications,
            master_seed,
            threads: None,
        }
    }
}

/// One design cell with the default band, burn-in, and θ range.
pub fn grid_cell(
    n: usize,
    t: usize,
    r: usize,
    tau: f64,
    delta: f64,
    distribution: Distribution,
) -> DgpConfig {
    DgpConfig {
        n,
        t,
        r,
        tau,
        delta,
        theta_range: (0.25, 0.5),
        distribution,
        band: 10,
        burn_in: 100,
        seed: 0,
    }
}

/// SplitMix64 step, used to derive independent replication seeds.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically mixes a master seed with stream coordinates
/// (cell index, replication index, resample attempt, ...).
pub fn derive_seed(master: u64, stream: &[u64]) -> u64 {
    let mut state = splitmix64(master);
    for &part in stream {
        state = splitmix64(state ^ part);
    }
    state
}

/// Loadings estimated in one replication, all sign-aligned to the truth.
#[derive(Debug, Clone)]
pub struct Replication {
    pub truth: DMatrix<f64>,
    pub ols: DMatrix<f64>,
    pub pc: DMatrix<f64>,
    pub qml: DMatrix<f64>,
    /// Columns whose sign had to be flipped to match the truth.
    pub sign_flips: usize,
    /// Degenerate draws redrawn before this panel was accepted.
    pub resamples: usize,
    pub em_converged: bool,
    /// `max_i ‖λ̂_i^QML − λ̂_i^PC‖` for this replication.
    pub qml_pc_max_row_dist: f64,
}

const MAX_RESAMPLE_ATTEMPTS: u64 = 32;

/// Oracle OLS estimator of the loadings given the true factors:
/// `Λ^OLS = X'F(F'F)^{-1}`.
fn ols_on_true_factors(data: &DMatrix<f64>, factors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = factors.tr_mul(factors);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::DegenerateModel("true factors are rank deficient".into()))?;
    let mut rhs = factors.tr_mul(data); // r×n
    chol.solve_mut(&mut rhs);
    Ok(rhs.transpose())
}

/// Flips estimate columns whose inner product with the matching truth column
/// is negative; returns the number of flips.
fn align_signs(estimate: &mut DMatrix<f64>, truth: &DMatrix<f64>) -> usize {
    let mut flips = 0;
    for j in 0..estimate.ncols() {
        let dot = estimate.column(j).dot(&truth.column(j));
        if dot < 0.0 {
            let mut col = estimate.column_mut(j);
            col.neg_mut();
            flips += 1;
        }
    }
    flips
}

/// Simulates one panel (redrawing degenerate draws with derived sub-seeds)
/// and estimates the loadings by PC, QML-EM, and oracle OLS.
pub fn run_replication(
    dgp: &DgpConfig,
    rep_seed: u64,
    em: &EmConfig,
) -> Result<Replication> {
    let mut resamples = 0;
    let sim = loop {
        let attempt_seed = derive_seed(rep_seed, &[resamples]);
        match simulate_panel(&dgp.with_seed(attempt_seed)) {
            Ok(sim) => break sim,
            Err(Error::DegenerateDraw(_)) if resamples + 1 < MAX_RESAMPLE_ATTEMPTS => {
                resamples += 1;
            }
            Err(e) => return Err(e),
        }
    };

    let pc_fit = fit_pc(&sim.panel, dgp.r)?;
    let qml_fit = fit_qml_em(&sim.panel, dgp.r, em)?;
    let mut ols = ols_on_true_factors(sim.panel.values(), &sim.factors)?;
    let mut pc = pc_fit.loadings;
    let mut qml = qml_fit.loadings;

    let mut sign_flips = 0;
    sign_flips += align_signs(&mut ols, &sim.loadings);
    sign_flips += align_signs(&mut pc, &sim.loadings);
    sign_flips += align_signs(&mut qml, &sim.loadings);

    let mut max_row_dist = 0.0f64;
    for i in 0..dgp.n {
        let mut row_sq = 0.0;
        for j in 0..dgp.r {
            let d = qml[(i, j)] - pc[(i, j)];
            row_sq += d * d;
        }
        max_row_dist = max_row_dist.max(row_sq.sqrt());
    }

    Ok(Replication {
        truth: sim.loadings,
        ols,
        pc,
        qml,
        sign_flips,
        resamples: resamples as usize,
        em_converged: qml_fit.diagnostics.converged,
        qml_pc_max_row_dist: max_row_dist,
    })
}

/// Aggregated metrics for one grid cell.
#[derive(Debug, Clone)]
pub struct McCellResult {
    pub r: usize,
    pub replications: usize,
    pub mse_ols: Vec<f64>,
    pub mse_ols_sd: Vec<f64>,
    pub mse_pc: Vec<f64>,
    pub mse_pc_sd: Vec<f64>,
    pub mse_qml: Vec<f64>,
    pub mse_qml_sd: Vec<f64>,
    /// Mean per-entry squared QML–PC distance per column.
    pub d: Vec<f64>,
    pub d_sd: Vec<f64>,
    /// `MSE^PC / MSE^QML` per column.
    pub mse_rel: Vec<f64>,
    pub sign_flips: usize,
    pub resamples: usize,
    pub em_nonconverged: usize,
    /// Per replication, in replication order: `max_i ‖λ̂_i^QML − λ̂_i^PC‖`.
    pub qml_pc_max_row_dist: Vec<f64>,
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let b = values.len();
    let mean = values.iter().sum::<f64>() / b as f64;
    if b < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    (mean, var.sqrt())
}

/// Column-wise mean squared deviation between two loading matrices.
fn column_msd(a: &DMatrix<f64>, b: &DMatrix<f64>, col: usize) -> f64 {
    let n = a.nrows() as f64;
    let mut s = 0.0;
    for i in 0..a.nrows() {
        let d = a[(i, col)] - b[(i, col)];
        s += d * d;
    }
    s / n
}

/// Reduces completed replications (in replication order) to cell metrics.
pub fn aggregate(replications: &[Replication]) -> McCellResult {
    assert!(!replications.is_empty(), "no replications to aggregate");
    let r = replications[0].truth.ncols();
    let b = replications.len();
    let mut result = McCellResult {
        r,
        replications: b,
        mse_ols: Vec::with_capacity(r),
        mse_ols_sd: Vec::with_capacity(r),
        mse_pc: Vec::with_capacity(r),
        mse_pc_sd: Vec::with_capacity(r),
        mse_qml: Vec::with_capacity(r),
        mse_qml_sd: Vec::with_capacity(r),
        d: Vec::with_capacity(r),
        d_sd: Vec::with_capacity(r),
        mse_rel: Vec::with_capacity(r),
        sign_flips: replications.iter().map(|rep| rep.sign_flips).sum(),
        resamples: replications.iter().map(|rep| rep.resamples).sum(),
        em_nonconverged: replications.iter().filter(|rep| !rep.em_converged).count(),
        qml_pc_max_row_dist: replications.iter().map(|rep| rep.qml_pc_max_row_dist).collect(),
    };
    for j in 0..r {
        let ols: Vec<f64> = replications.iter().map(|rep| column_msd(&rep.ols, &rep.truth, j)).collect();
        let pc: Vec<f64> = replications.iter().map(|rep| column_msd(&rep.pc, &rep.truth, j)).collect();
        let qml: Vec<f64> = replications.iter().map(|rep| column_msd(&rep.qml, &rep.truth, j)).collect();
        let d: Vec<f64> = replications.iter().map(|rep| column_msd(&rep.qml, &rep.pc, j)).collect();
        let (m, s) = mean_and_sd(&ols);
        result.mse_ols.push(m);
        result.mse_ols_sd.push(s);
        let (m, s) = mean_and_sd(&pc);
        result.mse_pc.push(m);
        result.mse_pc_sd.push(s);
        let (m, s) = mean_and_sd(&qml);
        result.mse_qml.push(m);
        result.mse_qml_sd.push(s);
        let (m, s) = mean_and_sd(&d);
        result.d.push(m);
        result.d_sd.push(s);
        result.mse_rel.push(result.mse_pc[j] / result.mse_qml[j]);
    }
    result
}

/// One completed grid cell.
#[derive(Debug, Clone)]
pub struct McCell {
    pub config: DgpConfig,
    pub result: McCellResult,
}

/// A completed Monte Carlo study.
#[derive(Debug, Clone)]
pub struct McResult {
    pub replications: usize,
    pub master_seed: u64,
    pub cells: Vec<McCell>,
}

/// Runs the whole grid. Replication seeds depend only on the master seed,
/// the cell index, and the replication index, and cells aggregate in
/// replication order, so the result does not depend on the thread count.
pub fn run_mc(config: &McConfig, em: &EmConfig) -> Result<McResult> {
    for cell in &config.grid {
        cell.validate()?;
    }
    if config.replications == 0 {
        return Err(Error::InvalidInput("replications must be at least 1".into()));
    }
    let run_all = || -> Result<Vec<McCell>> {
        config
            .grid
            .iter()
            .enumerate()
            .map(|(cell_idx, cell_cfg)| {
                let reps: Result<Vec<Replication>> = (0..config.replications)
                    .into_par_iter()
                    .map(|b| {
                        let rep_seed =
                            derive_seed(config.master_seed, &[cell_idx as u64, b as u64]);
                        run_replication(cell_cfg, rep_seed, em)
                    })
                    .collect();
                Ok(McCell {
                    config: cell_cfg.clone(),
                    result: aggregate(&reps?),
                })
            })
            .collect()
    };
    let cells = match config.threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::InvalidInput(format!("cannot build thread pool: {e}")))?;
            pool.install(run_all)?
        }
        None => run_all()?,
    };
    Ok(McResult {
        replications: config.replications,
        master_seed: config.master_seed,
        cells,
    })
}

fn distribution_name(d: Distribution) -> &'static str {
    match d {
        Distribution::Gaussian => "gaussian",
        Distribution::AsymLaplace => "asym_laplace",
    }
}

impl McResult {
    /// One CSV row per grid cell and metric, full-precision values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,t,r,tau,delta,distribution,metric,column,value\n");
        for cell in &self.cells {
            let cfg = &cell.config;
            let head = format!(
                "{},{},{},{},{},{}",
                cfg.n,
                cfg.t,
                cfg.r,
                cfg.tau,
                cfg.delta,
                distribution_name(cfg.distribution)
            );
            let res = &cell.result;
            for j in 0..res.r {
                let col = j + 1;
                for (metric, value) in [
                    ("mse_ols", res.mse_ols[j]),
                    ("mse_ols_sd", res.mse_ols_sd[j]),
                    ("mse_pc", res.mse_pc[j]),
                    ("mse_pc_sd", res.mse_pc_sd[j]),
                    ("mse_qml", res.mse_qml[j]),
                    ("mse_qml_sd", res.mse_qml_sd[j]),
                    ("d", res.d[j]),
                    ("d_sd", res.d_sd[j]),
                    ("mse_rel", res.mse_rel[j]),
                ] {
                    out.push_str(&format!("{head},{metric},{col},{value}\n"));
                }
            }
            for (metric, value) in [
                ("sign_flips", res.sign_flips),
                ("resamples", res.resamples),
                ("em_nonconverged", res.em_nonconverged),
            ] {
                out.push_str(&format!("{head},{metric},,{value}\n"));
            }
        }
        out
    }

    /// A two-block text table: MSEs per estimator, then the QML–PC
    /// comparison.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str("MSEs (per-replication sd in parentheses)\n");
        out.push_str(
            "   n    T  tau  del |        MSE1_OLS         MSE1_PC        MSE1_QML |        MSE2_OLS         MSE2_PC        MSE2_QML\n",
        );
        for cell in &self.cells {
            let cfg = &cell.config;
            let res = &cell.result;
            let mut line = format!(
                "{:4} {:4} {:4} {:4} |",
                cfg.n, cfg.t, cfg.tau, cfg.delta
            );
            for j in 0..res.r.min(2) {
                line.push_str(&format!(
                    " {:7.4} ({:.4}) {:7.4} ({:.4}) {:7.4} ({:.4})",
                    res.mse_ols[j],
                    res.mse_ols_sd[j],
                    res.mse_pc[j],
                    res.mse_pc_sd[j],
                    res.mse_qml[j],
                    res.mse_qml_sd[j],
                ));
                if j == 0 && res.r > 1 {
                    line.push_str(" |");
                }
            }
            line.push_str(&format!("   [{}]\n", distribution_name(cfg.distribution)));
            out.push_str(&line);
        }
        out.push_str("\nQML vs PC\n");
        out.push_str("   n    T  tau  del |          D1          D2 | MSE1_REL MSE2_REL\n");
        for cell in &self.cells {
            let cfg = &cell.config;
            let res = &cell.result;
            let mut line = format!(
                "{:4} {:4} {:4} {:4} |",
                cfg.n, cfg.t, cfg.tau, cfg.delta
            );
            for j in 0..res.r.min(2) {
                line.push_str(&format!(" {:11.3e}", res.d[j]));
            }
            line.push_str(" |");
            for j in 0..res.r.min(2) {
                line.push_str(&format!(" {:8.2}", res.mse_rel[j]));
            }
            line.push_str(&format!("   [{}]\n", distribution_name(cfg.distribution)));
            out.push_str(&line);
        }
        out
    }
}

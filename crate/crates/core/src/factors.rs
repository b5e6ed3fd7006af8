//! Factor recovery given estimated (or true) loadings: ordinary least
//! squares, GLS weighted by the idiosyncratic variances, and the linear
//! projection that adds the `+I_r` shrinkage of the joint-Gaussian
//! conditional mean.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::model::PanelData;
use crate::{Error, Result};

fn check_loadings(panel: &PanelData, loadings: &DMatrix<f64>) -> Result<()> {
    if loadings.nrows() != panel.n_series() {
        return Err(Error::InvalidInput(format!(
            "panel has {} series but loadings have {} rows",
            panel.n_series(),
            loadings.nrows()
        )));
    }
    if loadings.ncols() == 0 {
        return Err(Error::InvalidInput("loadings must have at least one column".into()));
    }
    Ok(())
}

fn check_variances(n: usize, idio_variances: &DVector<f64>) -> Result<()> {
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
    Ok(())
}

fn gram_cholesky(gram: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(gram)
        .ok_or_else(|| Error::DegenerateModel("loadings are rank deficient".into()))
}

/// OLS factors `F̂_t = (Λ'Λ)^{-1}Λ'x_t`, stacked as a T×r matrix.
pub fn factors_ols(panel: &PanelData, loadings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_loadings(panel, loadings)?;
    let chol = gram_cholesky(loadings.tr_mul(loadings))?;
    let mut rhs = (panel.values() * loadings).transpose(); // r×T
    chol.solve_mut(&mut rhs);
    Ok(rhs.transpose())
}

/// GLS factors `F̂_t = (Λ'Σ^{-1}Λ)^{-1}Λ'Σ^{-1}x_t` with diagonal Σ.
pub fn factors_gls(
    panel: &PanelData,
    loadings: &DMatrix<f64>,
    idio_variances: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_loadings(panel, loadings)?;
    check_variances(panel.n_series(), idio_variances)?;
    let weighted = weighted_loadings(loadings, idio_variances);
    let chol = gram_cholesky(loadings.tr_mul(&weighted))?;
    let mut rhs = (panel.values() * &weighted).transpose();
    chol.solve_mut(&mut rhs);
    Ok(rhs.transpose())
}

/// Linear-projection factors `F̂_t = (Λ'Σ^{-1}Λ + I_r)^{-1}Λ'Σ^{-1}x_t`,
/// the r×r Woodbury form of `Λ'(ΛΛ'+Σ)^{-1}x_t`.
pub fn factors_lp(
    panel: &PanelData,
    loadings: &DMatrix<f64>,
    idio_variances: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_loadings(panel, loadings)?;
    check_variances(panel.n_series(), idio_variances)?;
    let r = loadings.ncols();
    let weighted = weighted_loadings(loadings, idio_variances);
    let gram = loadings.tr_mul(&weighted) + DMatrix::identity(r, r);
    let chol = gram_cholesky(gram)?;
    let mut rhs = (panel.values() * &weighted).transpose();
    chol.solve_mut(&mut rhs);
    Ok(rhs.transpose())
}

/// `Σ^{-1}Λ` for diagonal Σ.
fn weighted_loadings(loadings: &DMatrix<f64>, idio_variances: &DVector<f64>) -> DMatrix<f64> {
    let mut weighted = loadings.clone();
    for i in 0..weighted.nrows() {
        let s = idio_variances[i];
        for j in 0..weighted.ncols() {
            weighted[(i, j)] /= s;
        }
    }
    weighted
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pca::fit_pc;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn unit_column_projects_onto_first_series() {
        let panel = PanelData::new(DMatrix::from_row_slice(
            3,
            2,
            &[1.0, 9.0, -2.0, 4.0, 0.5, -7.0],
        ))
        .unwrap();
        let loadings = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let f = factors_ols(&panel, &loadings).unwrap();
        assert_relative_eq!(f[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(f[(1, 0)], -2.0, epsilon = 1e-12);
        assert_relative_eq!(f[(2, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ols_recovers_noiseless_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand_matrix(&mut rng, 12, 2);
        let l = rand_matrix(&mut rng, 5, 2);
        let panel = PanelData::new(&f * l.transpose()).unwrap();
        let fhat = factors_ols(&panel, &l).unwrap();
        assert!((&fhat - &f).norm() <= 1e-9 * f.norm());
    }

    /// Independent normal-equations oracle: solve (Λ'Λ)f = Λ'x per period by
    /// hand-rolled Gaussian elimination.
    #[test]
    fn ols_matches_elimination_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 7, 4);
        let l = rand_matrix(&mut rng, 4, 2);
        let panel = PanelData::new(x.clone()).unwrap();
        let fhat = factors_ols(&panel, &l).unwrap();

        let g = l.tr_mul(&l);
        for t in 0..7 {
            let b = l.tr_mul(&x.row(t).transpose());
            // 2×2 elimination
            let m = g[(1, 0)] / g[(0, 0)];
            let g11 = g[(1, 1)] - m * g[(0, 1)];
            let b1 = b[1] - m * b[0];
            let f1 = b1 / g11;
            let f0 = (b[0] - g[(0, 1)] * f1) / g[(0, 0)];
            assert_relative_eq!(fhat[(t, 0)], f0, max_relative = 1e-10);
            assert_relative_eq!(fhat[(t, 1)], f1, max_relative = 1e-10);
        }
    }

    #[test]
    fn gls_with_unit_weights_equals_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_matrix(&mut rng, 9, 5);
        let l = rand_matrix(&mut rng, 5, 2);
        let panel = PanelData::new(x).unwrap();
        let ols = factors_ols(&panel, &l).unwrap();
        let gls = factors_gls(&panel, &l, &DVector::from_element(5, 1.0)).unwrap();
        assert!((&gls - &ols).norm() <= 1e-12 * ols.norm().max(1.0));
    }

    #[test]
    fn gls_scalar_example() {
        // Λ = (1,1)', Σ = diag(1,4), x = (1,2)' ⇒ F̂ = (1 + 2/4)/(1 + 1/4) = 1.2
        let panel = PanelData::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 0.0])).unwrap();
        let l = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let s = DVector::from_row_slice(&[1.0, 4.0]);
        let f = factors_gls(&panel, &l, &s).unwrap();
        assert_relative_eq!(f[(0, 0)], 1.2, epsilon = 1e-12);
    }

    #[test]
    fn lp_right_form_matches_direct_left_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 8, 6);
        let l = rand_matrix(&mut rng, 6, 2);
        let s = DVector::from_fn(6, |_, _| rng.random_range(0.4..2.0));
        let panel = PanelData::new(x.clone()).unwrap();
        let lp = factors_lp(&panel, &l, &s).unwrap();
        // Oracle: direct n×n inversion of ΛΛ' + Σ.
        let mut omega = &l * l.transpose();
        for i in 0..6 {
            omega[(i, i)] += s[i];
        }
        let inv = omega.try_inverse().unwrap();
        for t in 0..8 {
            let expected = l.transpose() * &inv * x.row(t).transpose();
            for j in 0..2 {
                assert_relative_eq!(lp[(t, j)], expected[j], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn lp_is_shrunk_gls_scalar_case() {
        // Λ'Σ^{-1}Λ = 99 ⇒ LP = (99/100)·GLS.
        let n = 99;
        let l = DMatrix::from_element(n, 1, 1.0);
        let s = DVector::from_element(n, 1.0);
        let mut x = DMatrix::zeros(2, n);
        for i in 0..n {
            x[(0, i)] = (i as f64 * 0.37).sin();
            x[(1, i)] = (i as f64 * 0.11).cos();
        }
        let panel = PanelData::new(x).unwrap();
        let gls = factors_gls(&panel, &l, &s).unwrap();
        let lp = factors_lp(&panel, &l, &s).unwrap();
        for t in 0..2 {
            assert_relative_eq!(lp[(t, 0)], 0.99 * gls[(t, 0)], max_relative = 1e-12);
        }
    }

    /// Algebraic identity F̂^LP = (Λ'Σ^{-1}Λ + I)^{-1}(Λ'Σ^{-1}Λ)·F̂^GLS.
    #[test]
    fn lp_equals_shrinkage_matrix_times_gls() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_matrix(&mut rng, 10, 7);
        let l = rand_matrix(&mut rng, 7, 2);
        let s = DVector::from_fn(7, |_, _| rng.random_range(0.2..3.0));
        let panel = PanelData::new(x).unwrap();
        let gls = factors_gls(&panel, &l, &s).unwrap();
        let lp = factors_lp(&panel, &l, &s).unwrap();
        let mut weighted = l.clone();
        for i in 0..7 {
            for j in 0..2 {
                weighted[(i, j)] /= s[i];
            }
        }
        let g = l.tr_mul(&weighted);
        let shrink = (g.clone() + DMatrix::identity(2, 2)).try_inverse().unwrap() * g;
        let expected = gls * shrink.transpose();
        assert!((&lp - &expected).norm() <= 1e-10 * expected.norm());
    }

    #[test]
    fn ols_on_pc_loadings_reproduces_pc_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_matrix(&mut rng, 20, 6);
        let panel = PanelData::new(x).unwrap();
        let fit = fit_pc(&panel, 2).unwrap();
        let f = factors_ols(&panel, &fit.loadings).unwrap();
        assert!((&f - &fit.factors).norm() <= 1e-9 * fit.factors.norm());
    }

    #[test]
    fn estimators_are_equivariant_to_column_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_matrix(&mut rng, 9, 5);
        let l = rand_matrix(&mut rng, 5, 2);
        let s = DVector::from_fn(5, |_, _| rng.random_range(0.5..1.5));
        let panel = PanelData::new(x).unwrap();
        let mut l_swapped = DMatrix::zeros(5, 2);
        l_swapped.set_column(0, &l.column(1));
        l_swapped.set_column(1, &l.column(0));
        for (f, f_swapped) in [
            (
                factors_ols(&panel, &l).unwrap(),
                factors_ols(&panel, &l_swapped).unwrap(),
            ),
            (
                factors_gls(&panel, &l, &s).unwrap(),
                factors_gls(&panel, &l_swapped, &s).unwrap(),
            ),
            (
                factors_lp(&panel, &l, &s).unwrap(),
                factors_lp(&panel, &l_swapped, &s).unwrap(),
            ),
        ] {
            assert!((f.column(0) - f_swapped.column(1)).norm() <= 1e-10 * f.norm());
            assert!((f.column(1) - f_swapped.column(0)).norm() <= 1e-10 * f.norm());
        }
    }

    #[test]
    fn rank_deficient_loadings_error() {
        let panel = PanelData::new(DMatrix::from_row_slice(
            3,
            2,
            &[1.0, 2.0, 3.0, 6.0, -1.0, -2.0],
        ))
        .unwrap();
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(factors_ols(&panel, &l).is_err());
    }

    #[test]
    fn nonpositive_variance_errors() {
        let panel = PanelData::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let l = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let s = DVector::from_row_slice(&[1.0, 0.0]);
        assert!(factors_gls(&panel, &l, &s).is_err());
        assert!(factors_lp(&panel, &l, &s).is_err());
    }
}

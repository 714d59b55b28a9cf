//! Principal-component estimation, the infeasible OLS baselines, and the
//! spherical (equal-noise-variance) QML closed form.
//!
//! With `Γ̂ = T^{-1} (X - ιx̄')'(X - ιx̄')` the sample covariance (divisor `T`,
//! not `T-1`) and `(μ̂_j, v̂_j)` its leading eigenpairs,
//!
//! ```text
//! Λ̂ = V̂ M̂^{1/2},        F̂_t = M̂^{-1/2} V̂' (x_t - x̄),
//! ```
//!
//! which satisfies the identification convention by construction:
//! `Λ̂'Λ̂ = M̂` is diagonal descending and `F̂'F̂/T = I_r`. When `N > T` the
//! decomposition runs on the `T x T` Gram matrix instead — mathematically
//! identical, cheaper.

use nalgebra::{DMatrix, DVector};

use crate::core::{demean, top_eigen, FactorMethod, FactorPath, Panel, StaticParams};
use crate::{Error, Result};

/// A principal-component fit.
#[derive(Debug, Clone)]
pub struct PcFit {
    pub params: StaticParams,
    /// Factor path satisfying `F̂'F̂/T = I_r`.
    pub factors: FactorPath,
    /// Leading `r` eigenvalues of the sample covariance, descending.
    pub eigvals: DVector<f64>,
    /// Share of total variance carried by the `r` leading eigenvalues.
    pub explained_variance: f64,
}

/// Principal-component estimate of loadings, factors, and idiosyncratic
/// variances.
///
/// Requires a complete panel — impute missing values first. Idiosyncratic
/// variances are mean squared residuals (divisor `T`), floored at a tiny
/// multiple of the series variance so that exactly noiseless data still
/// yields valid (positive) parameters.
pub fn pc_fit(panel: &Panel, r: usize) -> Result<PcFit> {
    let (t_len, n) = (panel.t_len(), panel.n_series());
    if !panel.is_complete() {
        return Err(Error::MissingValues { context: "pc_fit" });
    }
    if r >= t_len.min(n) {
        return Err(Error::TooManyFactors {
            r,
            min_nt: t_len.min(n),
        });
    }
    let (alpha, centered) = demean(panel)?;
    let xc = centered.values();

    let pair = if n > t_len {
        // Gram dual: the T x T matrix X X'/T shares its nonzero eigenvalues
        // with the covariance; eigenvectors map back via v = X'u / sqrt(T μ).
        let gram = xc * xc.transpose() / t_len as f64;
        let dual = top_eigen(&gram, r)?;
        check_positive(&dual.eigvals)?;
        let mut vecs = DMatrix::zeros(n, r);
        for j in 0..r {
            let u = dual.eigvecs.column(j);
            let v = xc.transpose() * u / (t_len as f64 * dual.eigvals[j]).sqrt();
            vecs.set_column(j, &v);
        }
        crate::core::EigenPair {
            eigvals: dual.eigvals,
            eigvecs: vecs,
        }
    } else {
        let cov = xc.transpose() * xc / t_len as f64;
        let pair = top_eigen(&cov, r)?;
        check_positive(&pair.eigvals)?;
        pair
    };

    // Sign convention: first nonzero loading in each column positive.
    let mut vecs = pair.eigvecs;
    for j in 0..r {
        let lead = (0..n).map(|i| vecs[(i, j)]).find(|x| x.abs() > 0.0);
        if lead.is_some_and(|x| x < 0.0) {
            for i in 0..n {
                vecs[(i, j)] = -vecs[(i, j)];
            }
        }
    }

    let mut lambda = DMatrix::zeros(n, r);
    let mut f = DMatrix::zeros(t_len, r);
    let fv = xc * &vecs; // T x r, columns X_c v_j
    for j in 0..r {
        let s = pair.eigvals[j].sqrt();
        for i in 0..n {
            lambda[(i, j)] = vecs[(i, j)] * s;
        }
        for t in 0..t_len {
            f[(t, j)] = fv[(t, j)] / s;
        }
    }

    // Residual variances and the variance decomposition.
    let resid = xc - &f * lambda.transpose();
    let mut sigma2 = DVector::zeros(n);
    let mut total_var = 0.0;
    for i in 0..n {
        let col_ss: f64 = xc.column(i).iter().map(|x| x * x).sum();
        let res_ss: f64 = resid.column(i).iter().map(|x| x * x).sum();
        let var_i = col_ss / t_len as f64;
        total_var += var_i;
        sigma2[i] = (res_ss / t_len as f64).max(1e-12 * var_i.max(f64::MIN_POSITIVE));
    }
    let explained_variance = (pair.eigvals.sum() / total_var).clamp(0.0, 1.0);

    Ok(PcFit {
        params: StaticParams::new(alpha, lambda, sigma2)?,
        factors: FactorPath {
            values: f,
            method: FactorMethod::Pc,
        },
        eigvals: pair.eigvals,
        explained_variance,
    })
}

fn check_positive(eigvals: &DVector<f64>) -> Result<()> {
    for (j, &v) in eigvals.iter().enumerate() {
        if !(v > 0.0) {
            return Err(Error::DegenerateCovariance { index: j, value: v });
        }
    }
    Ok(())
}

/// Per-series regression of the (centered) data on a known factor path:
/// `λ_i = (F'F)^{-1} F' x_i`. Masked cells are dropped series by series.
pub fn ols_loadings(centered: &Panel, factors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (t_len, n) = (centered.t_len(), centered.n_series());
    let r = factors.ncols();
    if factors.nrows() != t_len {
        return Err(Error::InvalidArgument(format!(
            "factor path has {} rows for a panel with T = {}",
            factors.nrows(),
            t_len
        )));
    }

    let mut lambda = DMatrix::zeros(n, r);
    if centered.is_complete() {
        let gram = factors.transpose() * factors;
        let chol = gram
            .cholesky()
            .ok_or(Error::RankDeficient {
                context: "ols_loadings factor Gram",
            })?;
        let fx = factors.transpose() * centered.values(); // r x N
        for i in 0..n {
            let sol = chol.solve(&fx.column(i).clone_owned());
            lambda.set_row(i, &sol.transpose());
        }
        return Ok(lambda);
    }

    for i in 0..n {
        let mut gram = DMatrix::zeros(r, r);
        let mut rhs = DVector::zeros(r);
        for t in 0..t_len {
            if !centered.mask()[(t, i)] {
                continue;
            }
            let frow = factors.row(t);
            for a in 0..r {
                rhs[a] += frow[a] * centered.values()[(t, i)];
                for b in 0..r {
                    gram[(a, b)] += frow[a] * frow[b];
                }
            }
        }
        let chol = gram.cholesky().ok_or(Error::RankDeficient {
            context: "ols_loadings factor Gram (masked series)",
        })?;
        lambda.set_row(i, &chol.solve(&rhs).transpose());
    }
    Ok(lambda)
}

/// Cross-sectional regression of each period on known loadings:
/// `F_t = (Λ'Λ)^{-1} Λ' (x_t - x̄)`. Masked cells are dropped period by
/// period.
pub fn ols_factors(centered: &Panel, lambda: &DMatrix<f64>) -> Result<FactorPath> {
    let values = weighted_cross_section(centered, lambda, None, false)?;
    Ok(FactorPath {
        values,
        method: FactorMethod::Ols,
    })
}

/// Shared worker for the per-period cross-sectional regressions: solves
/// `(Λ'WΛ + ridge I) f_t = Λ'W x_t` for every `t`, with `W` the inverse of
/// the supplied diagonal variances (identity when absent) and `ridge` either
/// 0 (generalized least squares) or 1 (linear-projection shrinkage).
pub(crate) fn weighted_cross_section(
    centered: &Panel,
    lambda: &DMatrix<f64>,
    sigma2: Option<&DVector<f64>>,
    add_identity: bool,
) -> Result<DMatrix<f64>> {
    let (t_len, n) = (centered.t_len(), centered.n_series());
    let r = lambda.ncols();
    if lambda.nrows() != n {
        return Err(Error::InvalidArgument(format!(
            "loadings have {} rows for a panel with N = {}",
            lambda.nrows(),
            n
        )));
    }
    if let Some(s) = sigma2 {
        if s.len() != n {
            return Err(Error::InvalidArgument(
                "sigma2 length does not match panel width".into(),
            ));
        }
    }

    let weight = |i: usize| sigma2.map_or(1.0, |s| 1.0 / s[i]);
    let mut out = DMatrix::zeros(t_len, r);

    if centered.is_complete() {
        let mut gram = DMatrix::zeros(r, r);
        for i in 0..n {
            let w = weight(i);
            let lrow = lambda.row(i);
            for a in 0..r {
                for b in 0..r {
                    gram[(a, b)] += w * lrow[a] * lrow[b];
                }
            }
        }
        if add_identity {
            for a in 0..r {
                gram[(a, a)] += 1.0;
            }
        }
        let chol = gram.cholesky().ok_or(Error::RankDeficient {
            context: "cross-section weighted Gram",
        })?;
        // rhs rows: x_t' W Λ   (T x r)
        let mut wl = lambda.clone();
        for i in 0..n {
            let w = weight(i);
            for a in 0..r {
                wl[(i, a)] *= w;
            }
        }
        let rhs = centered.values() * wl; // T x r
        for t in 0..t_len {
            let sol = chol.solve(&rhs.row(t).transpose());
            out.set_row(t, &sol.transpose());
        }
        return Ok(out);
    }

    for t in 0..t_len {
        let mut gram = DMatrix::zeros(r, r);
        let mut rhs = DVector::zeros(r);
        for i in 0..n {
            if !centered.mask()[(t, i)] {
                continue;
            }
            let w = weight(i);
            let lrow = lambda.row(i);
            let x = centered.values()[(t, i)];
            for a in 0..r {
                rhs[a] += w * lrow[a] * x;
                for b in 0..r {
                    gram[(a, b)] += w * lrow[a] * lrow[b];
                }
            }
        }
        if add_identity {
            for a in 0..r {
                gram[(a, a)] += 1.0;
            }
        }
        let chol = gram.cholesky().ok_or(Error::RankDeficient {
            context: "cross-section weighted Gram (masked period)",
        })?;
        out.set_row(t, &chol.solve(&rhs).transpose());
    }
    Ok(out)
}

/// Closed-form QML estimator under a common idiosyncratic variance
/// (`Σ^ξ = σ² I`): the common variance is the average of the `N - r` trailing
/// eigenvalues and the loadings subtract it from the leading ones,
///
/// ```text
/// σ̂² = (N - r)^{-1} Σ_{j>r} μ̂_j,      λ̂_j = v̂_j (μ̂_j - σ̂²)^{1/2}.
/// ```
pub fn spherical_qml(panel: &Panel, r: usize) -> Result<(DMatrix<f64>, f64)> {
    let (t_len, n) = (panel.t_len(), panel.n_series());
    if r >= t_len.min(n) {
        return Err(Error::TooManyFactors {
            r,
            min_nt: t_len.min(n),
        });
    }
    let fit = pc_fit(panel, r)?;
    let (_, centered) = demean(panel)?;

    // Tail eigenvalue mean from the trace: trace(Γ̂) = Σ_j μ̂_j.
    let mut trace = 0.0;
    for i in 0..n {
        let ss: f64 = centered.values().column(i).iter().map(|x| x * x).sum();
        trace += ss / t_len as f64;
    }
    let sigma2_common = (trace - fit.eigvals.sum()) / (n - r) as f64;

    for j in 0..r {
        if fit.eigvals[j] <= sigma2_common {
            return Err(Error::FactorBelowNoise {
                index: j,
                value: fit.eigvals[j],
                noise: sigma2_common,
            });
        }
    }

    // Rescale the PC columns: v̂_j μ̂_j^{1/2} -> v̂_j (μ̂_j - σ̂²)^{1/2}.
    let mut lambda = fit.params.lambda;
    for j in 0..r {
        let scale = ((fit.eigvals[j] - sigma2_common) / fit.eigvals[j]).sqrt();
        for i in 0..n {
            lambda[(i, j)] *= scale;
        }
    }
    Ok((lambda, sigma2_common))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::identify_rotation;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    }

    /// A noiseless panel whose loadings/factors already satisfy the
    /// identification convention, plus the truth.
    fn noiseless_panel(
        seed: u64,
        n: usize,
        t_len: usize,
        r: usize,
    ) -> (Panel, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l_raw = randn(&mut rng, n, r);
        let mut f_raw = randn(&mut rng, t_len, r);
        // Center the factors so demeaning does not disturb the truth.
        for j in 0..r {
            let m = f_raw.column(j).mean();
            for t in 0..t_len {
                f_raw[(t, j)] -= m;
            }
        }
        let (lambda, f) = identify_rotation(&l_raw, &f_raw).unwrap();
        let x = &f * lambda.transpose();
        (Panel::new(x).unwrap(), lambda, f)
    }

    #[test]
    fn noiseless_panel_is_recovered_exactly() {
        let (panel, lambda, f) = noiseless_panel(7, 12, 40, 2);
        let fit = pc_fit(&panel, 2).unwrap();
        assert!((&fit.params.lambda - &lambda).amax() < 1e-8);
        assert!((&fit.factors.values - &f).amax() < 1e-8);
        assert!(fit.explained_variance > 1.0 - 1e-10);
    }

    #[test]
    fn pc_identification_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, 30, 8);
        let fit = pc_fit(&Panel::new(x).unwrap(), 3).unwrap();
        let n = 8.0;
        let gram_l = fit.params.lambda.transpose() * &fit.params.lambda / n;
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    assert!(gram_l[(a, b)].abs() < 1e-10 * gram_l.trace() / 3.0);
                }
            }
        }
        let t_len = 30.0;
        let gram_f = fit.factors.values.transpose() * &fit.factors.values / t_len;
        assert!((gram_f - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
        // First nonzero loading of each column positive.
        for j in 0..3 {
            let lead = (0..8)
                .map(|i| fit.params.lambda[(i, j)])
                .find(|x| x.abs() > 0.0)
                .unwrap();
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn gram_dual_matches_covariance_route() {
        // N > T triggers the dual path; compare against the covariance path
        // computed on the transposed-size problem by padding time.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 9, 14); // T = 9 < N = 14
        let panel = Panel::new(x.clone()).unwrap();
        let fit = pc_fit(&panel, 2).unwrap();

        // Direct dense computation of the covariance eigenstructure.
        let mut xc = x.clone();
        for j in 0..14 {
            let m = xc.column(j).mean();
            for t in 0..9 {
                xc[(t, j)] -= m;
            }
        }
        let cov = xc.transpose() * &xc / 9.0;
        let pair = top_eigen(&cov, 2).unwrap();
        assert_relative_eq!(fit.eigvals[0], pair.eigvals[0], epsilon = 1e-10);
        assert_relative_eq!(fit.eigvals[1], pair.eigvals[1], epsilon = 1e-10);
        for j in 0..2 {
            let a = fit.params.lambda.column(j).clone_owned();
            let b = pair.eigvecs.column(j) * pair.eigvals[j].sqrt();
            let diff = (&a - &b).norm().min((&a + &b).norm());
            assert!(diff < 1e-9, "column {j} differs by {diff}");
        }
    }

    #[test]
    fn ols_loadings_constant_factor_on_centered_data_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 20, 4);
        let (_, centered) = demean(&Panel::new(x).unwrap()).unwrap();
        let ones = DMatrix::from_element(20, 1, 1.0);
        let lam = ols_loadings(&centered, &ones).unwrap();
        assert!(lam.amax() < 1e-12);
    }

    #[test]
    fn ols_recovers_noiseless_truth() {
        let (panel, lambda, f) = noiseless_panel(19, 10, 25, 2);
        let (_, centered) = demean(&panel).unwrap();
        let lam_hat = ols_loadings(&centered, &f).unwrap();
        assert!((lam_hat - &lambda).amax() < 1e-10);
        let f_hat = ols_factors(&centered, &lambda).unwrap();
        assert!((f_hat.values - &f).amax() < 1e-10);
    }

    #[test]
    fn spherical_recovers_constructed_covariance() {
        // Build a panel whose sample covariance is exactly ΛΛ' + σ²I by
        // stacking ±M with M'M proportional to the target.
        let n = 6;
        let r = 2;
        let sigma2 = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let l_raw = randn(&mut rng, n, r);
        let f_raw = randn(&mut rng, n, r); // any full-rank seed for the rotation
        let (lambda, _) = identify_rotation(&l_raw, &f_raw).unwrap();
        let gamma = &lambda * lambda.transpose() + DMatrix::identity(n, n) * sigma2;

        let eig = nalgebra::SymmetricEigen::new(gamma.clone());
        let mut half = DMatrix::zeros(n, n);
        for k in 0..n {
            let u = eig.eigenvectors.column(k);
            let s = eig.eigenvalues[k].max(0.0).sqrt();
            half += DMatrix::from_fn(n, n, |i, j| s * u[i] * u[j]);
        }
        let t_len = 2 * n;
        let scale = (t_len as f64 / 2.0).sqrt();
        let mut x = DMatrix::zeros(t_len, n);
        for i in 0..n {
            for j in 0..n {
                x[(i, j)] = scale * half[(i, j)];
                x[(n + i, j)] = -scale * half[(i, j)];
            }
        }
        let (lam_hat, s2_hat) = spherical_qml(&Panel::new(x).unwrap(), r).unwrap();
        assert_relative_eq!(s2_hat, sigma2, epsilon = 1e-8);
        for j in 0..r {
            let a = lam_hat.column(j).clone_owned();
            let b = lambda.column(j).clone_owned();
            assert!((&a - &b).norm().min((&a + &b).norm()) < 1e-8);
        }
    }

    #[test]
    fn spherical_rejects_empty_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 10, 3);
        assert!(spherical_qml(&Panel::new(x).unwrap(), 3).is_err());
    }

    #[test]
    fn pc_rejects_missing_values() {
        let values = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut mask = DMatrix::from_element(3, 2, true);
        mask[(1, 1)] = false;
        let p = Panel::with_mask(values, mask, vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(
            pc_fit(&p, 1),
            Err(Error::MissingValues { .. })
        ));
    }

    #[test]
    fn sigma2_on_noisy_panel_is_mean_squared_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = randn(&mut rng, 15, 5);
        let panel = Panel::new(x).unwrap();
        let fit = pc_fit(&panel, 2).unwrap();
        let (_, centered) = demean(&panel).unwrap();
        let resid = centered.values() - &fit.factors.values * fit.params.lambda.transpose();
        for i in 0..5 {
            let mse: f64 = resid.column(i).iter().map(|e| e * e).sum::<f64>() / 15.0;
            assert_relative_eq!(fit.params.sigma2[i], mse, epsilon = 1e-12);
        }
    }

    #[test]
    fn ols_loadings_respect_mask() {
        let (panel, lambda, f) = noiseless_panel(41, 8, 30, 2);
        let mut mask = DMatrix::from_element(30, 8, true);
        mask[(4, 2)] = false;
        mask[(17, 2)] = false;
        let masked = Panel::with_mask(panel.values().clone(), mask, panel.names().to_vec()).unwrap();
        let (_, centered) = demean(&masked).unwrap();
        // Noiseless data: dropping rows cannot change the exact solution.
        let lam_hat = ols_loadings(&centered, &f).unwrap();
        // Demeaning with masked cells shifts the intercept slightly; compare
        // projections instead of raw equality for the affected series.
        let unaffected: Vec<usize> = (0..8).filter(|&i| i != 2).collect();
        for &i in &unaffected {
            for j in 0..2 {
                assert_relative_eq!(lam_hat[(i, j)], lambda[(i, j)], epsilon = 1e-8);
            }
        }
    }
}

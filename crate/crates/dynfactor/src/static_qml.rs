//! Quasi-maximum-likelihood estimation of the static factor model by EM,
//! cross-sectional factor extraction (WLS and linear-projection variants),
//! and pseudo-GLS refinements that exploit idiosyncratic serial and
//! cross-sectional correlation.
//!
//! The working likelihood treats factors as standard-normal latent variables
//! and the idiosyncratic terms as Gaussian white noise with diagonal
//! covariance `Σ^ξ = diag(σ_1², …, σ_N²)`:
//!
//! ```text
//! x_t - x̄ = Λ F_t + ξ_t,   F_t ~ N(0, I_r),   ξ_t ~ N(0, Σ^ξ).
//! ```
//!
//! EM alternates the conditional factor moments
//! `E[F_t | x_t] = (Λ'(Σ^ξ)^{-1}Λ + I)^{-1} Λ'(Σ^ξ)^{-1}(x_t - x̄)` with
//! closed-form regression updates for `Λ` and `Σ^ξ`. The log-likelihood is
//! evaluated through the matrix-determinant lemma so no `N x N` matrix is
//! ever formed.

use nalgebra::{DMatrix, DVector};

use crate::core::{demean, identify_rotation, FactorMethod, FactorPath, Panel, StaticParams};
use crate::pca::{ols_loadings, pc_fit, weighted_cross_section};
use crate::{Error, Result};

/// Relative floor applied to idiosyncratic variance updates, as a multiple
/// of the series sample variance. Keeps a Heywood case from collapsing the
/// likelihood; clamping is counted, not fatal.
const SIGMA2_FLOOR_REL: f64 = 1e-8;

/// Result of the static EM fit.
#[derive(Debug, Clone)]
pub struct StaticEmFit {
    pub params: StaticParams,
    /// Log-likelihood at the parameters entering each iteration.
    pub loglik_trace: Vec<f64>,
    /// Number of completed parameter updates.
    pub iterations: usize,
    pub converged: bool,
    /// How many variance updates hit the relative floor across all
    /// iterations (0 in well-behaved problems).
    pub clamp_events: usize,
}

/// Result of [`iterative_ols_wls`].
#[derive(Debug, Clone)]
pub struct IterativeFit {
    pub params: StaticParams,
    pub factors: FactorPath,
    pub rounds: usize,
    pub converged: bool,
}

/// Per-series AR(1) description of the idiosyncratic components.
#[derive(Debug, Clone)]
pub struct Ar1IdioParams {
    /// Lag-1 autoregressive coefficients, each in (-1, 1).
    pub alpha: DVector<f64>,
    /// Innovation variances, each > 0.
    pub omega2: DVector<f64>,
}

impl Ar1IdioParams {
    pub fn new(alpha: DVector<f64>, omega2: DVector<f64>) -> Result<Self> {
        if alpha.len() != omega2.len() {
            return Err(Error::InvalidArgument(
                "alpha and omega2 must have equal length".into(),
            ));
        }
        for i in 0..alpha.len() {
            if !(alpha[i].abs() < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "AR coefficient {} out of (-1, 1): {}",
                    i, alpha[i]
                )));
            }
            if !(omega2[i] > 0.0) {
                return Err(Error::DegenerateCovariance {
                    index: i,
                    value: omega2[i],
                });
            }
        }
        Ok(Self { alpha, omega2 })
    }

    pub fn n_series(&self) -> usize {
        self.alpha.len()
    }
}

/// Gaussian log-likelihood of a centered panel under `(Λ, Σ^ξ)`, computed
/// with the matrix-determinant lemma:
///
/// ```text
/// log det(ΛΛ' + Σ) = Σ_i log σ_i² + log det(I + Λ'Σ^{-1}Λ)
/// x'(ΛΛ' + Σ)^{-1}x = x'Σ^{-1}x - g'(I + B)^{-1}g,   g = Λ'Σ^{-1}x.
/// ```
fn loglik_static(
    xc: &DMatrix<f64>,
    col_ss: &[f64],
    lambda: &DMatrix<f64>,
    sigma2: &DVector<f64>,
) -> Result<f64> {
    let (t_len, n) = (xc.nrows(), xc.ncols());
    let r = lambda.ncols();

    let mut b: DMatrix<f64> = DMatrix::zeros(r, r);
    for i in 0..n {
        let w = 1.0 / sigma2[i];
        let lrow = lambda.row(i);
        for a in 0..r {
            for c in 0..r {
                b[(a, c)] += w * lrow[a] * lrow[c];
            }
        }
    }
    let mut ib = b;
    for a in 0..r {
        ib[(a, a)] += 1.0;
    }
    let chol = ib.cholesky().ok_or(Error::RankDeficient {
        context: "static likelihood Gram",
    })?;
    let logdet_ib: f64 = (0..r).map(|a| 2.0 * chol.l_dirty()[(a, a)].ln()).sum();

    // g_t' (I+B)^{-1} g_t summed over t, with G = X Σ^{-1} Λ (T x r).
    let mut wl = lambda.clone();
    for i in 0..n {
        let w = 1.0 / sigma2[i];
        for a in 0..r {
            wl[(i, a)] *= w;
        }
    }
    let g = xc * wl;
    let solved = chol.solve(&g.transpose()); // r x T
    let mut quad_corr = 0.0;
    for t in 0..t_len {
        for a in 0..r {
            quad_corr += g[(t, a)] * solved[(a, t)];
        }
    }

    let log_sigma_sum: f64 = (0..n).map(|i| sigma2[i].ln()).sum();
    let weighted_ss: f64 = (0..n).map(|i| col_ss[i] / sigma2[i]).sum();

    let ll = -0.5 * (t_len * n) as f64 * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * t_len as f64 * (log_sigma_sum + logdet_ib)
        - 0.5 * (weighted_ss - quad_corr);
    if !ll.is_finite() {
        return Err(Error::NonFinite {
            context: "static log-likelihood",
        });
    }
    Ok(ll)
}

/// One E+M sweep of the static EM map. E-step:
/// `S = (Λ'Σ^{-1}Λ + I)^{-1}`, `E[F|x] = X Σ^{-1} Λ S`,
/// `Sff = T·S + (E[F|x])'E[F|x]`. M-step: `Λ` by regression on the expected
/// factors, then `σ_i²` at the updated `Λ` (floored; the count of floored
/// updates is returned).
fn em_update(
    xc: &DMatrix<f64>,
    col_ss: &[f64],
    floor: &[f64],
    lambda: &DMatrix<f64>,
    sigma2: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, usize)> {
    let (t_len, n) = (xc.nrows(), xc.ncols());
    let r = lambda.ncols();

    let mut b: DMatrix<f64> = DMatrix::zeros(r, r);
    let mut wl = lambda.clone();
    for i in 0..n {
        let w = 1.0 / sigma2[i];
        let lrow = lambda.row(i).clone_owned();
        for a in 0..r {
            for c in 0..r {
                b[(a, c)] += w * lrow[a] * lrow[c];
            }
            wl[(i, a)] *= w;
        }
    }
    let mut ib = b;
    for a in 0..r {
        ib[(a, a)] += 1.0;
    }
    let chol_ib = ib.cholesky().ok_or(Error::RankDeficient {
        context: "static EM E-step Gram",
    })?;
    let s_cond = chol_ib.solve(&DMatrix::identity(r, r));
    let ef = xc * &wl * &s_cond; // T x r
    let mut sff = ef.transpose() * &ef;
    sff += &s_cond * t_len as f64;
    // Symmetrize against drift before factorizing.
    sff = (&sff + sff.transpose()) * 0.5;

    let xt_ef = xc.transpose() * &ef; // N x r
    let chol_sff = sff.clone().cholesky().ok_or(Error::RankDeficient {
        context: "static EM factor second moment",
    })?;
    let lambda_new = chol_sff.solve(&xt_ef.transpose()).transpose();

    let mut sigma2_new = DVector::zeros(n);
    let mut clamps = 0usize;
    for i in 0..n {
        let lrow = lambda_new.row(i).clone_owned();
        let cross: f64 = (0..r).map(|a| lrow[a] * xt_ef[(i, a)]).sum();
        let quad = (lrow.clone() * &sff).dot(&lrow);
        let mut s2 = (col_ss[i] - 2.0 * cross + quad) / t_len as f64;
        if s2 < floor[i] {
            s2 = floor[i];
            clamps += 1;
        }
        sigma2_new[i] = s2;
    }
    Ok((lambda_new, sigma2_new, clamps))
}

/// EM estimation of `(Λ, Σ^ξ)` under the static working likelihood.
///
/// `init` defaults to the principal-component fit. Stops when successive
/// log-likelihood values change by less than `tol` relative (default caller
/// choice: 1e-6, `max_iter` 500). The returned loadings are re-identified
/// (`Λ'Λ/N` diagonal descending, leading loadings positive) and `Σ^ξ` is
/// refreshed from the linear-projection residuals at the identified
/// parameters.
pub fn static_em_fit(
    panel: &Panel,
    r: usize,
    init: Option<StaticParams>,
    max_iter: usize,
    tol: f64,
) -> Result<StaticEmFit> {
    let (t_len, n) = (panel.t_len(), panel.n_series());
    if !panel.is_complete() {
        return Err(Error::MissingValues {
            context: "static_em_fit",
        });
    }
    if r >= t_len.min(n) {
        return Err(Error::TooManyFactors {
            r,
            min_nt: t_len.min(n),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }

    let (alpha, centered) = demean(panel)?;
    let xc = centered.values();
    let col_ss: Vec<f64> = (0..n)
        .map(|i| xc.column(i).iter().map(|x| x * x).sum())
        .collect();
    let floor: Vec<f64> = col_ss
        .iter()
        .map(|ss| SIGMA2_FLOOR_REL * (ss / t_len as f64).max(f64::MIN_POSITIVE))
        .collect();

    let (mut lambda, mut sigma2) = match init {
        Some(p) => {
            if p.n_series() != n || p.r != r {
                return Err(Error::InvalidArgument(format!(
                    "init has shape ({}, {}) but the fit needs ({}, {})",
                    p.n_series(),
                    p.r,
                    n,
                    r
                )));
            }
            (p.lambda, p.sigma2)
        }
        None => {
            let fit = pc_fit(panel, r)?;
            (fit.params.lambda, fit.params.sigma2)
        }
    };

    let mut trace = Vec::with_capacity(max_iter + 1);
    let mut converged = false;
    let mut clamp_events = 0usize;
    let mut iterations = 0usize;

    for iter in 0..=max_iter {
        let ll = loglik_static(xc, &col_ss, &lambda, &sigma2)?;
        trace.push(ll);
        if iter >= 1 {
            let prev = trace[iter - 1];
            if (ll - prev).abs() < tol * (prev.abs() + 1.0) {
                converged = true;
                break;
            }
        }
        if iter == max_iter {
            break;
        }

        let (lambda_new, sigma2_new, clamps) = em_update(xc, &col_ss, &floor, &lambda, &sigma2)?;
        clamp_events += clamps;
        lambda = lambda_new;
        sigma2 = sigma2_new;
        iterations = iter + 1;
    }

    if clamp_events > 0 {
        eprintln!(
            "static_em_fit: {clamp_events} idiosyncratic variance update(s) hit the relative floor"
        );
    }

    // Re-identify and refresh Σ^ξ from linear-projection residuals. The
    // common component is rotation-invariant, so the residuals can be taken
    // at the pre-rotation parameters.
    let f_lp = weighted_cross_section(&centered, &lambda, Some(&sigma2), true)?;
    let (lambda_id, _f_id) = identify_rotation(&lambda, &f_lp)?;
    let resid = xc - &f_lp * lambda.transpose();
    for i in 0..n {
        let mse: f64 = resid.column(i).iter().map(|e| e * e).sum::<f64>() / t_len as f64;
        sigma2[i] = mse.max(floor[i]);
    }

    Ok(StaticEmFit {
        params: StaticParams::new(alpha, lambda_id, sigma2)?,
        loglik_trace: trace,
        iterations,
        converged,
        clamp_events,
    })
}

/// Weighted least-squares factor extraction at known parameters:
/// `F̂_t = (Λ'(Σ^ξ)^{-1}Λ)^{-1} Λ'(Σ^ξ)^{-1}(x_t - x̄)`.
pub fn wls_factors(centered: &Panel, params: &StaticParams) -> Result<FactorPath> {
    check_extraction_inputs(centered, params)?;
    let values = weighted_cross_section(centered, &params.lambda, Some(&params.sigma2), false)?;
    Ok(FactorPath {
        values,
        method: FactorMethod::Wls,
    })
}

/// Linear-projection factor extraction at known parameters:
/// `F̂_t = (Λ'(Σ^ξ)^{-1}Λ + I)^{-1} Λ'(Σ^ξ)^{-1}(x_t - x̄)`. Shrinks the WLS
/// solution toward zero by the signal-to-noise ratio of the cross-section.
pub fn lp_factors(centered: &Panel, params: &StaticParams) -> Result<FactorPath> {
    check_extraction_inputs(centered, params)?;
    let values = weighted_cross_section(centered, &params.lambda, Some(&params.sigma2), true)?;
    Ok(FactorPath {
        values,
        method: FactorMethod::Lp,
    })
}

fn check_extraction_inputs(centered: &Panel, params: &StaticParams) -> Result<()> {
    if params.n_series() != centered.n_series() {
        return Err(Error::InvalidArgument(format!(
            "params cover {} series, panel has {}",
            params.n_series(),
            centered.n_series()
        )));
    }
    Ok(())
}

/// Alternating estimation: WLS factors at the current `(Λ, Σ^ξ)`, then OLS
/// loadings on those factors, then residual variances, until the parameters
/// stop moving. Asymptotically equivalent to the EM fit but each half-step
/// is a plain regression.
pub fn iterative_ols_wls(
    panel: &Panel,
    r: usize,
    max_iter: usize,
    tol: f64,
) -> Result<IterativeFit> {
    if !panel.is_complete() {
        return Err(Error::MissingValues {
            context: "iterative_ols_wls",
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let (t_len, n) = (panel.t_len(), panel.n_series());
    let (alpha, centered) = demean(panel)?;
    let xc = centered.values();
    let floor: Vec<f64> = (0..n)
        .map(|i| {
            let ss: f64 = xc.column(i).iter().map(|x| x * x).sum();
            SIGMA2_FLOOR_REL * (ss / t_len as f64).max(f64::MIN_POSITIVE)
        })
        .collect();

    let fit = pc_fit(panel, r)?;
    let mut lambda = fit.params.lambda;
    let mut sigma2 = fit.params.sigma2;
    let mut factors = fit.factors.values;

    let mut best: Option<(f64, DMatrix<f64>, DVector<f64>, DMatrix<f64>)> = None;
    let mut converged = false;
    let mut rounds = 0usize;

    for _ in 0..max_iter {
        let f_new = weighted_cross_section(&centered, &lambda, Some(&sigma2), false)?;
        let lambda_new = ols_loadings(&centered, &f_new)?;
        let resid = xc - &f_new * lambda_new.transpose();
        let mut sigma2_new = DVector::zeros(n);
        let mut rss = 0.0;
        for i in 0..n {
            let ss: f64 = resid.column(i).iter().map(|e| e * e).sum();
            rss += ss;
            sigma2_new[i] = (ss / t_len as f64).max(floor[i]);
        }
        rounds += 1;

        let delta = ((&lambda_new - &lambda).norm() + (&sigma2_new - &sigma2).norm())
            / (lambda.norm() + sigma2.norm() + 1.0);

        if best.as_ref().is_none_or(|(b, _, _, _)| rss < *b) {
            best = Some((rss, lambda_new.clone(), sigma2_new.clone(), f_new.clone()));
        }
        lambda = lambda_new;
        sigma2 = sigma2_new;
        factors = f_new;
        if delta < tol {
            converged = true;
            break;
        }
    }

    if !converged {
        // Oscillation guard: hand back the lowest-residual iterate seen.
        if let Some((_, l, s, f)) = best {
            lambda = l;
            sigma2 = s;
            factors = f;
        }
    }

    let (lambda_id, f_id) = identify_rotation(&lambda, &factors)?;
    Ok(IterativeFit {
        params: StaticParams::new(alpha, lambda_id, sigma2)?,
        factors: FactorPath {
            values: f_id,
            method: FactorMethod::Wls,
        },
        rounds,
        converged,
    })
}

/// Per-series lag-1 autoregression on a residual matrix. Never fails:
/// degenerate series fall back to `α = 0` and a floored innovation variance.
pub fn ar1_idio_fit(residuals: &DMatrix<f64>) -> Ar1IdioParams {
    let (t_len, n) = (residuals.nrows(), residuals.ncols());
    assert!(t_len >= 3, "AR(1) fit needs at least 3 observations");

    let mut alpha = DVector::zeros(n);
    let mut omega2 = DVector::zeros(n);
    let mut floored = 0usize;
    for i in 0..n {
        let col = residuals.column(i);
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 1..t_len {
            num += col[t] * col[t - 1];
            den += col[t - 1] * col[t - 1];
        }
        let a = if den > 0.0 {
            (num / den).clamp(-0.99, 0.99)
        } else {
            0.0
        };
        let mut w2 = 0.0;
        for t in 1..t_len {
            let innov = col[t] - a * col[t - 1];
            w2 += innov * innov;
        }
        w2 /= (t_len - 1) as f64;
        if a == 0.0 && den == 0.0 {
            // Degenerate series: variance of the series itself (may be 0).
            w2 = col.iter().map(|x| x * x).sum::<f64>() / t_len as f64;
        }
        if w2 <= 0.0 {
            w2 = 1e-12;
            floored += 1;
        }
        alpha[i] = a;
        omega2[i] = w2;
    }
    if floored > 0 {
        eprintln!("ar1_idio_fit: {floored} innovation variance(s) floored at 1e-12");
    }
    Ar1IdioParams { alpha, omega2 }
}

/// Pseudo-GLS loadings under per-series AR(1) idiosyncratic dynamics.
///
/// Implemented by quasi-differencing: regress `(1 - α_i L)x_it` on
/// `(1 - α_i L)F_t` with the first observation scaled by `√(1 - α_i²)`.
/// That is exactly GLS with the AR(1) autocovariance matrix — its inverse is
/// tridiagonal, so the dense `T x T` weight matrix never appears.
pub fn gls_loadings_ar1(
    centered: &Panel,
    factors: &DMatrix<f64>,
    idio: &Ar1IdioParams,
) -> Result<DMatrix<f64>> {
    let (t_len, n) = (centered.t_len(), centered.n_series());
    let r = factors.ncols();
    if !centered.is_complete() {
        return Err(Error::MissingValues {
            context: "gls_loadings_ar1",
        });
    }
    if factors.nrows() != t_len || idio.n_series() != n {
        return Err(Error::InvalidArgument(
            "factor path or AR(1) parameters do not match the panel shape".into(),
        ));
    }

    let mut lambda = DMatrix::zeros(n, r);
    let mut ft = DMatrix::zeros(t_len, r);
    let mut xt = DVector::zeros(t_len);
    for i in 0..n {
        let a = idio.alpha[i];
        let scale0 = (1.0 - a * a).sqrt();
        for j in 0..r {
            ft[(0, j)] = scale0 * factors[(0, j)];
        }
        xt[0] = scale0 * centered.values()[(0, i)];
        for t in 1..t_len {
            for j in 0..r {
                ft[(t, j)] = factors[(t, j)] - a * factors[(t - 1, j)];
            }
            xt[t] = centered.values()[(t, i)] - a * centered.values()[(t - 1, i)];
        }
        let gram = ft.transpose() * &ft;
        let rhs = ft.transpose() * &xt;
        let chol = gram.cholesky().ok_or(Error::RankDeficient {
            context: "gls_loadings_ar1 quasi-differenced Gram",
        })?;
        lambda.set_row(i, &chol.solve(&rhs).transpose());
    }
    Ok(lambda)
}

/// Generalized least-squares factor extraction with a full idiosyncratic
/// covariance: `F_t = (Λ'Γ^{-1}Λ)^{-1} Λ'Γ^{-1}(x_t - x̄)`. `gamma_xi` is
/// factorized once and reused for every period.
pub fn gls_factors_banded(
    centered: &Panel,
    lambda: &DMatrix<f64>,
    gamma_xi: &DMatrix<f64>,
) -> Result<FactorPath> {
    let n = centered.n_series();
    if !centered.is_complete() {
        return Err(Error::MissingValues {
            context: "gls_factors_banded",
        });
    }
    if lambda.nrows() != n || gamma_xi.nrows() != n || gamma_xi.ncols() != n {
        return Err(Error::InvalidArgument(
            "loadings or covariance do not match the panel width".into(),
        ));
    }
    let asym = (gamma_xi - gamma_xi.transpose()).amax();
    if asym > 1e-8 * gamma_xi.amax().max(1.0) {
        return Err(Error::NotSymmetric {
            context: "gls_factors_banded covariance",
            asym,
        });
    }

    let chol = gamma_xi.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        context: "gls_factors_banded covariance",
    })?;
    let w = chol.solve(lambda); // Γ^{-1} Λ, N x r
    let mut gram = lambda.transpose() * &w;
    gram = (&gram + gram.transpose()) * 0.5;
    let chol_g = gram.cholesky().ok_or(Error::RankDeficient {
        context: "gls_factors_banded weighted Gram",
    })?;
    let rhs = centered.values() * &w; // T x r
    let values = chol_g.solve(&rhs.transpose()).transpose();
    Ok(FactorPath {
        values,
        method: FactorMethod::Gls0,
    })
}

/// Sample covariance of a residual matrix truncated to a band and
/// diagonal-loaded into positive definiteness. The default half-bandwidth
/// used by callers is 10.
pub fn banded_residual_cov(residuals: &DMatrix<f64>, half_band: usize) -> DMatrix<f64> {
    let (t_len, n) = (residuals.nrows(), residuals.ncols());
    let mut cov = residuals.transpose() * residuals / t_len as f64;
    for i in 0..n {
        for j in 0..n {
            if i.abs_diff(j) > half_band {
                cov[(i, j)] = 0.0;
            }
        }
    }
    let load = 1e-6 * cov.trace() / n as f64;
    for i in 0..n {
        cov[(i, i)] += load;
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Panel;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    }

    fn small_params(n: usize, r: usize, seed: u64) -> StaticParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambda = randn(&mut rng, n, r);
        let sigma2 = DVector::from_fn(n, |i, _| 0.5 + 0.1 * i as f64);
        StaticParams::new(DVector::zeros(n), lambda, sigma2).unwrap()
    }

    #[test]
    fn wls_equals_ols_under_equal_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 25, 6);
        let (_, centered) = demean(&Panel::new(x).unwrap()).unwrap();
        let mut params = small_params(6, 2, 2);
        params.sigma2 = DVector::from_element(6, 0.7);
        let wls = wls_factors(&centered, &params).unwrap();
        let ols = crate::pca::ols_factors(&centered, &params.lambda).unwrap();
        assert!((wls.values - ols.values).amax() < 1e-10);
    }

    #[test]
    fn lp_is_scalar_shrinkage_of_wls_when_r_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 20, 5);
        let (_, centered) = demean(&Panel::new(x).unwrap()).unwrap();
        let params = small_params(5, 1, 4);
        let b: f64 = (0..5)
            .map(|i| params.lambda[(i, 0)].powi(2) / params.sigma2[i])
            .sum();
        let wls = wls_factors(&centered, &params).unwrap();
        let lp = lp_factors(&centered, &params).unwrap();
        for t in 0..20 {
            assert_relative_eq!(
                lp.values[(t, 0)],
                wls.values[(t, 0)] * b / (b + 1.0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn wls_matches_weighted_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 12, 5);
        let (_, centered) = demean(&Panel::new(x).unwrap()).unwrap();
        let params = small_params(5, 2, 6);
        let wls = wls_factors(&centered, &params).unwrap();

        // Dense oracle: explicit inverse of the weighted Gram.
        let si = DMatrix::from_fn(5, 5, |i, j| {
            if i == j {
                1.0 / params.sigma2[i]
            } else {
                0.0
            }
        });
        let gram = params.lambda.transpose() * &si * &params.lambda;
        let ginv = gram.try_inverse().unwrap();
        for t in 0..12 {
            let xt = centered.values().row(t).transpose();
            let f = &ginv * params.lambda.transpose() * &si * xt;
            for j in 0..2 {
                assert_relative_eq!(wls.values[(t, j)], f[j], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn em_likelihood_trace_is_monotone_and_matches_dense_oracle_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 8;
        let t_len = 60;
        let f = randn(&mut rng, t_len, 2);
        let lam = randn(&mut rng, n, 2);
        let noise = randn(&mut rng, t_len, n) * 0.6;
        let x = &f * lam.transpose() + noise;
        let panel = Panel::new(x).unwrap();
        let init = small_params(n, 2, 10);

        let fit = static_em_fit(&panel, 2, Some(init.clone()), 1000, 1e-6).unwrap();
        assert!(fit.converged);
        for w in fit.loglik_trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-8 * (w[0].abs() + 1.0),
                "likelihood decreased: {} -> {}",
                w[0],
                w[1]
            );
        }

        // Dense oracle for the first trace entry: plain Gaussian likelihood
        // with covariance ΛΛ' + Σ formed explicitly.
        let (_, centered) = demean(&panel).unwrap();
        let xc = centered.values();
        let mut g = &init.lambda * init.lambda.transpose();
        for i in 0..n {
            g[(i, i)] += init.sigma2[i];
        }
        let chol = g.clone().cholesky().unwrap();
        let logdet: f64 = (0..n).map(|i| 2.0 * chol.l_dirty()[(i, i)].ln()).sum();
        let mut quad = 0.0;
        for t in 0..t_len {
            let xt = xc.row(t).transpose();
            quad += xt.dot(&chol.solve(&xt));
        }
        let ll_dense = -0.5 * (t_len * n) as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * t_len as f64 * logdet
            - 0.5 * quad;
        assert_relative_eq!(fit.loglik_trace[0], ll_dense, epsilon = 1e-8 * ll_dense.abs());
    }

    #[test]
    fn em_started_at_the_exact_mle_does_not_move() {
        // Build a panel whose sample covariance is exactly ΛΛ' + Σ. The
        // unconstrained Gaussian MLE over covariances is the sample
        // covariance itself, so (Λ, Σ) maximizes the factor-model likelihood
        // and must be an EM fixed point.
        let n = 5;
        let r = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let l_raw = randn(&mut rng, n, r);
        let f_seed = randn(&mut rng, n, r);
        let (lambda, _) = crate::core::identify_rotation(&l_raw, &f_seed).unwrap();
        let sigma2 = DVector::from_fn(n, |i, _| 0.4 + 0.2 * i as f64);
        let mut gamma = &lambda * lambda.transpose();
        for i in 0..n {
            gamma[(i, i)] += sigma2[i];
        }
        let eig = nalgebra::SymmetricEigen::new(gamma);
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
        // The raw EM map must not move from the stationary point.
        let panel = Panel::new(x).unwrap();
        let (_, centered) = demean(&panel).unwrap();
        let xc = centered.values();
        let col_ss: Vec<f64> = (0..n)
            .map(|i| xc.column(i).iter().map(|v| v * v).sum())
            .collect();
        let floor: Vec<f64> = col_ss.iter().map(|ss| 1e-8 * ss / t_len as f64).collect();
        let (lambda_new, sigma2_new, clamps) =
            em_update(xc, &col_ss, &floor, &lambda, &sigma2).unwrap();
        assert_eq!(clamps, 0);
        assert!((&lambda_new - &lambda).amax() < 1e-8);
        assert!((&sigma2_new - &sigma2).amax() < 1e-8);

        // And the full fit declares convergence immediately, with a flat
        // likelihood trace.
        let init = StaticParams::new(DVector::zeros(n), lambda.clone(), sigma2.clone()).unwrap();
        let fit = static_em_fit(&panel, r, Some(init), 50, 1e-10).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2, "took {} iterations", fit.iterations);
        let first = fit.loglik_trace[0];
        for &ll in &fit.loglik_trace {
            assert_relative_eq!(ll, first, max_relative = 1e-10);
        }
    }

    #[test]
    fn iterative_scheme_recovers_noiseless_truth_in_one_round() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let l_raw = randn(&mut rng, 10, 2);
        let mut f_raw = randn(&mut rng, 40, 2);
        for j in 0..2 {
            let m = f_raw.column(j).mean();
            for t in 0..40 {
                f_raw[(t, j)] -= m;
            }
        }
        let (lambda, f) = crate::core::identify_rotation(&l_raw, &f_raw).unwrap();
        let x = &f * lambda.transpose();
        let fit = iterative_ols_wls(&Panel::new(x).unwrap(), 2, 30, 1e-10).unwrap();
        assert!(fit.converged);
        assert!((&fit.params.lambda - &lambda).amax() < 1e-7);
        assert!((&fit.factors.values - &f).amax() < 1e-7);
    }

    #[test]
    fn ar1_fit_white_noise_and_persistent_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let t_len = 600;
        let white = randn(&mut rng, t_len, 1);
        let idio = ar1_idio_fit(&white);
        assert!(idio.alpha[0].abs() < 0.12, "alpha = {}", idio.alpha[0]);

        let mut persistent = DMatrix::zeros(t_len, 1);
        for t in 1..t_len {
            persistent[(t, 0)] =
                0.5 * persistent[(t - 1, 0)] + rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let idio = ar1_idio_fit(&persistent);
        assert!(
            (idio.alpha[0] - 0.5).abs() < 0.12,
            "alpha = {}",
            idio.alpha[0]
        );
        assert!((idio.omega2[0] - 1.0).abs() < 0.2);
    }

    #[test]
    fn ar1_fit_constant_series_is_clamped() {
        let resid = DMatrix::from_element(10, 1, 3.0);
        let idio = ar1_idio_fit(&resid);
        assert_relative_eq!(idio.alpha[0], 0.99);
        assert!(idio.omega2[0] > 0.0);

        let zeros = DMatrix::zeros(10, 1);
        let idio = ar1_idio_fit(&zeros);
        assert_relative_eq!(idio.alpha[0], 0.0);
        assert!(idio.omega2[0] > 0.0); // floored
    }

    #[test]
    fn gls_loadings_with_zero_alpha_reduce_to_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = randn(&mut rng, 30, 4);
        let f = randn(&mut rng, 30, 2);
        let (_, centered) = demean(&Panel::new(x).unwrap()).unwrap();
        let idio = Ar1IdioParams::new(DVector::zeros(4), DVector::from_element(4, 1.0)).unwrap();
        let gls = gls_loadings_ar1(&centered, &f, &idio).unwrap();
        let ols = ols_loadings(&centered, &f).unwrap();
        assert!((gls - ols).amax() < 1e-12);
    }

    #[test]
    fn gls_loadings_match_dense_toeplitz_inverse() {
        let t_len = 6;
        let alpha = 0.5;
        let omega2 = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let x = randn(&mut rng, t_len, 1);
        let f = randn(&mut rng, t_len, 1);
        let (_, centered) = demean(&Panel::new(x).unwrap()).unwrap();
        let idio = Ar1IdioParams::new(
            DVector::from_element(1, alpha),
            DVector::from_element(1, omega2),
        )
        .unwrap();
        let gls = gls_loadings_ar1(&centered, &f, &idio).unwrap();

        // Dense oracle: AR(1) autocovariance Δ_ts = ω² α^{|t-s|}/(1-α²),
        // inverted explicitly.
        let delta = DMatrix::from_fn(t_len, t_len, |t, s| {
            omega2 * alpha.powi((t as i32 - s as i32).abs()) / (1.0 - alpha * alpha)
        });
        let dinv = delta.try_inverse().unwrap();
        let gram = (f.transpose() * &dinv * &f)[(0, 0)];
        let rhs = (f.transpose() * &dinv * centered.values().column(0).clone_owned())[(0, 0)];
        assert_relative_eq!(gls[(0, 0)], rhs / gram, epsilon = 1e-10);
    }

    #[test]
    fn banded_gls_factors_reduce_to_wls_and_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = randn(&mut rng, 18, 5);
        let (_, centered) = demean(&Panel::new(x).unwrap()).unwrap();
        let params = small_params(5, 2, 62);

        let diag = DMatrix::from_fn(5, 5, |i, j| {
            if i == j {
                params.sigma2[i]
            } else {
                0.0
            }
        });
        let gls = gls_factors_banded(&centered, &params.lambda, &diag).unwrap();
        let wls = wls_factors(&centered, &params).unwrap();
        assert!((gls.values - wls.values).amax() < 1e-10);

        let eye = DMatrix::identity(5, 5);
        let gls = gls_factors_banded(&centered, &params.lambda, &eye).unwrap();
        let ols = crate::pca::ols_factors(&centered, &params.lambda).unwrap();
        assert!((gls.values - ols.values).amax() < 1e-10);
    }

    #[test]
    fn banded_gls_factors_match_dense_solve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let x = randn(&mut rng, 10, 4);
        let (_, centered) = demean(&Panel::new(x).unwrap()).unwrap();
        let lambda = randn(&mut rng, 4, 1);
        let a = randn(&mut rng, 4, 4);
        let gamma = &a * a.transpose() + DMatrix::identity(4, 4);
        let gls = gls_factors_banded(&centered, &lambda, &gamma).unwrap();

        let ginv = gamma.try_inverse().unwrap();
        let gram = (lambda.transpose() * &ginv * &lambda)[(0, 0)];
        for t in 0..10 {
            let xt = centered.values().row(t).transpose();
            let f = (lambda.transpose() * &ginv * xt)[(0, 0)] / gram;
            assert_relative_eq!(gls.values[(t, 0)], f, epsilon = 1e-10);
        }
    }

    #[test]
    fn banded_residual_cov_truncates_and_loads() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let resid = randn(&mut rng, 50, 6);
        let cov = banded_residual_cov(&resid, 2);
        assert_eq!(cov[(0, 3)], 0.0);
        assert_eq!(cov[(5, 1)], 0.0);
        assert!(cov[(0, 2)] != 0.0);
        assert!(cov.clone().cholesky().is_some());
        // Diagonal carries the 1e-6 load over the plain sample variance.
        let plain = resid.column(0).iter().map(|x| x * x).sum::<f64>() / 50.0;
        assert!(cov[(0, 0)] > plain);
    }
}

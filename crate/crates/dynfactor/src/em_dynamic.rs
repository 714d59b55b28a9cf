//! EM estimation of the dynamic factor model: principal-component
//! initialization, Kalman-smoother E-step, closed-form M-step, and
//! likelihood-based stopping.
//!
//! The complete-data likelihood factors into a regression block for
//! `(Λ, Σ^ξ)` and a VAR block for `(A, H)`, so the M-step only needs three
//! accumulated smoothed moments,
//!
//! ```text
//! S_ff    = Σ_{t=1..T} E[F_t F_t' | X]
//! S_cross = Σ_{t=1..T} E[F_t F_{t-1}' | X]     (includes the t = 1 term)
//! S_lag   = Σ_{t=0..T-1} E[F_t F_t' | X]
//! ```
//!
//! all three of which include the smoothed pre-sample state `F_0`. Summing
//! the VAR block from `t = 1` keeps every update the exact maximizer of the
//! expected complete-data likelihood, which is what guarantees the
//! monotonicity of the prediction-error log-likelihood across iterations.

use nalgebra::{DMatrix, DVector};

use crate::core::{
    demean, identify_rotation_with_map, spectral_radius, DynamicParams, Panel, StaticParams,
};
use crate::pca::pc_fit;
use crate::ssm::{
    impute_missing_sw, kalman_filter, kalman_smoother, FilterVariant, InitMode, SmootherOutput,
    SmootherVariant,
};
use crate::{Error, Result};

/// Relative floor for idiosyncratic variance updates (multiple of the
/// series sample variance), as in the static EM.
const SIGMA2_FLOOR_REL: f64 = 1e-8;
/// Eigenvalue floor applied to the shock covariance before Cholesky.
const SHOCK_EIG_FLOOR: f64 = 1e-10;
/// Spectral radius above which the transition matrix is shrunk back.
const RADIUS_LIMIT: f64 = 0.999;
/// Radius the shrink aims for.
const RADIUS_TARGET: f64 = 0.98;

/// Smoothed-moment sufficient statistics for one EM iteration, together
/// with the smoother output they were accumulated from.
#[derive(Debug, Clone)]
pub struct EmSuffStats {
    /// `Σ_{t=1..T} E[F_t F_t' | X]`.
    pub s_ff: DMatrix<f64>,
    /// `Σ_{t=1..T} E[F_t F_{t-1}' | X]`.
    pub s_cross: DMatrix<f64>,
    /// `Σ_{t=0..T-1} E[F_t F_t' | X]`.
    pub s_lag: DMatrix<f64>,
    /// The per-period moments behind the sums.
    pub smoother: SmootherOutput,
}

/// Result of the dynamic EM fit.
#[derive(Debug, Clone)]
pub struct DynamicEmFit {
    pub params: DynamicParams,
    /// Final smoother pass at the identified parameters.
    pub smoother: SmootherOutput,
    /// Prediction-error log-likelihood at the parameters entering each
    /// iteration.
    pub loglik_trace: Vec<f64>,
    /// Number of completed parameter updates.
    pub iterations: usize,
    pub converged: bool,
}

/// Starting values: loadings and idiosyncratic variances from principal
/// components, transition matrix from a VAR(1) regression on the PC factor
/// path, shock loading from the Cholesky factor of the VAR residual
/// covariance. Missing cells are imputed for this step only.
pub fn em_initialize(panel: &Panel, r: usize) -> Result<DynamicParams> {
    let complete = if panel.is_complete() {
        panel.clone()
    } else {
        impute_missing_sw(panel, r, 100, 1e-6)?
    };
    let fit = pc_fit(&complete, r)?;
    let f = &fit.factors.values;
    let t_len = f.nrows();

    // VAR(1) by least squares on the factor path.
    let mut sxx = DMatrix::<f64>::zeros(r, r);
    let mut sxy = DMatrix::<f64>::zeros(r, r);
    for t in 1..t_len {
        let prev = f.row(t - 1);
        let cur = f.row(t);
        for i in 0..r {
            for j in 0..r {
                sxx[(i, j)] += prev[i] * prev[j];
                sxy[(i, j)] += cur[i] * prev[j];
            }
        }
    }
    let chol = sxx.cholesky().ok_or(Error::RankDeficient {
        context: "VAR initialization Gram",
    })?;
    let mut a = chol.solve(&sxy.transpose()).transpose();

    let rho = spectral_radius(&a);
    if rho >= RADIUS_LIMIT {
        a *= RADIUS_TARGET / rho;
    }

    let mut resid_cov = DMatrix::<f64>::zeros(r, r);
    for t in 1..t_len {
        let e = f.row(t).transpose() - &a * f.row(t - 1).transpose();
        resid_cov += &e * e.transpose();
    }
    resid_cov /= (t_len - 1) as f64;
    let (h, _floored) = floored_cholesky(&resid_cov)?;

    DynamicParams::new(fit.params, a, h)
}

/// Lower Cholesky factor after symmetrizing and, if needed, flooring the
/// eigenvalues of `m`. Returns whether the floor was applied.
fn floored_cholesky(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(chol) = sym.clone().cholesky() {
        return Ok((chol.l(), false));
    }
    let r = sym.nrows();
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut rebuilt = DMatrix::zeros(r, r);
    for k in 0..r {
        let v = eig.eigenvectors.column(k);
        let ev = eig.eigenvalues[k].max(SHOCK_EIG_FLOOR);
        for i in 0..r {
            for j in 0..r {
                rebuilt[(i, j)] += ev * v[i] * v[j];
            }
        }
    }
    let chol = rebuilt.cholesky().ok_or(Error::NotPositiveDefinite {
        context: "shock covariance after eigenvalue floor",
    })?;
    Ok((chol.l(), true))
}

/// E-step: smoother pass at the current parameters plus the three moment
/// accumulations (each including the pre-sample state).
pub fn em_estep(centered: &Panel, params: &DynamicParams) -> Result<EmSuffStats> {
    let variant = FilterVariant::auto(centered.n_series(), params.base.r);
    let filt = kalman_filter(centered, params, variant, InitMode::default())?;
    let smoother = kalman_smoother(&filt, centered, params, SmootherVariant::DurbinKoopman)?;
    Ok(accumulate_suffstats(smoother))
}

/// Moment accumulation behind [`em_estep`], separated so oracle tests can
/// feed a hand-built smoother output.
pub fn accumulate_suffstats(smoother: SmootherOutput) -> EmSuffStats {
    let t_len = smoother.f_smooth.nrows();
    let r = smoother.f_smooth.ncols();

    let mut s_ff = DMatrix::<f64>::zeros(r, r);
    for t in 0..t_len {
        let f = smoother.f_smooth.row(t);
        for i in 0..r {
            for j in 0..r {
                s_ff[(i, j)] += f[i] * f[j] + smoother.p_smooth[t][(i, j)];
            }
        }
    }

    // Cross moments: the t = 1 term pairs F_1 with the pre-sample state.
    let mut s_cross = DMatrix::<f64>::zeros(r, r);
    {
        let f1 = smoother.f_smooth.row(0);
        for i in 0..r {
            for j in 0..r {
                s_cross[(i, j)] += f1[i] * smoother.f0_smooth[j] + smoother.c0_lag[(i, j)];
            }
        }
    }
    for t in 1..t_len {
        let cur = smoother.f_smooth.row(t);
        let prev = smoother.f_smooth.row(t - 1);
        for i in 0..r {
            for j in 0..r {
                s_cross[(i, j)] += cur[i] * prev[j] + smoother.c_lag[t - 1][(i, j)];
            }
        }
    }

    // Lagged second moments: drop the last period, add the pre-sample state.
    let mut s_lag = s_ff.clone();
    {
        let fl = smoother.f_smooth.row(t_len - 1);
        for i in 0..r {
            for j in 0..r {
                s_lag[(i, j)] -= fl[i] * fl[j] + smoother.p_smooth[t_len - 1][(i, j)];
                s_lag[(i, j)] +=
                    smoother.f0_smooth[i] * smoother.f0_smooth[j] + smoother.p0_smooth[(i, j)];
            }
        }
    }

    EmSuffStats {
        s_ff,
        s_cross,
        s_lag,
        smoother,
    }
}

/// M-step: regression updates for `(Λ, Σ^ξ)` (per-series observed sums when
/// cells are missing, sequential `σ̂²` at the new loadings) and the VAR
/// block `Â = S_cross S_lag^{-1}`, `ĤĤ' = (S_ff - Â S_cross')/T`.
pub fn em_mstep(centered: &Panel, stats: &EmSuffStats) -> Result<DynamicParams> {
    let (t_len, n) = (centered.t_len(), centered.n_series());
    let f = &stats.smoother.f_smooth;
    let r = f.ncols();
    if f.nrows() != t_len {
        return Err(Error::InvalidArgument(
            "sufficient statistics do not match the panel length".into(),
        ));
    }

    // Loadings and variances.
    let mut lambda = DMatrix::<f64>::zeros(n, r);
    let mut sigma2 = DVector::<f64>::zeros(n);
    let complete = centered.is_complete();
    let chol_ff = if complete {
        Some(stats.s_ff.clone().cholesky().ok_or(Error::RankDeficient {
            context: "dynamic EM factor second moment",
        })?)
    } else {
        None
    };

    for i in 0..n {
        let (m_i, b_i, obs_count, col_ss) = if complete {
            let mut b = DVector::<f64>::zeros(r);
            let mut ss = 0.0;
            for t in 0..t_len {
                let x = centered.values()[(t, i)];
                ss += x * x;
                for j in 0..r {
                    b[j] += f[(t, j)] * x;
                }
            }
            (None, b, t_len, ss)
        } else {
            let mut m = DMatrix::<f64>::zeros(r, r);
            let mut b = DVector::<f64>::zeros(r);
            let mut ss = 0.0;
            let mut cnt = 0usize;
            for t in 0..t_len {
                if !centered.mask()[(t, i)] {
                    continue;
                }
                cnt += 1;
                let x = centered.values()[(t, i)];
                ss += x * x;
                for a in 0..r {
                    b[a] += f[(t, a)] * x;
                    for c in 0..r {
                        m[(a, c)] += f[(t, a)] * f[(t, c)] + stats.smoother.p_smooth[t][(a, c)];
                    }
                }
            }
            if cnt == 0 {
                return Err(Error::EmptySeries {
                    name: centered.names()[i].clone(),
                });
            }
            (Some(m), b, cnt, ss)
        };

        let lam_i = match (&chol_ff, m_i) {
            (Some(chol), None) => chol.solve(&b_i),
            (_, Some(m)) => m
                .cholesky()
                .ok_or(Error::RankDeficient {
                    context: "dynamic EM per-series factor moment",
                })?
                .solve(&b_i),
            (None, None) => unreachable!(),
        };

        // σ̂² at the new loadings, over the observed periods of series i.
        let quad = if complete {
            (lam_i.transpose() * &stats.s_ff * &lam_i)[(0, 0)]
        } else {
            let mut q = 0.0;
            for t in 0..t_len {
                if !centered.mask()[(t, i)] {
                    continue;
                }
                let mut fx = 0.0;
                for a in 0..r {
                    for c in 0..r {
                        fx += lam_i[a]
                            * (f[(t, a)] * f[(t, c)] + stats.smoother.p_smooth[t][(a, c)])
                            * lam_i[c];
                    }
                }
                q += fx;
            }
            q
        };
        let cross: f64 = (0..r).map(|j| lam_i[j] * b_i[j]).sum();
        let var_i = col_ss / obs_count as f64;
        let floor = SIGMA2_FLOOR_REL * var_i.max(f64::MIN_POSITIVE);
        sigma2[i] = ((col_ss - 2.0 * cross + quad) / obs_count as f64).max(floor);
        for j in 0..r {
            lambda[(i, j)] = lam_i[j];
        }
    }

    // VAR block.
    let chol_lag = stats.s_lag.clone().cholesky().ok_or(Error::RankDeficient {
        context: "dynamic EM lagged factor moment",
    })?;
    let mut a = chol_lag.solve(&stats.s_cross.transpose()).transpose();
    let rho = spectral_radius(&a);
    if rho >= RADIUS_LIMIT {
        eprintln!("em_mstep: transition radius {rho:.4} shrunk to {RADIUS_TARGET}");
        a *= RADIUS_TARGET / rho;
    }
    let hh = (&stats.s_ff - &a * stats.s_cross.transpose()) / t_len as f64;
    let (h, floored) = floored_cholesky(&hh)?;
    if floored {
        eprintln!("em_mstep: shock covariance eigenvalue-floored at {SHOCK_EIG_FLOOR:e}");
    }

    let base = StaticParams::new(DVector::zeros(n), lambda, sigma2)?;
    DynamicParams::new(base, a, h)
}

/// Full EM loop with likelihood-based stopping, final smoother pass, and
/// re-identification of the fitted system.
pub fn em_fit(panel: &Panel, r: usize, max_iter: usize, tol: f64) -> Result<DynamicEmFit> {
    let (t_len, n) = (panel.t_len(), panel.n_series());
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

    let init = em_initialize(panel, r)?;
    let (alpha, centered) = demean(panel)?;
    let mut params = init;

    let mut trace = Vec::with_capacity(max_iter + 1);
    let mut converged = false;
    let mut iterations = 0usize;
    let mut stats = em_estep(&centered, &params)?;

    for iter in 0..=max_iter {
        let ll = stats.smoother.loglik;
        trace.push(ll);
        if iter >= 1 {
            let prev = trace[iter - 1];
            let slack = 1e-6 * (prev.abs() + 1.0);
            if ll < prev - slack {
                return Err(Error::LikelihoodDecrease {
                    iter,
                    from: prev,
                    to: ll,
                });
            }
            if (ll - prev).abs() < tol * (prev.abs() + 1.0) {
                converged = true;
                break;
            }
        }
        if iter == max_iter {
            break;
        }
        params = em_mstep(&centered, &stats)?;
        stats = em_estep(&centered, &params)?;
        iterations = iter + 1;
    }

    // Re-identify against the smoothed factor path; conjugate the state
    // dynamics by the same linear map so the fitted system is unchanged.
    let (lambda_id, _f_id, r_map) =
        identify_rotation_with_map(&params.base.lambda, &stats.smoother.f_smooth)?;
    let r_inv = r_map
        .clone()
        .try_inverse()
        .ok_or(Error::RankDeficient {
            context: "identification map inversion",
        })?;
    let a_id = &r_map * &params.a_mat * &r_inv;
    let hh_id = &r_map * params.shock_cov() * r_map.transpose();
    let (h_id, _) = floored_cholesky(&hh_id)?;

    let base = StaticParams::new(alpha, lambda_id, params.base.sigma2.clone())?;
    let params_id = DynamicParams::new(base, a_id, h_id)?;

    // Final smoother pass at the identified parameters.
    let variant = FilterVariant::auto(n, r);
    let filt = kalman_filter(&centered, &params_id, variant, InitMode::default())?;
    let smoother = kalman_smoother(&filt, &centered, &params_id, SmootherVariant::DurbinKoopman)?;

    Ok(DynamicEmFit {
        params: params_id,
        smoother,
        loglik_trace: trace,
        iterations,
        converged,
    })
}

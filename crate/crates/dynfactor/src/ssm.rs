//! State-space machinery for the dynamic factor model: Kalman filter
//! (standard and Woodbury forms), Kalman smoother (standard and
//! Durbin–Koopman forms), prediction-error log-likelihood, missing-data
//! handling, and a dense direct-projection smoother used as an oracle.
//!
//! State equation `F_t = A F_{t-1} + H u_t`, observation
//! `x_t - x̄ = Λ F_t + ξ_t` with `ξ_t ~ N(0, Σ^ξ)` diagonal. Time indexing:
//! row `t` of a `T x r` output refers to state `F_{t+1}` in model time; the
//! pre-sample state `F_0` gets its own fields on [`SmootherOutput`].
//!
//! Missing observations are handled by row deletion: at each `t` only the
//! observed rows of `x_t`, `Λ`, and `Σ^ξ` enter the update, so the
//! observation dimension is time-varying and no pseudo-variance trick is
//! needed.

use nalgebra::{DMatrix, DVector};

use crate::core::{FactorMethod, FactorPath, Panel};
use crate::core::DynamicParams;
use crate::pca::pc_fit;
use crate::{Error, Result};

/// Cap on `r · T` for the dense direct-projection smoother.
const DIRECT_CAP: usize = 500;

/// How to initialize `P_{0|0}` (the pre-sample state variance); `F_{0|0}` is
/// always the zero vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    /// `P_{0|0} = c · I_r` for a large finite `c` (default `c = 1e3`).
    Diffuse(f64),
    /// `P_{0|0}` solves the stationary equation `P = APA' + HH'`; use this
    /// when comparing against projections built from the stationary factor
    /// autocovariance.
    Stationary,
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Diffuse(1e3)
    }
}

/// Algebraic form of the filter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVariant {
    /// Textbook update through the `N_t x N_t` innovation covariance.
    Standard,
    /// Equivalent update through `r x r` matrices only (Woodbury identity);
    /// preferable when the cross-section is wide.
    Woodbury,
}

impl FilterVariant {
    /// Cost-based default: Woodbury once the observation dimension exceeds
    /// twice the state dimension.
    pub fn auto(n: usize, r: usize) -> Self {
        if n > 2 * r {
            FilterVariant::Woodbury
        } else {
            FilterVariant::Standard
        }
    }
}

/// Algebraic form of the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmootherVariant {
    /// Rauch–Tung–Striebel gains `J_t = P_{t|t} A' P_{t+1|t}^{-1}`.
    Standard,
    /// Durbin–Koopman backward recursion in `(r_t, N_t)`; avoids inverting
    /// the predicted covariances.
    DurbinKoopman,
}

/// Forward-pass output. Covariances are stored per period because the
/// observation pattern (and therefore the update) can vary over time.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// One-step predictions `F_{t|t-1}`, `T x r`.
    pub f_pred: DMatrix<f64>,
    /// Predicted covariances `P_{t|t-1}`.
    pub p_pred: Vec<DMatrix<f64>>,
    /// Filtered states `F_{t|t}`, `T x r`.
    pub f_filt: DMatrix<f64>,
    /// Filtered covariances `P_{t|t}`.
    pub p_filt: Vec<DMatrix<f64>>,
    /// Prediction-error log-likelihood.
    pub loglik: f64,
    /// `P_{0|0}` actually used (resolves the init mode).
    pub p0: DMatrix<f64>,
    // Per-period quantities the Durbin–Koopman smoother reuses:
    // u_t = Λ_t' S_t^{-1} v_t and W_t = Λ_t' S_t^{-1} Λ_t (zero when the
    // whole period is unobserved).
    pub(crate) innov_proj: Vec<DVector<f64>>,
    pub(crate) innov_gram: Vec<DMatrix<f64>>,
}

/// Backward-pass output.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// Smoothed states `F_{t|T}`, `T x r`.
    pub f_smooth: DMatrix<f64>,
    /// Smoothed covariances `P_{t|T}`.
    pub p_smooth: Vec<DMatrix<f64>>,
    /// Lag-one smoothed cross-covariances: entry `t` is
    /// `Cov(F_{t+2}, F_{t+1} | X)` in model time (length `T - 1`).
    pub c_lag: Vec<DMatrix<f64>>,
    /// Log-likelihood carried over from the forward pass (or the joint
    /// marginal density for the direct projection).
    pub loglik: f64,
    /// Smoothed pre-sample state `E[F_0 | X]`.
    pub f0_smooth: DVector<f64>,
    /// Smoothed pre-sample variance `Var(F_0 | X)`.
    pub p0_smooth: DMatrix<f64>,
    /// `Cov(F_1, F_0 | X)`.
    pub c0_lag: DMatrix<f64>,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn logdet_from_cholesky(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

/// Stationary state covariance `Γ_0` solving `Γ_0 = A Γ_0 A' + HH'`,
/// obtained from `vec(Γ_0) = (I - A ⊗ A)^{-1} vec(HH')`.
pub fn stationary_state_cov(params: &DynamicParams) -> Result<DMatrix<f64>> {
    let r = params.base.r;
    let a = &params.a_mat;
    let hh = params.shock_cov();
    let eye = DMatrix::<f64>::identity(r * r, r * r);
    let kron = a.kronecker(a);
    let lhs = eye - kron;
    let rhs = DVector::from_fn(r * r, |k, _| hh[(k % r, k / r)]); // column-major vec
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or(Error::RankDeficient {
            context: "stationary covariance solve (is A stable?)",
        })?;
    let gamma = DMatrix::from_fn(r, r, |i, j| sol[j * r + i]);
    Ok(sym(&gamma))
}

fn resolve_p0(params: &DynamicParams, init: InitMode) -> Result<DMatrix<f64>> {
    let r = params.base.r;
    match init {
        InitMode::Diffuse(c) => {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "diffuse initialization needs a finite positive scale, got {c}"
                )));
            }
            Ok(DMatrix::identity(r, r) * c)
        }
        InitMode::Stationary => stationary_state_cov(params),
    }
}

/// Kalman forward pass on a centered panel (any intercept is assumed
/// removed; `params.base.alpha` is not applied here).
pub fn kalman_filter(
    centered: &Panel,
    params: &DynamicParams,
    variant: FilterVariant,
    init: InitMode,
) -> Result<FilterOutput> {
    let (t_len, n) = (centered.t_len(), centered.n_series());
    let r = params.base.r;
    if params.base.n_series() != n {
        return Err(Error::InvalidArgument(format!(
            "params cover {} series, panel has {}",
            params.base.n_series(),
            n
        )));
    }
    let lambda = &params.base.lambda;
    let sigma2 = &params.base.sigma2;
    let a = &params.a_mat;
    let hh = params.shock_cov();
    let p0 = resolve_p0(params, init)?;

    let mut f_pred = DMatrix::zeros(t_len, r);
    let mut f_filt = DMatrix::zeros(t_len, r);
    let mut p_pred = Vec::with_capacity(t_len);
    let mut p_filt = Vec::with_capacity(t_len);
    let mut innov_proj = Vec::with_capacity(t_len);
    let mut innov_gram = Vec::with_capacity(t_len);
    let mut loglik = 0.0;

    let mut f_prev = DVector::<f64>::zeros(r);
    let mut p_prev = p0.clone();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    for t in 0..t_len {
        let fp = a * &f_prev;
        let pp = sym(&(a * &p_prev * a.transpose() + &hh));

        let obs: Vec<usize> = (0..n).filter(|&i| centered.mask()[(t, i)]).collect();
        let n_obs = obs.len();
        if n_obs == 0 {
            // Nothing observed: the update is pure prediction.
            f_filt.set_row(t, &fp.transpose());
            f_pred.set_row(t, &fp.transpose());
            p_filt.push(pp.clone());
            p_pred.push(pp.clone());
            innov_proj.push(DVector::zeros(r));
            innov_gram.push(DMatrix::zeros(r, r));
            f_prev = fp;
            p_prev = p_filt[t].clone();
            continue;
        }

        // Innovation v_t over the observed rows.
        let mut v = DVector::zeros(n_obs);
        for (k, &i) in obs.iter().enumerate() {
            let mut pred = 0.0;
            for j in 0..r {
                pred += lambda[(i, j)] * fp[j];
            }
            v[k] = centered.values()[(t, i)] - pred;
        }

        let (ff, pf, ll_t, u_t, w_t) = match variant {
            FilterVariant::Woodbury => {
                // Everything through r x r matrices: B = Λ'Σ^{-1}Λ,
                // M = B + P_{t|t-1}^{-1}; then F_{t|t} = F_{t|t-1} + M^{-1}g
                // with g = Λ'Σ^{-1}v, and P_{t|t} = M^{-1}.
                let mut b = DMatrix::<f64>::zeros(r, r);
                let mut g = DVector::<f64>::zeros(r);
                let mut q = 0.0;
                let mut log_sig = 0.0;
                for (k, &i) in obs.iter().enumerate() {
                    let w = 1.0 / sigma2[i];
                    log_sig += sigma2[i].ln();
                    q += v[k] * v[k] * w;
                    for aj in 0..r {
                        let lw = lambda[(i, aj)] * w;
                        g[aj] += lw * v[k];
                        for cj in 0..r {
                            b[(aj, cj)] += lw * lambda[(i, cj)];
                        }
                    }
                }
                let chol_pp = pp.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                    context: "predicted state covariance",
                })?;
                let p_inv = chol_pp.solve(&DMatrix::identity(r, r));
                let m = sym(&(&b + &p_inv));
                let chol_m = m.clone().cholesky().ok_or(Error::SingularInnovation { t })?;
                let gain = chol_m.solve(&g);
                let ff = &fp + &gain;
                let pf = sym(&chol_m.solve(&DMatrix::identity(r, r)));

                // log det S and v'S^{-1}v through the same identities.
                let logdet_s = log_sig + logdet_from_cholesky(&chol_pp) + logdet_from_cholesky(&chol_m);
                let quad = q - g.dot(&gain);
                let ll_t = -0.5 * (n_obs as f64 * ln_2pi + logdet_s + quad);

                // Λ'S^{-1}v = (I - B M^{-1}) g, Λ'S^{-1}Λ = B - B M^{-1} B.
                let u_t = &g - &b * &gain;
                let w_t = sym(&(&b - &b * chol_m.solve(&b)));
                (ff, pf, ll_t, u_t, w_t)
            }
            FilterVariant::Standard => {
                let mut lam_t = DMatrix::zeros(n_obs, r);
                for (k, &i) in obs.iter().enumerate() {
                    for j in 0..r {
                        lam_t[(k, j)] = lambda[(i, j)];
                    }
                }
                let mut s = &lam_t * &pp * lam_t.transpose();
                for (k, &i) in obs.iter().enumerate() {
                    s[(k, k)] += sigma2[i];
                }
                let s = sym(&s);
                let chol_s = s.cholesky().ok_or(Error::SingularInnovation { t })?;
                let s_inv_v = chol_s.solve(&v);
                let s_inv_lam = chol_s.solve(&lam_t);
                let u_t = lam_t.transpose() * &s_inv_v; // Λ'S^{-1}v
                let w_t = sym(&(lam_t.transpose() * &s_inv_lam)); // Λ'S^{-1}Λ
                let ff = &fp + &pp * &u_t;
                let pf = sym(&(&pp - &pp * &w_t * &pp));
                let ll_t = -0.5
                    * (n_obs as f64 * ln_2pi + logdet_from_cholesky(&chol_s) + v.dot(&s_inv_v));
                (ff, pf, ll_t, u_t, w_t)
            }
        };

        if !ll_t.is_finite() {
            return Err(Error::NonFinite {
                context: "prediction-error log-likelihood",
            });
        }
        loglik += ll_t;
        f_pred.set_row(t, &fp.transpose());
        f_filt.set_row(t, &ff.transpose());
        p_pred.push(pp);
        p_filt.push(pf);
        innov_proj.push(u_t);
        innov_gram.push(w_t);
        f_prev = ff;
        p_prev = p_filt[t].clone();
    }

    Ok(FilterOutput {
        f_pred,
        p_pred,
        f_filt,
        p_filt,
        loglik,
        p0,
        innov_proj,
        innov_gram,
    })
}

/// Kalman backward pass. `filter` must come from [`kalman_filter`] on the
/// same `(centered, params)` pair.
pub fn kalman_smoother(
    filter: &FilterOutput,
    centered: &Panel,
    params: &DynamicParams,
    variant: SmootherVariant,
) -> Result<SmootherOutput> {
    let t_len = centered.t_len();
    let r = params.base.r;
    if filter.f_filt.nrows() != t_len || filter.f_filt.ncols() != r {
        return Err(Error::InvalidArgument(
            "filter output does not match the panel/params shape".into(),
        ));
    }
    let a = &params.a_mat;

    match variant {
        SmootherVariant::Standard => {
            let mut f_smooth = DMatrix::zeros(t_len, r);
            let mut p_smooth = vec![DMatrix::zeros(r, r); t_len];
            let mut c_lag = vec![DMatrix::zeros(r, r); t_len - 1];

            f_smooth.set_row(t_len - 1, &filter.f_filt.row(t_len - 1));
            p_smooth[t_len - 1] = filter.p_filt[t_len - 1].clone();

            for k in (0..t_len - 1).rev() {
                let j = rts_gain(&filter.p_filt[k], a, &filter.p_pred[k + 1])?;
                let df = filter.f_filt.row(k).transpose()
                    + &j * (f_smooth.row(k + 1).transpose() - filter.f_pred.row(k + 1).transpose());
                f_smooth.set_row(k, &df.transpose());
                p_smooth[k] = sym(
                    &(&filter.p_filt[k]
                        + &j * (&p_smooth[k + 1] - &filter.p_pred[k + 1]) * j.transpose()),
                );
                c_lag[k] = &p_smooth[k + 1] * j.transpose();
            }

            // Pre-sample state: F_{0|0} = 0, so the smoothed mean is pure
            // feedback through the time-0 gain.
            let j0 = rts_gain(&filter.p0, a, &filter.p_pred[0])?;
            let f0_smooth = &j0 * (f_smooth.row(0).transpose() - filter.f_pred.row(0).transpose());
            let p0_smooth = sym(
                &(&filter.p0 + &j0 * (&p_smooth[0] - &filter.p_pred[0]) * j0.transpose()),
            );
            let c0_lag = &p_smooth[0] * j0.transpose();

            Ok(SmootherOutput {
                f_smooth,
                p_smooth,
                c_lag,
                loglik: filter.loglik,
                f0_smooth,
                p0_smooth,
                c0_lag,
            })
        }
        SmootherVariant::DurbinKoopman => {
            let mut f_smooth = DMatrix::zeros(t_len, r);
            let mut p_smooth = vec![DMatrix::zeros(r, r); t_len];
            let mut c_lag = vec![DMatrix::zeros(r, r); t_len - 1];
            let eye = DMatrix::<f64>::identity(r, r);

            let mut r_cur = DVector::<f64>::zeros(r);
            let mut n_cur = DMatrix::<f64>::zeros(r, r);
            for k in (0..t_len).rev() {
                let pp = &filter.p_pred[k];
                let w = &filter.innov_gram[k];
                let u = &filter.innov_proj[k];
                let l = a * (&eye - pp * w);

                if k + 1 < t_len {
                    // Cov(F_{k+2}, F_{k+1}): transpose of P_{t|t-1} L_t'
                    // (I - N_t P_{t+1|t}) at t = k+1, with (r_cur, n_cur)
                    // still holding the step-(k+1) quantities.
                    let c = pp * l.transpose() * (&eye - &n_cur * &filter.p_pred[k + 1]);
                    c_lag[k] = c.transpose();
                }

                let r_new = u + l.transpose() * &r_cur;
                let n_new = sym(&(w + l.transpose() * &n_cur * &l));
                let fs = filter.f_pred.row(k).transpose() + pp * &r_new;
                f_smooth.set_row(k, &fs.transpose());
                p_smooth[k] = sym(&(pp - pp * &n_new * pp));
                r_cur = r_new;
                n_cur = n_new;
            }

            // Pre-sample state via the final (r, N): with F_{0|0} = 0,
            // E[F_0|X] = P_{0|0} A' r_0 and
            // Var(F_0|X) = P_{0|0} - P_{0|0} A' N_0 A P_{0|0}.
            let p0 = &filter.p0;
            let f0_smooth = p0 * a.transpose() * &r_cur;
            let p0_smooth = sym(&(p0 - p0 * a.transpose() * &n_cur * a * p0));
            let c0_lag = (&eye - &filter.p_pred[0] * &n_cur) * a * p0;

            Ok(SmootherOutput {
                f_smooth,
                p_smooth,
                c_lag,
                loglik: filter.loglik,
                f0_smooth,
                p0_smooth,
                c0_lag,
            })
        }
    }
}

/// `J_t = P_{t|t} A' P_{t+1|t}^{-1}`, solved rather than inverted.
fn rts_gain(
    p_filt: &DMatrix<f64>,
    a: &DMatrix<f64>,
    p_pred_next: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let chol = p_pred_next
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            context: "predicted covariance in the standard smoother (the dk variant avoids this inversion)",
        })?;
    // Solve P_{t+1|t} X = A P_{t|t}, then J = X'.
    let x = chol.solve(&(a * p_filt));
    Ok(x.transpose())
}

/// Dense direct-projection smoother: builds the joint Gaussian of the
/// stacked states `F_0, …, F_T` (stationary autocovariances
/// `Cov(F_t, F_s) = A^{t-s} Γ_0`) and the observed cells, then projects.
/// Exact but `O((rT)³)` — an oracle for the recursive smoother, capped at
/// `r·T ≤ 500`.
pub fn direct_smoother(centered: &Panel, params: &DynamicParams) -> Result<SmootherOutput> {
    let (t_len, n) = (centered.t_len(), centered.n_series());
    let r = params.base.r;
    if r * t_len > DIRECT_CAP {
        return Err(Error::ProjectionTooLarge {
            cap: DIRECT_CAP,
            got: r * t_len,
        });
    }
    if params.base.n_series() != n {
        return Err(Error::InvalidArgument(format!(
            "params cover {} series, panel has {}",
            params.base.n_series(),
            n
        )));
    }
    let lambda = &params.base.lambda;
    let sigma2 = &params.base.sigma2;
    let a = &params.a_mat;
    let gamma0 = stationary_state_cov(params)?;

    // States s = 0..=T stacked; block (t, s) of the state covariance is
    // A^{t-s} Γ_0 for t >= s.
    let n_states = t_len + 1;
    let dim = r * n_states;
    let mut omega = DMatrix::zeros(dim, dim);
    let mut a_pow = DMatrix::identity(r, r);
    for lag in 0..n_states {
        let block = &a_pow * &gamma0; // Cov(F_{s+lag}, F_s)
        for s in 0..n_states - lag {
            let t = s + lag;
            for i in 0..r {
                for j in 0..r {
                    omega[(t * r + i, s * r + j)] = block[(i, j)];
                    omega[(s * r + j, t * r + i)] = block[(i, j)];
                }
            }
        }
        a_pow = a * &a_pow;
    }

    // Stacked observation map over observed cells only; state 0 is never
    // observed.
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for t in 0..t_len {
        for i in 0..n {
            if centered.mask()[(t, i)] {
                rows.push((t, i));
            }
        }
    }
    let n_obs = rows.len();
    let mut big_l = DMatrix::zeros(n_obs, dim);
    let mut x_vec = DVector::zeros(n_obs);
    let mut r_diag = DVector::zeros(n_obs);
    for (k, &(t, i)) in rows.iter().enumerate() {
        for j in 0..r {
            big_l[(k, (t + 1) * r + j)] = lambda[(i, j)];
        }
        x_vec[k] = centered.values()[(t, i)];
        r_diag[k] = sigma2[i];
    }

    let ol = &omega * big_l.transpose(); // dim x n_obs
    let mut cov_x = &big_l * &ol;
    for k in 0..n_obs {
        cov_x[(k, k)] += r_diag[k];
    }
    let cov_x = sym(&cov_x);
    let chol = cov_x.cholesky().ok_or(Error::NotPositiveDefinite {
        context: "stacked observation covariance",
    })?;

    let mean = &ol * chol.solve(&x_vec); // dim
    let post = sym(&(&omega - &ol * chol.solve(&ol.transpose()))); // Schur complement

    let loglik = -0.5
        * (n_obs as f64 * (2.0 * std::f64::consts::PI).ln()
            + logdet_from_cholesky(&chol)
            + x_vec.dot(&chol.solve(&x_vec)));

    let mut f_smooth = DMatrix::zeros(t_len, r);
    let mut p_smooth = Vec::with_capacity(t_len);
    let mut c_lag = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len {
        let base = (t + 1) * r;
        for j in 0..r {
            f_smooth[(t, j)] = mean[base + j];
        }
        p_smooth.push(DMatrix::from_fn(r, r, |i, j| post[(base + i, base + j)]));
    }
    for t in 0..t_len - 1 {
        // Cov(F_{t+2}, F_{t+1}) = block (t+2, t+1) of the posterior.
        let bi = (t + 2) * r;
        let bj = (t + 1) * r;
        c_lag.push(DMatrix::from_fn(r, r, |i, j| post[(bi + i, bj + j)]));
    }
    let f0_smooth = DVector::from_fn(r, |j, _| mean[j]);
    let p0_smooth = DMatrix::from_fn(r, r, |i, j| post[(i, j)]);
    let c0_lag = DMatrix::from_fn(r, r, |i, j| post[(r + i, j)]);

    Ok(SmootherOutput {
        f_smooth,
        p_smooth,
        c_lag,
        loglik,
        f0_smooth,
        p0_smooth,
        c0_lag,
    })
}

/// Smoothed factor path as a [`FactorPath`] tagged with the smoother method.
pub fn smoothed_factor_path(smoother: &SmootherOutput) -> FactorPath {
    FactorPath {
        values: smoother.f_smooth.clone(),
        method: FactorMethod::Ks,
    }
}

/// Iterative imputation of missing cells by the principal-component common
/// component: fill, refit, refill until the filled values settle.
pub fn impute_missing_sw(panel: &Panel, r: usize, max_iter: usize, tol: f64) -> Result<Panel> {
    let (t_len, n) = (panel.t_len(), panel.n_series());
    if panel.is_complete() {
        return Ok(panel.clone());
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    for i in 0..n {
        if panel.observed_count(i) == 0 {
            return Err(Error::EmptySeries {
                name: panel.names()[i].clone(),
            });
        }
    }
    for t in 0..t_len {
        if (0..n).all(|i| !panel.mask()[(t, i)]) {
            return Err(Error::InvalidArgument(format!(
                "period {t} has no observed series; imputation needs at least one"
            )));
        }
    }

    // Start from per-series observed means.
    let mut filled = panel.values().clone();
    for i in 0..n {
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for t in 0..t_len {
            if panel.mask()[(t, i)] {
                sum += filled[(t, i)];
                cnt += 1.0;
            }
        }
        let mean = sum / cnt;
        for t in 0..t_len {
            if !panel.mask()[(t, i)] {
                filled[(t, i)] = mean;
            }
        }
    }

    let mut converged = false;
    for _ in 0..max_iter {
        let current = Panel::with_names(filled.clone(), panel.names().to_vec())?;
        let fit = pc_fit(&current, r)?;
        let common = &fit.factors.values * fit.params.lambda.transpose();
        let mut max_change = 0.0f64;
        let mut max_scale = 1.0f64;
        for t in 0..t_len {
            for i in 0..n {
                if !panel.mask()[(t, i)] {
                    let new = fit.params.alpha[i] + common[(t, i)];
                    max_change = max_change.max((new - filled[(t, i)]).abs());
                    max_scale = max_scale.max(new.abs());
                    filled[(t, i)] = new;
                }
            }
        }
        if max_change < tol * max_scale {
            converged = true;
            break;
        }
    }
    if !converged {
        eprintln!("impute_missing_sw: filled values still moving after {max_iter} iterations");
    }
    Panel::with_names(filled, panel.names().to_vec())
}

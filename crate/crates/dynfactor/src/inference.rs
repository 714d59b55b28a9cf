//! Asymptotic covariance estimators and confidence bands for the common
//! component, plus information-criterion selection of the number of
//! factors.
//!
//! Loading uncertainty is a time-series problem (HAC over `t` with a
//! Bartlett kernel); factor uncertainty is a cross-sectional problem
//! (CS-HAC over series pairs within a half-band, Bartlett-tapered so the
//! result stays positive semi-definite). The band half-width combines the
//! two:
//!
//! ```text
//! half_width_it = z · sqrt( (1/T) F̂_t' V̂_i F̂_t + (1/N) λ̂_i' Ŵ_t λ̂_i )
//! ```

use nalgebra::{DMatrix, DVector};

use crate::core::{demean, top_eigen, Panel};
use crate::{Error, Result};

/// Bandwidth choice for the time-series HAC estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bandwidth {
    /// `⌊4 (T/100)^{2/9}⌋`.
    Auto,
    Fixed(usize),
}

/// Cross-sectional weighting for the factor covariance sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorWeights {
    /// Unweighted: bread `(Λ'Λ/N)^{-1}`.
    Ols,
    /// Inverse-variance: bread `(Λ'(Σ^ξ)^{-1}Λ/N)^{-1}`.
    Wls,
}

/// `⌊4 (T/100)^{2/9}⌋` — the standard plug-in truncation lag.
pub fn auto_bandwidth(t_len: usize) -> usize {
    (4.0 * (t_len as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// HAC covariance of one series' loading estimate:
/// `(F̂'F̂/T)^{-1} · LRV{F̂_t ξ̂_it} · (F̂'F̂/T)^{-1}` with a Bartlett-kernel
/// long-run variance of the score sequence.
pub fn hac_loading_cov(
    factors: &DMatrix<f64>,
    residuals_i: &DVector<f64>,
    bandwidth: Bandwidth,
) -> Result<DMatrix<f64>> {
    let (t_len, r) = (factors.nrows(), factors.ncols());
    if residuals_i.len() != t_len {
        return Err(Error::InvalidArgument(format!(
            "residual series has length {}, factors have T = {}",
            residuals_i.len(),
            t_len
        )));
    }
    let bw = match bandwidth {
        Bandwidth::Auto => auto_bandwidth(t_len),
        Bandwidth::Fixed(b) => b,
    };
    if bw >= t_len {
        return Err(Error::InvalidArgument(format!(
            "bandwidth {bw} must be below T = {t_len}"
        )));
    }

    // Scores z_t = F̂_t ξ̂_it.
    let mut scores = DMatrix::zeros(t_len, r);
    for t in 0..t_len {
        for j in 0..r {
            scores[(t, j)] = factors[(t, j)] * residuals_i[t];
        }
    }

    // Long-run variance: Ω_0 + Σ_l w_l (Ω_l + Ω_l').
    let mut lrv = DMatrix::<f64>::zeros(r, r);
    for t in 0..t_len {
        for a in 0..r {
            for b in 0..r {
                lrv[(a, b)] += scores[(t, a)] * scores[(t, b)] / t_len as f64;
            }
        }
    }
    for lag in 1..=bw {
        let w = 1.0 - lag as f64 / (bw as f64 + 1.0);
        let mut omega = DMatrix::<f64>::zeros(r, r);
        for t in lag..t_len {
            for a in 0..r {
                for b in 0..r {
                    omega[(a, b)] += scores[(t, a)] * scores[(t - lag, b)] / t_len as f64;
                }
            }
        }
        lrv += (&omega + omega.transpose()) * w;
    }

    let gram = factors.transpose() * factors / t_len as f64;
    let bread = gram.try_inverse().ok_or(Error::RankDeficient {
        context: "HAC factor Gram",
    })?;
    let v = &bread * lrv * &bread;
    Ok((&v + v.transpose()) * 0.5)
}

/// Cross-sectional HAC covariance for a factor estimate at one period.
///
/// Sandwich with bread `(Λ'WΛ/N)^{-1}` and meat
/// `(1/N) Σ_{|i-j| <= h} (1 - |i-j|/(h+1)) w_i w_j λ_i λ_j' σ̂_{ij}`, where
/// `σ̂_{ij}` is `residuals_t[i]·residuals_t[j]` unless `sigma_pairs`
/// supplies banded idiosyncratic covariances. The Bartlett taper keeps the
/// meat positive semi-definite, which a raw truncated sum does not.
pub fn cs_hac_factor_cov(
    lambda: &DMatrix<f64>,
    residuals_t: &DVector<f64>,
    sigma_pairs: Option<&DMatrix<f64>>,
    half_band: usize,
    weights: FactorWeights,
    sigma2: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (n, r) = (lambda.nrows(), lambda.ncols());
    if residuals_t.len() != n || sigma2.len() != n {
        return Err(Error::InvalidArgument(
            "residual or variance vector does not match the loading rows".into(),
        ));
    }
    if let Some(sp) = sigma_pairs {
        if sp.nrows() != n || sp.ncols() != n {
            return Err(Error::InvalidArgument(
                "sigma_pairs must be N x N".into(),
            ));
        }
    }
    let weight = |i: usize| match weights {
        FactorWeights::Ols => 1.0,
        FactorWeights::Wls => 1.0 / sigma2[i],
    };

    let mut bread_inv = DMatrix::<f64>::zeros(r, r);
    for i in 0..n {
        let w = weight(i);
        for a in 0..r {
            for b in 0..r {
                bread_inv[(a, b)] += w * lambda[(i, a)] * lambda[(i, b)] / n as f64;
            }
        }
    }
    let bread = bread_inv.try_inverse().ok_or(Error::RankDeficient {
        context: "CS-HAC weighted loading Gram",
    })?;

    let mut meat = DMatrix::<f64>::zeros(r, r);
    for i in 0..n {
        let lo = i.saturating_sub(half_band);
        let hi = (i + half_band).min(n - 1);
        for j in lo..=hi {
            let dist = i.abs_diff(j);
            let taper = 1.0 - dist as f64 / (half_band as f64 + 1.0);
            let s_ij = match sigma_pairs {
                Some(sp) => sp[(i, j)],
                None => residuals_t[i] * residuals_t[j],
            };
            let scale = taper * weight(i) * weight(j) * s_ij / n as f64;
            for a in 0..r {
                for b in 0..r {
                    meat[(a, b)] += scale * lambda[(i, a)] * lambda[(j, b)];
                }
            }
        }
    }

    let w = &bread * meat * &bread;
    Ok((&w + w.transpose()) * 0.5)
}

/// Inverse standard-normal CDF (rational approximation, absolute error
/// below 4e-9 — comfortably inside any band-level use).
pub fn standard_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::BadLevel { level: p });
    }
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

    let z = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p > 1.0 - P_LOW {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    Ok(z)
}

/// Pointwise confidence bands for the common component of centered data.
///
/// `residuals` is the `T x N` matrix `x - x̄ - F̂Λ̂'`. When `wls_sigma2` is
/// given, the factor covariance uses inverse-variance weights. Returns
/// `(centers, half_widths)`, both `T x N`.
#[allow(clippy::too_many_arguments)]
pub fn common_component_bands(
    lambda: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    wls_sigma2: Option<&DVector<f64>>,
    half_band: usize,
    bandwidth: Bandwidth,
    level: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (t_len, n) = (residuals.nrows(), residuals.ncols());
    let r = lambda.ncols();
    if lambda.nrows() != n || factors.nrows() != t_len || factors.ncols() != r {
        return Err(Error::InvalidArgument(
            "loadings/factors/residuals shapes are inconsistent".into(),
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::BadLevel { level });
    }
    let z = standard_normal_quantile((1.0 + level) / 2.0)?;

    // Per-series loading covariances.
    let mut v_i = Vec::with_capacity(n);
    for i in 0..n {
        let resid_col = residuals.column(i).clone_owned();
        v_i.push(hac_loading_cov(factors, &resid_col, bandwidth)?);
    }

    // Per-period factor covariances.
    let ones = DVector::from_element(n, 1.0);
    let (weights, sigma2_ref): (FactorWeights, &DVector<f64>) = match wls_sigma2 {
        Some(s) => (FactorWeights::Wls, s),
        None => (FactorWeights::Ols, &ones),
    };
    let mut w_t = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let resid_row = residuals.row(t).transpose();
        w_t.push(cs_hac_factor_cov(
            lambda, &resid_row, None, half_band, weights, sigma2_ref,
        )?);
    }

    let mut centers = DMatrix::zeros(t_len, n);
    let mut half_widths = DMatrix::zeros(t_len, n);
    for t in 0..t_len {
        let f_t = factors.row(t).transpose();
        for i in 0..n {
            let lam_i = lambda.row(i).transpose();
            let mut center = 0.0;
            for j in 0..r {
                center += lam_i[j] * f_t[j];
            }
            let load_term = (f_t.transpose() * &v_i[i] * &f_t)[(0, 0)] / t_len as f64;
            let factor_term = (lam_i.transpose() * &w_t[t] * &lam_i)[(0, 0)] / n as f64;
            centers[(t, i)] = center;
            // PSD up to roundoff; clamp tiny negatives before the root.
            half_widths[(t, i)] = z * (load_term + factor_term).max(0.0).sqrt();
        }
    }
    Ok((centers, half_widths))
}

/// Information-criterion selection of the number of factors:
/// `IC(r) = log V(r) + r ((N+T)/(NT)) log(min(N,T))` with `V(r)` the average
/// squared principal-component residual, minimized over `r = 1…r_max`.
pub fn select_num_factors(panel: &Panel, r_max: usize) -> Result<(usize, Vec<f64>)> {
    let (t_len, n) = (panel.t_len(), panel.n_series());
    if !panel.is_complete() {
        return Err(Error::MissingValues {
            context: "select_num_factors",
        });
    }
    if r_max == 0 || r_max >= t_len.min(n) {
        return Err(Error::TooManyFactors {
            r: r_max,
            min_nt: t_len.min(n),
        });
    }
    let (_, centered) = demean(panel)?;
    let xc = centered.values();

    // Top eigenvalues once; V(r) follows from the trace.
    let (eigvals, trace) = if n > t_len {
        let gram = xc * xc.transpose() / t_len as f64;
        let pair = top_eigen(&gram, r_max)?;
        (pair.eigvals, gram.trace())
    } else {
        let cov = xc.transpose() * xc / t_len as f64;
        let pair = top_eigen(&cov, r_max)?;
        (pair.eigvals, cov.trace())
    };

    let penalty = ((n + t_len) as f64 / (n * t_len) as f64) * (t_len.min(n) as f64).ln();
    let mut values = Vec::with_capacity(r_max);
    let mut partial = 0.0;
    for r in 1..=r_max {
        partial += eigvals[r - 1];
        let v_r = ((trace - partial) / n as f64).max(0.0);
        values.push(v_r.ln() + r as f64 * penalty);
    }
    let mut best = 0usize;
    for r in 1..r_max {
        if values[r] < values[best] {
            best = r;
        }
    }
    Ok((best + 1, values))
}

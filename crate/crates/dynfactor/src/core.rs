//! Panel container, preprocessing, and the identification machinery shared by
//! every estimator.
//!
//! Loadings and factors are only determined up to an invertible linear map:
//! `F Λ' = (F R')(Λ R^{-1})'` for any invertible `R`. The convention adopted
//! throughout fixes that map by requiring
//!
//! ```text
//! Λ'Λ / N   diagonal with strictly descending entries,
//! F'F / T = I_r,
//! λ_{1j} > 0   for every column j  (first-row sign fix).
//! ```
//!
//! [`identify_rotation`] maps any full-rank `(Λ_raw, F_raw)` pair into this
//! convention while leaving the common component `F Λ'` untouched;
//! [`align_columns`] resolves the residual column order/sign ambiguity against
//! a known truth in simulation studies.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Sentinel stored in unobserved cells. Estimators must consult the mask and
/// never read these; NaN makes violations loud.
const MISSING_SENTINEL: f64 = f64::NAN;

/// A `T x N` data panel: rows are time points, columns are series.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    names: Vec<String>,
}

impl Panel {
    /// Fully observed panel. Series are named `s1, s2, ...`.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let names = (1..=values.ncols()).map(|i| format!("s{i}")).collect();
        Self::with_names(values, names)
    }

    /// Fully observed panel with explicit series names.
    pub fn with_names(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::with_mask(values, mask, names)
    }

    /// Panel with an observation mask (`true` = observed). Unobserved cells
    /// are overwritten with a NaN sentinel.
    pub fn with_mask(
        mut values: DMatrix<f64>,
        mask: DMatrix<bool>,
        names: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 1 {
            return Err(Error::InvalidArgument(format!(
                "panel must be at least 2 x 1, got {} x {}",
                values.nrows(),
                values.ncols()
            )));
        }
        if mask.shape() != values.shape() {
            return Err(Error::InvalidArgument(format!(
                "mask shape {:?} does not match values shape {:?}",
                mask.shape(),
                values.shape()
            )));
        }
        if names.len() != values.ncols() {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} series",
                names.len(),
                values.ncols()
            )));
        }
        for i in 0..values.nrows() {
            for j in 0..values.ncols() {
                if !mask[(i, j)] {
                    values[(i, j)] = MISSING_SENTINEL;
                } else if !values[(i, j)].is_finite() {
                    return Err(Error::NonFinite {
                        context: "panel values",
                    });
                }
            }
        }
        Ok(Self {
            values,
            mask,
            names,
        })
    }

    /// Number of time points `T`.
    pub fn t_len(&self) -> usize {
        self.values.nrows()
    }

    /// Number of series `N`.
    pub fn n_series(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// True when every cell is observed.
    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Number of observed cells in series `j`.
    pub fn observed_count(&self, j: usize) -> usize {
        (0..self.t_len()).filter(|&t| self.mask[(t, j)]).count()
    }
}

/// Parameters of the static model: intercepts, loadings, and diagonal
/// idiosyncratic variances.
#[derive(Debug, Clone)]
pub struct StaticParams {
    /// Per-series intercepts `alpha_i` (data units).
    pub alpha: DVector<f64>,
    /// `N x r` loadings.
    pub lambda: DMatrix<f64>,
    /// Per-series idiosyncratic variances, all strictly positive.
    pub sigma2: DVector<f64>,
    /// Number of factors.
    pub r: usize,
}

impl StaticParams {
    pub fn new(alpha: DVector<f64>, lambda: DMatrix<f64>, sigma2: DVector<f64>) -> Result<Self> {
        let n = lambda.nrows();
        let r = lambda.ncols();
        if alpha.len() != n || sigma2.len() != n {
            return Err(Error::InvalidArgument(format!(
                "parameter dimensions disagree: lambda {}x{}, alpha {}, sigma2 {}",
                n,
                r,
                alpha.len(),
                sigma2.len()
            )));
        }
        if sigma2.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "idiosyncratic variances must be positive and finite".into(),
            ));
        }
        Ok(Self {
            alpha,
            lambda,
            sigma2,
            r,
        })
    }

    pub fn n_series(&self) -> usize {
        self.lambda.nrows()
    }
}

/// Static parameters plus the factor VAR(1): `F_t = A F_{t-1} + H u_t`.
#[derive(Debug, Clone)]
pub struct DynamicParams {
    pub base: StaticParams,
    /// `r x r` transition matrix, spectral radius < 1.
    pub a_mat: DMatrix<f64>,
    /// `r x r` lower-triangular shock loading with positive diagonal;
    /// the shock covariance is `H H'`.
    pub h_mat: DMatrix<f64>,
}

impl DynamicParams {
    pub fn new(base: StaticParams, a_mat: DMatrix<f64>, h_mat: DMatrix<f64>) -> Result<Self> {
        let r = base.r;
        if a_mat.shape() != (r, r) || h_mat.shape() != (r, r) {
            return Err(Error::InvalidArgument(format!(
                "state matrices must be {r} x {r}"
            )));
        }
        let rho = spectral_radius(&a_mat);
        if !(rho < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "transition matrix must be stable, spectral radius = {rho:.6}"
            )));
        }
        for i in 0..r {
            for j in (i + 1)..r {
                if h_mat[(i, j)].abs() > 1e-12 * (1.0 + h_mat[(i, i)].abs()) {
                    return Err(Error::InvalidArgument(
                        "shock loading must be lower-triangular".into(),
                    ));
                }
            }
            if !(h_mat[(i, i)] > 0.0) {
                return Err(Error::InvalidArgument(
                    "shock loading needs a positive diagonal".into(),
                ));
            }
        }
        Ok(Self { base, a_mat, h_mat })
    }

    /// Shock covariance `H H'`.
    pub fn shock_cov(&self) -> DMatrix<f64> {
        &self.h_mat * self.h_mat.transpose()
    }
}

/// Which extraction produced a factor path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMethod {
    Ols,
    Pc,
    Wls,
    Lp,
    Kf,
    Ks,
    Gls0,
    Direct,
}

impl std::fmt::Display for FactorMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FactorMethod::Ols => "OLS",
            FactorMethod::Pc => "PC",
            FactorMethod::Wls => "WLS",
            FactorMethod::Lp => "LP",
            FactorMethod::Kf => "KF",
            FactorMethod::Ks => "KS",
            FactorMethod::Gls0 => "GLS0",
            FactorMethod::Direct => "DIRECT",
        };
        f.write_str(s)
    }
}

/// A `T x r` factor path tagged with its extraction method.
#[derive(Debug, Clone)]
pub struct FactorPath {
    pub values: DMatrix<f64>,
    pub method: FactorMethod,
}

/// Leading eigenpairs of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub eigvals: DVector<f64>,
    pub eigvecs: DMatrix<f64>,
}

/// Largest absolute eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Spectral norm (largest singular value) via the Gram matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    let eig = nalgebra::SymmetricEigen::new(gram);
    eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b)).max(0.0).sqrt()
}

/// Per-series observed-cell means and the centered panel. The mask is
/// preserved; centering a centered panel is a no-op.
pub fn demean(panel: &Panel) -> Result<(DVector<f64>, Panel)> {
    let (t_len, n) = (panel.t_len(), panel.n_series());
    let mut alpha = DVector::zeros(n);
    for j in 0..n {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in 0..t_len {
            if panel.mask[(t, j)] {
                sum += panel.values[(t, j)];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptySeries {
                name: panel.names[j].clone(),
            });
        }
        alpha[j] = sum / count as f64;
    }
    let mut centered = panel.values.clone();
    for j in 0..n {
        for t in 0..t_len {
            if panel.mask[(t, j)] {
                centered[(t, j)] -= alpha[j];
            }
        }
    }
    let out = Panel {
        values: centered,
        mask: panel.mask.clone(),
        names: panel.names.clone(),
    };
    Ok((alpha, out))
}

/// Divide each series by its observed-sample standard deviation (after
/// centering for the moment computation only; values keep their level).
/// Returns the scales so fitted loadings/variances can be mapped back.
pub fn standardize(panel: &Panel) -> Result<(DVector<f64>, Panel)> {
    let (t_len, n) = (panel.t_len(), panel.n_series());
    let (alpha, _) = demean(panel)?;
    let mut scale = DVector::zeros(n);
    for j in 0..n {
        let mut ss = 0.0;
        let mut count = 0usize;
        for t in 0..t_len {
            if panel.mask[(t, j)] {
                let d = panel.values[(t, j)] - alpha[j];
                ss += d * d;
                count += 1;
            }
        }
        let var = ss / count as f64;
        if !(var > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "series {:?} has zero variance; cannot standardize",
                panel.names[j]
            )));
        }
        scale[j] = var.sqrt();
    }
    let mut values = panel.values.clone();
    for j in 0..n {
        for t in 0..t_len {
            if panel.mask[(t, j)] {
                values[(t, j)] /= scale[j];
            }
        }
    }
    let out = Panel {
        values,
        mask: panel.mask.clone(),
        names: panel.names.clone(),
    };
    Ok((scale, out))
}

/// Leading `r` eigenpairs of a symmetric matrix.
///
/// The input is checked for symmetry (relative tolerance 1e-10) and
/// symmetrized before decomposition. Exact eigenvalue ties are broken by
/// lexicographic comparison of the eigenvectors so the ordering is
/// deterministic; a tie means the identification downstream is fragile, so a
/// warning is printed.
pub fn top_eigen(sym: &DMatrix<f64>, r: usize) -> Result<EigenPair> {
    let n = sym.nrows();
    if sym.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "matrix must be square, got {} x {}",
            n,
            sym.ncols()
        )));
    }
    if r < 1 || r > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= r <= {n}, got {r}"
        )));
    }
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "top_eigen input",
        });
    }
    let scale = sym.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((sym[(i, j)] - sym[(j, i)]).abs());
        }
    }
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric {
            context: "top_eigen",
            asym: asym / scale,
        });
    }
    let symmetrized = (sym + sym.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(symmetrized);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        match eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
        {
            std::cmp::Ordering::Equal => {
                // Deterministic tie-break on eigenvector entries.
                let (va, vb) = (eig.eigenvectors.column(a), eig.eigenvectors.column(b));
                va.iter()
                    .zip(vb.iter())
                    .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
                    .unwrap_or(std::cmp::Ordering::Equal)
            }
            other => other,
        }
    });
    for w in order.windows(2).take(r.max(1)) {
        if eig.eigenvalues[w[0]] == eig.eigenvalues[w[1]] {
            eprintln!(
                "warning: tied eigenvalue {:.6e}; identification is fragile here",
                eig.eigenvalues[w[0]]
            );
        }
    }

    let mut eigvals = DVector::zeros(r);
    let mut eigvecs = DMatrix::zeros(n, r);
    for (k, &idx) in order.iter().take(r).enumerate() {
        eigvals[k] = eig.eigenvalues[idx];
        eigvecs.set_column(k, &eig.eigenvectors.column(idx));
    }
    Ok(EigenPair { eigvals, eigvecs })
}

/// Rotate `(Λ_raw, F_raw)` into the identification convention, additionally
/// returning the `r x r` map `R` with `F = F_raw R'` and `Λ = Λ_raw R^{-1}`.
///
/// A VAR transition travels with the factors as `A -> R A R^{-1}` and a shock
/// covariance as `Γ -> R Γ R'`.
pub fn identify_rotation_with_map(
    loadings_raw: &DMatrix<f64>,
    factors_raw: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (n, r) = loadings_raw.shape();
    let t_len = factors_raw.nrows();
    if factors_raw.ncols() != r {
        return Err(Error::InvalidArgument(format!(
            "loadings have {} columns but factors have {}",
            r,
            factors_raw.ncols()
        )));
    }
    if t_len < r {
        return Err(Error::InvalidArgument(format!(
            "need T >= r, got T = {t_len}, r = {r}"
        )));
    }

    // The target convention diagonalizes (FΛ')'(FΛ')/T = L (F'F/T) L'. Work in
    // the r-dimensional range of L: with B = F'F/T and B^{1/2} its symmetric
    // square root, the eigenpairs of B^{1/2} L'L B^{1/2} give the leading
    // eigenstructure of the common-component covariance without ever forming
    // an N x N matrix.
    let b = factors_raw.transpose() * factors_raw / t_len as f64;
    let b_half = sym_sqrt(&b, "identify_rotation factor second moment")?;
    let small = &b_half * (loadings_raw.transpose() * loadings_raw) * &b_half;
    let pair = top_eigen(&small, r)?;
    let mu_min = pair.eigvals[r - 1];
    let mu_max = pair.eigvals[0].max(0.0);
    if !(mu_min > 1e-12 * mu_max.max(1e-300)) {
        return Err(Error::RankDeficient {
            context: "identify_rotation: common component has rank < r",
        });
    }

    // Orthonormal eigenvectors of the N x N common-component covariance.
    let mut v = loadings_raw * &b_half * &pair.eigvecs;
    for j in 0..r {
        let s = pair.eigvals[j].sqrt();
        for i in 0..n {
            v[(i, j)] /= s;
        }
    }

    // First-row sign fix (first nonzero entry of the column if row 1 is zero).
    let mut signs = DVector::from_element(r, 1.0);
    for j in 0..r {
        let lead = (0..n)
            .map(|i| v[(i, j)])
            .find(|x| x.abs() > 0.0)
            .unwrap_or(1.0);
        signs[j] = if lead < 0.0 { -1.0 } else { 1.0 };
    }

    let mut lambda = DMatrix::zeros(n, r);
    for j in 0..r {
        let s = signs[j] * pair.eigvals[j].sqrt();
        for i in 0..n {
            lambda[(i, j)] = v[(i, j)] * s;
        }
    }

    // R = diag(mu^{-1/2}) S V' L_raw, so that F = F_raw R' = chi V S mu^{-1/2}.
    let mut r_map = v.transpose() * loadings_raw;
    for j in 0..r {
        let s = signs[j] / pair.eigvals[j].sqrt();
        for k in 0..r {
            r_map[(j, k)] *= s;
        }
    }
    let f = factors_raw * r_map.transpose();
    Ok((lambda, f, r_map))
}

/// [`identify_rotation_with_map`] without the map.
pub fn identify_rotation(
    loadings_raw: &DMatrix<f64>,
    factors_raw: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    identify_rotation_with_map(loadings_raw, factors_raw).map(|(l, f, _)| (l, f))
}

/// Symmetric positive-definite square root via eigendecomposition.
fn sym_sqrt(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let r = m.nrows();
    let eig = nalgebra::SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if eig.eigenvalues.iter().any(|&v| !(v > 1e-12 * scale.max(1e-300))) {
        return Err(Error::NotPositiveDefinite { context });
    }
    let mut out = DMatrix::zeros(r, r);
    for k in 0..r {
        let u = eig.eigenvectors.column(k);
        let s = eig.eigenvalues[k].sqrt();
        for i in 0..r {
            for j in 0..r {
                out[(i, j)] += s * u[i] * u[j];
            }
        }
    }
    Ok(out)
}

/// Permute and sign-flip the columns of `estimate` to best match `truth`.
///
/// Greedy over truth columns in descending norm order: each picks the unused
/// estimate column with the largest absolute cosine similarity, flipped to
/// make the similarity positive. Deterministic for fixed inputs.
pub fn align_columns(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(
        estimate.shape(),
        truth.shape(),
        "align_columns requires equal shapes"
    );
    let r = truth.ncols();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        truth
            .column(b)
            .norm()
            .partial_cmp(&truth.column(a).norm())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut used = vec![false; r];
    let mut out = DMatrix::zeros(estimate.nrows(), r);
    for &j in &order {
        let tcol = truth.column(j);
        let tnorm = tcol.norm();
        let mut best: Option<(usize, f64)> = None; // (column, signed cosine)
        for k in 0..r {
            if used[k] {
                continue;
            }
            let ecol = estimate.column(k);
            let denom = tnorm * ecol.norm();
            let cos = if denom > 0.0 { tcol.dot(&ecol) / denom } else { 0.0 };
            if best.map_or(true, |(_, b)| cos.abs() > b.abs()) {
                best = Some((k, cos));
            }
        }
        let (k, cos) = best.expect("at least one unused column");
        used[k] = true;
        let sign = if cos < 0.0 { -1.0 } else { 1.0 };
        out.set_column(j, &(estimate.column(k) * sign));
    }
    out
}

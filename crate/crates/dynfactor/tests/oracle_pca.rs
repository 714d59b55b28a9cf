//! Numeric cross-checks of the principal-component module against
//! independently computed references: truncated SVD, hand-rolled normal
//! equations, and closed-form constructions.

use dynfactor::core::{demean, Panel};
use dynfactor::pca::{ols_factors, ols_loadings, pc_fit, spherical_qml};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    })
}

/// The fitted common component is the best rank-r approximation of the
/// centered panel, so its residual must match the truncated-SVD residual.
#[test]
fn common_component_is_the_best_rank_r_approximation() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for (t, n, r) in [(30, 8, 2), (12, 25, 3), (40, 40, 1)] {
        let x = randn(&mut rng, t, n);
        let panel = Panel::new(x).unwrap();
        let fit = pc_fit(&panel, r).unwrap();
        let (_, centered) = demean(&panel).unwrap();
        let xc = centered.values().clone();

        let common = &fit.factors.values * fit.params.lambda.transpose();
        let residual = (&xc - common).norm_squared();

        let svd = xc.clone().svd(false, false);
        let mut vals: Vec<f64> = svd.singular_values.iter().copied().collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let best: f64 = vals.iter().skip(r).map(|s| s * s).sum();

        assert!(
            (residual - best).abs() < 1e-8 * (1.0 + best),
            "T={t} N={n} r={r}: residual {residual} vs SVD optimum {best}"
        );
    }
}

/// Eigenvalues reported by the fit equal the squared singular values of the
/// centered panel divided by T, and explained variance is their share of
/// the total.
#[test]
fn eigenvalues_match_singular_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = randn(&mut rng, 25, 10);
    let panel = Panel::new(x).unwrap();
    let r = 3;
    let fit = pc_fit(&panel, r).unwrap();
    let (_, centered) = demean(&panel).unwrap();
    let xc = centered.values().clone();

    let svd = xc.clone().svd(false, false);
    let mut vals: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| s * s / 25.0)
        .collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for j in 0..r {
        assert!(
            (fit.eigvals[j] - vals[j]).abs() < 1e-9 * (1.0 + vals[j]),
            "eigenvalue {j}"
        );
    }
    let total: f64 = vals.iter().sum();
    let top: f64 = vals.iter().take(r).sum();
    assert!((fit.explained_variance - top / total).abs() < 1e-10);
}

/// Least-squares helpers agree with normal equations assembled by hand,
/// series by series.
#[test]
fn regression_helpers_match_hand_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let (t, n, r) = (20, 5, 2);
    let x = randn(&mut rng, t, n);
    let factors = randn(&mut rng, t, r);
    let panel = Panel::new(x).unwrap();
    let (_, centered) = demean(&panel).unwrap();
    let xc = centered.values().clone();

    let lam = ols_loadings(&centered, &factors).unwrap();
    let ftf = factors.transpose() * &factors;
    let ftf_inv = ftf.try_inverse().unwrap();
    for i in 0..n {
        let rhs = factors.transpose() * xc.column(i);
        let expect = &ftf_inv * rhs;
        for j in 0..r {
            assert!((lam[(i, j)] - expect[j]).abs() < 1e-10, "series {i}");
        }
    }

    let lambda = randn(&mut rng, n, r);
    let path = ols_factors(&centered, &lambda).unwrap();
    let ltl_inv = (lambda.transpose() * &lambda).try_inverse().unwrap();
    for s in 0..t {
        let rhs = lambda.transpose() * xc.row(s).transpose();
        let expect = &ltl_inv * rhs;
        for j in 0..r {
            assert!((path.values[(s, j)] - expect[j]).abs() < 1e-10, "row {s}");
        }
    }
}

/// Principal components applied to an exact factor panel reproduce the
/// identified pair itself.
#[test]
fn exact_factor_panel_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let (t, n, r) = (40, 12, 2);
    let lambda = randn(&mut rng, n, r) + DMatrix::from_element(n, r, 1.0);
    let f = randn(&mut rng, t, r);
    let x = &f * lambda.transpose();
    let panel = Panel::new(x).unwrap();

    let fit = pc_fit(&panel, r).unwrap();
    let fit2 = pc_fit(
        &Panel::new(&fit.factors.values * fit.params.lambda.transpose()).unwrap(),
        r,
    )
    .unwrap();
    assert!((&fit2.params.lambda - &fit.params.lambda).amax() < 1e-8);
    assert!((&fit2.factors.values - &fit.factors.values).amax() < 1e-8);
}

/// An exactly isotropic sample covariance has no factor standing above the
/// noise floor: every factor count must be refused. (For generic full-rank
/// data the r-th eigenvalue always exceeds the average of the smaller
/// ones, so this guard only fires on degenerate spectra.)
#[test]
fn spherical_rejects_factors_below_the_noise_level() {
    // All-integer +/- stacking of 2I: column means are exactly zero and the
    // sample covariance is exactly the identity, so every eigenvalue ties
    // the tail mean exactly and no factor stands above the noise.
    let n = 4;
    let t = 2 * n;
    let m = DMatrix::<f64>::identity(n, n) * 2.0;
    let mut x = DMatrix::zeros(t, n);
    x.view_mut((0, 0), (n, n)).copy_from(&m);
    x.view_mut((n, 0), (n, n)).copy_from(&(-&m));
    let panel = Panel::new(x).unwrap();

    for r in 1..n {
        match spherical_qml(&panel, r) {
            Err(dynfactor::Error::FactorBelowNoise { index, value, noise }) => {
                assert!(value <= noise, "r={r}: {value} vs {noise}");
                assert!(index <= r);
            }
            Ok(_) => panic!("r={r}: isotropic panel accepted"),
            Err(other) => panic!("r={r}: unexpected error {other}"),
        }
    }
}

/// Spherical estimator on data built from a known equal-noise model:
/// loadings are recovered within the construction's tolerance.
#[test]
fn spherical_recovers_a_constructed_equal_noise_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (n, r) = (10, 2);
    let t = 2 * n;
    // Target covariance Lambda Lambda' + s2 I with identified Lambda.
    let raw = randn(&mut rng, n, r) * 2.0;
    let s2 = 0.3;
    let gamma = &raw * raw.transpose() + DMatrix::<f64>::identity(n, n) * s2;

    // Stack +/- the matrix square root so the sample covariance of the
    // panel equals gamma exactly and column means vanish.
    let eig = nalgebra::SymmetricEigen::new(gamma.clone());
    let mut root = eig.eigenvectors.clone();
    for j in 0..n {
        let col = eig.eigenvectors.column(j) * eig.eigenvalues[j].sqrt();
        root.set_column(j, &col);
    }
    // gamma = root * root'
    let m = root.transpose() * ((t / 2) as f64).sqrt();
    let mut x = DMatrix::zeros(t, n);
    x.view_mut((0, 0), (n, n)).copy_from(&m);
    x.view_mut((n, 0), (n, n)).copy_from(&(-&m));
    let panel = Panel::new(x).unwrap();

    let (lam_hat, s2_hat) = spherical_qml(&panel, r).unwrap();
    assert!((s2_hat - s2).abs() < 1e-8, "noise estimate {s2_hat}");
    // The implied low-rank part matches the planted one.
    let planted = &raw * raw.transpose();
    let fitted = &lam_hat * lam_hat.transpose();
    assert!((fitted - planted).amax() < 1e-6);
}

/// Masked observations are excluded from the loading regressions: planting
/// garbage in masked cells must not move the estimate.
#[test]
fn masked_cells_cannot_influence_loadings() {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let (t, n, r) = (30, 4, 2);
    let clean = randn(&mut rng, t, n);
    let factors = randn(&mut rng, t, r);

    let mut mask = DMatrix::from_element(t, n, true);
    mask[(3, 1)] = false;
    mask[(17, 1)] = false;
    mask[(8, 2)] = false;

    let names: Vec<String> = (1..=n).map(|i| format!("s{i}")).collect();
    let base = Panel::with_mask(clean.clone(), mask.clone(), names.clone()).unwrap();

    let mut poisoned = clean.clone();
    poisoned[(3, 1)] = 1e6;
    poisoned[(17, 1)] = -4e5;
    poisoned[(8, 2)] = 9e9;
    let with_garbage = Panel::with_mask(poisoned, mask, names).unwrap();

    let a = ols_loadings(&base, &factors).unwrap();
    let b = ols_loadings(&with_garbage, &factors).unwrap();
    assert_eq!(a, b);
}

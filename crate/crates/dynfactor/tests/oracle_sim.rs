//! Distributional checks on the simulator and end-to-end sanity for the
//! Monte Carlo harness, at configurations the unit tests do not touch.

use dynfactor::sim::{
    run_monte_carlo_mode, simulate, DgpConfig, Estimator, ExecMode, McCell,
};
use nalgebra::DMatrix;

/// Column-centered idiosyncratic part `x - chi_true` (the factor-mean
/// constant per series drops out with the mean).
fn centered_noise(truth: &dynfactor::sim::SimTruth) -> DMatrix<f64> {
    let x = truth.panel.values();
    let mut e = x - &truth.chi_true;
    let (t_len, n) = e.shape();
    for i in 0..n {
        let mean: f64 = e.column(i).iter().sum::<f64>() / t_len as f64;
        for t in 0..t_len {
            e[(t, i)] -= mean;
        }
    }
    e
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().sum::<f64>() / n,
        b.iter().sum::<f64>() / n,
    );
    let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
    for k in 0..a.len() {
        let (da, db) = (a[k] - ma, b[k] - mb);
        sa += da * da;
        sb += db * db;
        sab += da * db;
    }
    sab / (sa * sb).sqrt()
}

/// Strong shock correlation (`tau = 0.9`) routinely breaks positive
/// definiteness of the drawn covariance; the repair path must still deliver
/// finite panels with clear adjacent-series correlation.
#[test]
fn heavy_cross_correlation_survives_the_covariance_repair() {
    let mut config = DgpConfig::new(30, 800, 2, 0.9, 0.0).unwrap();
    config.b_reps = 1;
    let truth = simulate(&config, 0).unwrap();
    assert!(truth.panel.values().iter().all(|v| v.is_finite()));

    let e = centered_noise(&truth);
    let n = e.ncols();
    let mut acc = 0.0;
    for i in 0..n - 1 {
        let a: Vec<f64> = e.column(i).iter().cloned().collect();
        let b: Vec<f64> = e.column(i + 1).iter().cloned().collect();
        acc += corr(&a, &b);
    }
    let mean_adjacent = acc / (n - 1) as f64;
    assert!(
        mean_adjacent > 0.4,
        "adjacent noise correlation {mean_adjacent} too weak for tau = 0.9"
    );
}

/// Serially correlated noise: per-series variances match the declared
/// stationary truth, and the average lag-1 autocorrelation sits where a
/// `U(0, 0.5)` coefficient draw puts it.
#[test]
fn serial_noise_matches_its_stationary_moments() {
    let mut config = DgpConfig::new(12, 1500, 2, 0.0, 0.5).unwrap();
    config.b_reps = 1;
    let truth = simulate(&config, 3).unwrap();
    let e = centered_noise(&truth);
    let (t_len, n) = e.shape();

    let mut mean_ratio = 0.0;
    let mut mean_ac = 0.0;
    for i in 0..n {
        let var: f64 = e.column(i).iter().map(|v| v * v).sum::<f64>() / t_len as f64;
        let ratio = var / truth.sig2_true[i];
        assert!(
            (0.7..1.4).contains(&ratio),
            "series {i}: empirical/true variance ratio {ratio}"
        );
        mean_ratio += ratio / n as f64;

        let col: Vec<f64> = e.column(i).iter().cloned().collect();
        mean_ac += corr(&col[..t_len - 1], &col[1..]) / n as f64;
    }
    assert!(
        (0.9..1.1).contains(&mean_ratio),
        "average variance ratio {mean_ratio}"
    );
    assert!(
        (0.05..0.45).contains(&mean_ac),
        "average lag-1 autocorrelation {mean_ac}"
    );
}

fn cell<'a>(cells: &'a [McCell], label: &str, column: usize) -> &'a McCell {
    cells
        .iter()
        .find(|c| c.estimator == label && c.column == column)
        .unwrap_or_else(|| panic!("missing cell {label}/{column}"))
}

/// Single-factor study end to end: every estimator column present, no
/// failures, and errors in a plausible range.
#[test]
fn single_factor_study_runs_clean() {
    let mut config = DgpConfig::new(30, 60, 1, 0.0, 0.0).unwrap();
    config.b_reps = 20;
    let report = run_monte_carlo_mode(
        &config,
        &[
            Estimator::Ols,
            Estimator::Pc,
            Estimator::QmlStatic,
            Estimator::EmDynamic,
        ],
        ExecMode::Sequential,
    )
    .unwrap();

    assert_eq!(report.loadings.len(), 4);
    assert_eq!(report.factors.len(), 5);
    for c in report.loadings.iter().chain(report.factors.iter()) {
        assert_eq!(c.column, 1);
        assert_eq!(c.failures, 0, "{} failed replications", c.estimator);
        assert!(
            c.mse_mean.is_finite() && c.mse_mean > 1e-6 && c.mse_mean < 1.0,
            "{}: mse {}",
            c.estimator,
            c.mse_mean
        );
        assert!(c.mse_sd.is_finite() && c.mse_sd >= 0.0);
    }
}

/// Orderings that must hold up to Monte Carlo error: the infeasible loading
/// regression (true factors) is at least as accurate as every feasible
/// estimator, and the smoother beats plain principal-component factors.
#[test]
fn error_orderings_hold_within_mc_uncertainty() {
    let mut config = DgpConfig::new(30, 100, 2, 0.0, 0.0).unwrap();
    config.b_reps = 30;
    let report = run_monte_carlo_mode(
        &config,
        &[
            Estimator::Ols,
            Estimator::Pc,
            Estimator::QmlStatic,
            Estimator::EmDynamic,
        ],
        ExecMode::Sequential,
    )
    .unwrap();
    let k = config.b_reps as f64;

    for col in 1..=2 {
        let ols = cell(&report.loadings, "ols", col);
        for label in ["pc", "qml", "em"] {
            let other = cell(&report.loadings, label, col);
            let slack = 2.0 * (ols.mse_sd + other.mse_sd) / k.sqrt();
            assert!(
                ols.mse_mean <= other.mse_mean + slack,
                "col {col}: infeasible ols {} > {label} {} + slack {slack}",
                ols.mse_mean,
                other.mse_mean
            );
        }

        let ks = cell(&report.factors, "ks", col);
        let pc = cell(&report.factors, "pc", col);
        let slack = 2.0 * (ks.mse_sd + pc.mse_sd) / k.sqrt();
        assert!(
            ks.mse_mean <= pc.mse_mean + slack,
            "col {col}: smoother {} vs pc {} + slack {slack}",
            ks.mse_mean,
            pc.mse_mean
        );
    }
}

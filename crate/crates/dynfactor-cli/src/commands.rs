//! One function per subcommand. Each resolves its parameters from flags,
//! then the config file, then defaults; flags always win.

use std::collections::HashSet;
use std::path::PathBuf;

use clap::ValueEnum;
use nalgebra::DMatrix;

use dynfactor::core::demean;
use dynfactor::em_dynamic::em_fit;
use dynfactor::inference::{common_component_bands, select_num_factors, Bandwidth};
use dynfactor::pca::pc_fit;
use dynfactor::sim::{run_monte_carlo, simulate, DgpConfig, Estimator};
use dynfactor::ssm::{impute_missing_sw, smoothed_factor_path};
use dynfactor::static_qml::{static_em_fit, wls_factors};
use dynfactor::Panel;

use crate::config::FileConfig;
use crate::errors::{from_lib, CliError, Result};
use crate::plot;
use crate::table::{
    default_time, factor_labels, full, ingest_csv, sig6, write_matrix_csv, write_panel_csv,
    write_sidecar, IngestedPanel,
};
use crate::{BandsArgs, FitArgs, ImputeArgs, McArgs, NfArgs, SimArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Principal components.
    Pc,
    /// Static quasi-likelihood EM with weighted factor extraction.
    Qml,
    /// Dynamic EM with Kalman-smoothed factors.
    Em,
}

/// Print to stdout, swallowing a closed pipe (`dynfactor ... | head`)
/// instead of panicking mid-report.
fn say(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn method_from_str(s: &str) -> Result<Method> {
    match s.to_ascii_lowercase().as_str() {
        "pc" => Ok(Method::Pc),
        "qml" => Ok(Method::Qml),
        "em" => Ok(Method::Em),
        other => Err(CliError::Usage(format!(
            "unknown method {other:?} (valid: pc, qml, em)"
        ))),
    }
}

fn resolve_input(flag: Option<PathBuf>, cfg: &FileConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.input.clone())
        .ok_or_else(|| CliError::Usage("input path required (--input or config `input`)".into()))
}

fn resolve_output(flag: Option<PathBuf>, cfg: &FileConfig) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn resolve_r(flag: Option<usize>, cfg: &FileConfig) -> Result<usize> {
    flag.or(cfg.r)
        .ok_or_else(|| CliError::Usage("number of factors required (-r or config `r`)".into()))
}

fn require(name: &str, flag: Option<usize>, cfg_val: Option<usize>) -> Result<usize> {
    flag.or(cfg_val).ok_or_else(|| {
        CliError::Usage(format!("--{name} required (flag or config `{name}`)"))
    })
}

/// Share of observed variance captured by the fitted common component,
/// total and per factor column.
fn explained_variance(
    panel: &Panel,
    lambda: &DMatrix<f64>,
    factors: &DMatrix<f64>,
) -> (f64, Vec<f64>) {
    let (t_len, n) = (panel.t_len(), panel.n_series());
    let r = lambda.ncols();
    let x = panel.values();
    let mask = panel.mask();
    let mut means = vec![0.0; n];
    for j in 0..n {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in 0..t_len {
            if mask[(t, j)] {
                sum += x[(t, j)];
                count += 1;
            }
        }
        means[j] = sum / count.max(1) as f64;
    }
    let mut sst = 0.0;
    let mut ssr = 0.0;
    let mut ss_col = vec![0.0; r];
    for t in 0..t_len {
        for j in 0..n {
            if !mask[(t, j)] {
                continue;
            }
            let c = x[(t, j)] - means[j];
            let mut chi = 0.0;
            for k in 0..r {
                let part = factors[(t, k)] * lambda[(j, k)];
                chi += part;
                ss_col[k] += part * part;
            }
            sst += c * c;
            ssr += (c - chi) * (c - chi);
        }
    }
    if sst <= 0.0 {
        return (f64::NAN, vec![f64::NAN; r]);
    }
    (1.0 - ssr / sst, ss_col.iter().map(|s| s / sst).collect())
}

pub fn cmd_fit(args: FitArgs, cfg: &FileConfig) -> Result<()> {
    let input = resolve_input(args.input, cfg)?;
    let dir = resolve_output(args.output, cfg)?;
    let r = resolve_r(args.r, cfg)?;
    let method = match args.method {
        Some(m) => m,
        None => match &cfg.method {
            Some(s) => method_from_str(s)?,
            None => Method::Qml,
        },
    };
    let tol = args.tol.or(cfg.tol).unwrap_or(1e-6);
    let max_iter = args.max_iter.or(cfg.max_iter).unwrap_or(match method {
        Method::Em => 200,
        _ => 500,
    });
    let sidecar = args.sidecar || cfg.sidecar.unwrap_or(false);

    let IngestedPanel { panel, time, .. } = ingest_csv(&input)?;
    if !panel.is_complete() && method != Method::Em {
        return Err(CliError::Usage(
            "panel has missing values; use --method em, or run impute first".into(),
        ));
    }

    struct Fitted {
        lambda: DMatrix<f64>,
        sigma2: Vec<f64>,
        factors: DMatrix<f64>,
        dynamics: Option<(DMatrix<f64>, DMatrix<f64>)>,
        loglik: f64,
        iterations: usize,
        converged: bool,
    }

    let fitted = match method {
        Method::Pc => {
            let fit = pc_fit(&panel, r).map_err(from_lib)?;
            // Evaluate the quasi-likelihood at the solution without iterating.
            let ll = static_em_fit(&panel, r, Some(fit.params.clone()), 0, tol)
                .map_err(from_lib)?
                .loglik_trace[0];
            Fitted {
                lambda: fit.params.lambda,
                sigma2: fit.params.sigma2.iter().cloned().collect(),
                factors: fit.factors.values,
                dynamics: None,
                loglik: ll,
                iterations: 0,
                converged: true,
            }
        }
        Method::Qml => {
            let fit = static_em_fit(&panel, r, None, max_iter, tol).map_err(from_lib)?;
            let (_, centered) = demean(&panel).map_err(from_lib)?;
            let f = wls_factors(&centered, &fit.params).map_err(from_lib)?;
            Fitted {
                lambda: fit.params.lambda,
                sigma2: fit.params.sigma2.iter().cloned().collect(),
                factors: f.values,
                dynamics: None,
                loglik: *fit.loglik_trace.last().unwrap(),
                iterations: fit.iterations,
                converged: fit.converged,
            }
        }
        Method::Em => {
            let fit = em_fit(&panel, r, max_iter, tol).map_err(from_lib)?;
            let f = smoothed_factor_path(&fit.smoother);
            Fitted {
                lambda: fit.params.base.lambda.clone(),
                sigma2: fit.params.base.sigma2.iter().cloned().collect(),
                factors: f.values,
                dynamics: Some((fit.params.a_mat, fit.params.h_mat)),
                loglik: *fit.loglik_trace.last().unwrap(),
                iterations: fit.iterations,
                converged: fit.converged,
            }
        }
    };

    let fl = factor_labels(r);
    let series: Vec<String> = panel.names().to_vec();

    let loadings_path = dir.join("loadings.csv");
    write_matrix_csv(&loadings_path, "series", &series, &fl, &fitted.lambda, sig6)?;
    if sidecar {
        write_sidecar(&dir.join("loadings.dfb"), &fitted.lambda)?;
    }

    write_matrix_csv(
        &dir.join("factors.csv"),
        "t",
        &time,
        &fl,
        &fitted.factors,
        full,
    )?;

    let sigma2 = DMatrix::from_fn(series.len(), 1, |i, _| fitted.sigma2[i]);
    write_matrix_csv(
        &dir.join("sigma2.csv"),
        "series",
        &series,
        &["sigma2".to_string()],
        &sigma2,
        sig6,
    )?;
    if sidecar {
        write_sidecar(&dir.join("sigma2.dfb"), &sigma2)?;
    }

    if let Some((a, h)) = &fitted.dynamics {
        write_matrix_csv(&dir.join("A.csv"), "row", &fl, &fl, a, sig6)?;
        write_matrix_csv(&dir.join("H.csv"), "row", &fl, &fl, h, sig6)?;
        if sidecar {
            write_sidecar(&dir.join("A.dfb"), a)?;
            write_sidecar(&dir.join("H.dfb"), h)?;
        }
    }

    let (ev, ev_cols) = explained_variance(&panel, &fitted.lambda, &fitted.factors);
    let mut summary = String::new();
    summary.push_str(&format!(
        "command: fit\nmethod: {}\nseries: {}\nperiods: {}\nfactors: {}\niterations: {}\n\
         converged: {}\nlog_likelihood: {:.6}\nexplained_variance: {}\n",
        match method {
            Method::Pc => "pc",
            Method::Qml => "qml",
            Method::Em => "em",
        },
        panel.n_series(),
        panel.t_len(),
        r,
        fitted.iterations,
        if fitted.converged { "yes" } else { "no" },
        fitted.loglik,
        sig6(ev),
    ));
    for (k, share) in ev_cols.iter().enumerate() {
        summary.push_str(&format!("explained_variance_f{}: {}\n", k + 1, sig6(*share)));
    }
    let summary_path = dir.join("summary.txt");
    std::fs::write(&summary_path, &summary)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", summary_path.display())))?;
    say(&summary);
    Ok(())
}

pub fn cmd_simulate(args: SimArgs, cfg: &FileConfig) -> Result<()> {
    let dir = resolve_output(args.output, cfg)?;
    let n = require("n", args.n, cfg.n)?;
    let t = require("t", args.t, cfg.t)?;
    let r = resolve_r(args.r, cfg)?;
    let tau = args.tau.or(cfg.tau).unwrap_or(0.0);
    let delta = args.delta.or(cfg.delta).unwrap_or(0.0);
    let rep = args.rep.or(cfg.rep).unwrap_or(0);

    let mut config = DgpConfig::new(n, t, r, tau, delta).map_err(from_lib)?;
    if let Some(seed) = args.seed.or(cfg.seed) {
        config.seed = seed;
    }
    config.b_reps = config.b_reps.max(rep + 1);
    let truth = simulate(&config, rep).map_err(from_lib)?;

    let time = default_time(t);
    let fl = factor_labels(r);
    write_panel_csv(&dir.join("panel.csv"), "t", &time, &truth.panel)?;
    write_matrix_csv(&dir.join("factors_true.csv"), "t", &time, &fl, &truth.f_true, full)?;
    write_matrix_csv(
        &dir.join("loadings_true.csv"),
        "series",
        truth.panel.names(),
        &fl,
        &truth.lambda_true,
        full,
    )?;
    let chi = Panel::with_names(truth.chi_true.clone(), truth.panel.names().to_vec())
        .map_err(from_lib)?;
    write_panel_csv(&dir.join("chi_true.csv"), "t", &time, &chi)?;
    say(&format!(
        "wrote panel.csv, factors_true.csv, loadings_true.csv, chi_true.csv to {} \
         (n = {n}, t = {t}, r = {r}, tau = {tau}, delta = {delta}, seed = {}, rep = {rep})\n",
        dir.display(),
        config.seed,
    ));
    Ok(())
}

fn parse_estimators(s: &str) -> Result<Vec<Estimator>> {
    let mut out: Vec<Estimator> = Vec::new();
    for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let est = match token.to_ascii_lowercase().as_str() {
            "ols" => Estimator::Ols,
            "pc" => Estimator::Pc,
            "qml" => Estimator::QmlStatic,
            "em" => Estimator::EmDynamic,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown estimator {other:?} (valid: ols, pc, qml, em)"
                )))
            }
        };
        if !out.contains(&est) {
            out.push(est);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("estimator list is empty".into()));
    }
    Ok(out)
}

pub fn cmd_montecarlo(args: McArgs, cfg: &FileConfig) -> Result<()> {
    let dir = resolve_output(args.output, cfg)?;
    let n = require("n", args.n, cfg.n)?;
    let t = require("t", args.t, cfg.t)?;
    let r = resolve_r(args.r, cfg)?;
    let tau = args.tau.or(cfg.tau).unwrap_or(0.0);
    let delta = args.delta.or(cfg.delta).unwrap_or(0.0);
    let estimators = match args.estimators.or_else(|| cfg.estimators.clone()) {
        Some(s) => parse_estimators(&s)?,
        None => vec![
            Estimator::Ols,
            Estimator::Pc,
            Estimator::QmlStatic,
            Estimator::EmDynamic,
        ],
    };

    let mut config = DgpConfig::new(n, t, r, tau, delta).map_err(from_lib)?;
    if let Some(reps) = args.reps.or(cfg.reps) {
        config.b_reps = reps;
    }
    if let Some(seed) = args.seed.or(cfg.seed) {
        config.seed = seed;
    }
    let report = run_monte_carlo(&config, &estimators).map_err(from_lib)?;

    for (name, text) in [
        ("loadings_mse.csv", report.loadings_csv()),
        ("factors_mse.csv", report.factors_csv()),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text)
            .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))?;
    }
    println!("seed = {}", config.seed);
    println!("replications = {}", config.b_reps);
    println!("wrote loadings_mse.csv, factors_mse.csv to {}", dir.display());
    eprintln!("elapsed: {:.2}s", report.wall_secs);
    Ok(())
}

pub fn cmd_nfactors(args: NfArgs, cfg: &FileConfig) -> Result<()> {
    let input = resolve_input(args.input, cfg)?;
    let dir = resolve_output(args.output, cfg)?;
    let r_max = args.r_max.or(cfg.r_max).unwrap_or(8);
    let IngestedPanel { panel, .. } = ingest_csv(&input)?;
    let (r_hat, criteria) = select_num_factors(&panel, r_max).map_err(from_lib)?;

    let labels: Vec<String> = (1..=criteria.len()).map(|v| v.to_string()).collect();
    let values = DMatrix::from_fn(criteria.len(), 1, |i, _| criteria[i]);
    write_matrix_csv(
        &dir.join("criteria.csv"),
        "r",
        &labels,
        &["criterion".to_string()],
        &values,
        sig6,
    )?;
    println!("selected_r = {r_hat}");
    for (i, c) in criteria.iter().enumerate() {
        println!("r = {}: criterion = {}", i + 1, sig6(*c));
    }
    Ok(())
}

fn sanitize(name: &str, used: &mut HashSet<String>) -> String {
    let base: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    let mut candidate = base.clone();
    let mut k = 1;
    while !used.insert(candidate.clone()) {
        k += 1;
        candidate = format!("{base}_{k}");
    }
    candidate
}

pub fn cmd_bands(args: BandsArgs, cfg: &FileConfig) -> Result<()> {
    let input = resolve_input(args.input, cfg)?;
    let dir = resolve_output(args.output, cfg)?;
    let r = resolve_r(args.r, cfg)?;
    let level = args.level.or(cfg.level).unwrap_or(0.95);
    let half_band = args.half_band.or(cfg.half_band).unwrap_or(0);
    let bw_raw = args
        .bandwidth
        .or_else(|| cfg.bandwidth.clone())
        .unwrap_or_else(|| "auto".to_string());
    let bandwidth = if bw_raw.eq_ignore_ascii_case("auto") {
        Bandwidth::Auto
    } else {
        Bandwidth::Fixed(bw_raw.parse().map_err(|_| {
            CliError::Usage(format!(
                "bandwidth must be \"auto\" or a non-negative integer, got {bw_raw:?}"
            ))
        })?)
    };
    let tol = args.tol.or(cfg.tol).unwrap_or(1e-6);
    let max_iter = args.max_iter.or(cfg.max_iter).unwrap_or(500);
    let plot_on = args.plot || cfg.plot.unwrap_or(false);

    let IngestedPanel { panel, time, .. } = ingest_csv(&input)?;
    if !panel.is_complete() {
        return Err(CliError::Usage(
            "bands require a fully observed panel; run impute first".into(),
        ));
    }

    let selected: Vec<String> = match args.series {
        Some(list) if !list.is_empty() => list,
        _ => match &cfg.series {
            Some(s) => s.split(',').map(|v| v.trim().to_string()).collect(),
            None => panel.names().to_vec(),
        },
    };
    let mut indices = Vec::new();
    for name in &selected {
        match panel.names().iter().position(|n| n == name) {
            Some(j) => indices.push(j),
            None => {
                return Err(CliError::Usage(format!(
                    "unknown series {name:?}; available: {}",
                    panel.names().join(", ")
                )))
            }
        }
    }

    let fit = static_em_fit(&panel, r, None, max_iter, tol).map_err(from_lib)?;
    let (_, centered) = demean(&panel).map_err(from_lib)?;
    let f = wls_factors(&centered, &fit.params).map_err(from_lib)?;
    let resid = centered.values() - &f.values * fit.params.lambda.transpose();
    let (centers, half_widths) = common_component_bands(
        &fit.params.lambda,
        &f.values,
        &resid,
        Some(&fit.params.sigma2),
        half_band,
        bandwidth,
        level,
    )
    .map_err(from_lib)?;

    let t_len = panel.t_len();
    let mut used = HashSet::new();
    let mut written = Vec::new();
    for (&j, name) in indices.iter().zip(&selected) {
        let stem = sanitize(name, &mut used);
        let mut table = DMatrix::zeros(t_len, 3);
        for t in 0..t_len {
            let c = centers[(t, j)];
            let h = half_widths[(t, j)];
            table[(t, 0)] = c;
            table[(t, 1)] = c - h;
            table[(t, 2)] = c + h;
        }
        let csv_path = dir.join(format!("bands_{stem}.csv"));
        write_matrix_csv(
            &csv_path,
            "t",
            &time,
            &["center".into(), "lower".into(), "upper".into()],
            &table,
            full,
        )?;
        written.push(format!("bands_{stem}.csv"));
        if plot_on {
            let center: Vec<f64> = (0..t_len).map(|t| table[(t, 0)]).collect();
            let lower: Vec<f64> = (0..t_len).map(|t| table[(t, 1)]).collect();
            let upper: Vec<f64> = (0..t_len).map(|t| table[(t, 2)]).collect();
            let svg = plot::band_svg(name, &time, &center, &lower, &upper);
            let svg_path = dir.join(format!("bands_{stem}.svg"));
            std::fs::write(&svg_path, svg)
                .map_err(|e| CliError::Run(format!("cannot write {}: {e}", svg_path.display())))?;
            written.push(format!("bands_{stem}.svg"));
        }
    }
    println!("wrote {} to {}", written.join(", "), dir.display());
    Ok(())
}

pub fn cmd_impute(args: ImputeArgs, cfg: &FileConfig) -> Result<()> {
    let input = resolve_input(args.input, cfg)?;
    let dir = resolve_output(args.output, cfg)?;
    let r = resolve_r(args.r, cfg)?;
    let max_iter = args.max_iter.or(cfg.max_iter).unwrap_or(200);
    let tol = args.tol.or(cfg.tol).unwrap_or(1e-8);

    let IngestedPanel {
        panel,
        time_name,
        time,
    } = ingest_csv(&input)?;
    let missing = panel.mask().iter().filter(|&&m| !m).count();
    let filled = impute_missing_sw(&panel, r, max_iter, tol).map_err(from_lib)?;
    write_panel_csv(&dir.join("filled.csv"), &time_name, &time, &filled)?;
    println!(
        "filled {missing} of {} cells; wrote filled.csv to {}",
        panel.t_len() * panel.n_series(),
        dir.display()
    );
    Ok(())
}

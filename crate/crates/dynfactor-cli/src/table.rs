//! CSV ingestion and emission, numeric formatting, and the binary sidecar.
//!
//! Precision policy: time-indexed artifacts (panels, factor paths, bands) are
//! written with shortest round-trip formatting so that re-ingesting them
//! reproduces the values bit for bit; report tables (loadings, variances,
//! summaries) are rounded to 6 significant digits, with full precision
//! available through the optional binary sidecar.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use dynfactor::Panel;
use nalgebra::DMatrix;

use crate::errors::{CliError, Result};

/// A panel plus the labeling that the input file carried.
pub struct IngestedPanel {
    pub panel: Panel,
    pub time_name: String,
    pub time: Vec<String>,
}

/// Read a rectangular CSV: header row of series names, first column a time
/// index, empty (or NaN) cells missing. Errors carry 1-based line numbers.
pub fn ingest_csv(path: &Path) -> Result<IngestedPanel> {
    let file = File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(CliError::Usage(format!("{}: {e}", path.display()))),
        None => return Err(CliError::Usage(format!("{}: empty file", path.display()))),
    };
    if header.len() < 2 {
        return Err(CliError::Usage(format!(
            "{}: line 1: need a time column plus at least one series",
            path.display()
        )));
    }
    let time_name = header[0].trim().to_string();
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        if names[..i].contains(name) {
            return Err(CliError::Usage(format!(
                "{}: line 1: duplicate series name {name:?}",
                path.display()
            )));
        }
    }

    let n = names.len();
    let mut time = Vec::new();
    let mut cells: Vec<(f64, bool)> = Vec::new();
    for record in records {
        let record = record.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let line = record
            .position()
            .map_or_else(|| "?".to_string(), |p| p.line().to_string());
        if record.len() != n + 1 {
            return Err(CliError::Usage(format!(
                "{}: line {line}: expected {} fields, found {}",
                path.display(),
                n + 1,
                record.len()
            )));
        }
        time.push(record[0].trim().to_string());
        for (j, raw) in record.iter().skip(1).enumerate() {
            let raw = raw.trim();
            if raw.is_empty() {
                cells.push((f64::NAN, false));
                continue;
            }
            let value: f64 = raw.parse().map_err(|_| {
                CliError::Usage(format!(
                    "{}: line {line}: series {:?}: not a number: {raw:?}",
                    path.display(),
                    names[j]
                ))
            })?;
            if value.is_nan() {
                cells.push((f64::NAN, false));
            } else {
                cells.push((value, true));
            }
        }
    }

    let t_len = time.len();
    let values = DMatrix::from_fn(t_len, n, |t, j| cells[t * n + j].0);
    let mask = DMatrix::from_fn(t_len, n, |t, j| cells[t * n + j].1);
    let panel = Panel::with_mask(values, mask, names).map_err(crate::errors::from_lib)?;
    Ok(IngestedPanel {
        panel,
        time_name,
        time,
    })
}

/// Shortest string that parses back to exactly `x`.
pub fn full(x: f64) -> String {
    format!("{x}")
}

/// 6 significant digits, plain notation in a moderate range, otherwise
/// scientific; trailing zeros trimmed.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let a = x.abs();
    if (1e-4..1e6).contains(&a) {
        let magnitude = a.log10().floor() as i32;
        let prec = (5 - magnitude).max(0) as usize;
        let s = format!("{x:.prec$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.5e}");
        match s.split_once('e') {
            Some((mantissa, exp)) => {
                let m = mantissa.trim_end_matches('0').trim_end_matches('.');
                format!("{m}e{exp}")
            }
            None => s,
        }
    }
}

fn open_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_record<I, S>(w: &mut csv::Writer<File>, path: &Path, fields: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

/// Emit a panel with its time labels; missing cells become empty fields.
pub fn write_panel_csv(
    path: &Path,
    time_name: &str,
    time: &[String],
    panel: &Panel,
) -> Result<()> {
    let mut w = open_writer(path)?;
    let mut header = vec![time_name.to_string()];
    header.extend(panel.names().iter().cloned());
    write_record(&mut w, path, &header)?;
    for t in 0..panel.t_len() {
        let mut row = vec![time[t].clone()];
        for j in 0..panel.n_series() {
            row.push(if panel.mask()[(t, j)] {
                full(panel.values()[(t, j)])
            } else {
                String::new()
            });
        }
        write_record(&mut w, path, &row)?;
    }
    w.flush()
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

/// Emit a labeled matrix: one index column plus one column per matrix column.
pub fn write_matrix_csv(
    path: &Path,
    index_name: &str,
    index: &[String],
    columns: &[String],
    values: &DMatrix<f64>,
    fmt: fn(f64) -> String,
) -> Result<()> {
    let mut w = open_writer(path)?;
    let mut header = vec![index_name.to_string()];
    header.extend(columns.iter().cloned());
    write_record(&mut w, path, &header)?;
    for i in 0..values.nrows() {
        let mut row = vec![index[i].clone()];
        for j in 0..values.ncols() {
            row.push(fmt(values[(i, j)]));
        }
        write_record(&mut w, path, &row)?;
    }
    w.flush()
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

/// Column labels `f1..fr`.
pub fn factor_labels(r: usize) -> Vec<String> {
    (1..=r).map(|j| format!("f{j}")).collect()
}

/// Generated time labels `1..=t` for synthetic panels.
pub fn default_time(t: usize) -> Vec<String> {
    (1..=t).map(|v| v.to_string()).collect()
}

/// Full-precision binary companion for a rounded CSV: magic `DFB1`, row and
/// column counts as little-endian u64, then row-major little-endian f64.
pub fn write_sidecar(path: &Path, values: &DMatrix<f64>) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 8 * values.len());
    out.extend_from_slice(b"DFB1");
    out.extend_from_slice(&(values.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(values.ncols() as u64).to_le_bytes());
    for i in 0..values.nrows() {
        for j in 0..values.ncols() {
            out.extend_from_slice(&values[(i, j)].to_le_bytes());
        }
    }
    let mut file = File::create(path)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))?;
    file.write_all(&out)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

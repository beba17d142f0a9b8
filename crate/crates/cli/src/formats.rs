//! On-disk formats: waveform text files, record CSVs with JSON sidecars,
//! result and sweep CSVs, and density-matrix dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use weaktomo_core::nalgebra::DMatrix;
use weaktomo_core::waveform::ControlWaveform;
use weaktomo_core::C64;

use crate::config::Snr;
use crate::error::{CliError, Result};

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Shortest decimal that round-trips, never in exponent form.
fn decimal(x: f64) -> String {
    let s = format!("{x:.17}");
    let trimmed = s.trim_end_matches('0');
    if trimmed.ends_with('.') {
        format!("{trimmed}0")
    } else {
        trimmed.to_string()
    }
}

/// `n T` on the first line, then one knot angle per line.
pub fn format_waveform(w: &ControlWaveform) -> String {
    let mut out = format!("{} {}\n", w.n_knots(), w.duration());
    for a in w.knot_angles() {
        out.push_str(&decimal(*a));
        out.push('\n');
    }
    out
}

pub fn parse_waveform(text: &str) -> Result<ControlWaveform> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config("empty waveform file".into()))?;
    let mut parts = header.split_whitespace();
    let bad = || CliError::Config(format!("waveform header must be `n T`, got {header:?}"));
    let n: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let duration: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    let angles = lines
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad knot angle {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if angles.len() != n {
        return Err(CliError::Config(format!(
            "waveform header promises {n} knots, file has {}",
            angles.len()
        )));
    }
    Ok(ControlWaveform::new(angles, duration)?)
}

pub fn write_waveform(path: &Path, w: &ControlWaveform) -> Result<()> {
    write_file(path, &format_waveform(w))
}

pub fn read_waveform(path: &Path) -> Result<ControlWaveform> {
    parse_waveform(&read_file(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    time_s: f64,
    value: f64,
}

/// Metadata stored next to a record CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSidecar {
    pub seed: u64,
    pub snr: Snr,
    pub filter_window: usize,
    pub sigma: f64,
    pub params_digest: String,
}

pub fn sidecar_path(record: &Path) -> PathBuf {
    record.with_extension("json")
}

/// Writes `time_s,value` rows and the JSON sidecar.
pub fn write_record(
    path: &Path,
    times: &[f64],
    values: &[f64],
    meta: &RecordSidecar,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (t, v) in times.iter().zip(values) {
        w.serialize(RecordRow {
            time_s: *t,
            value: *v,
        })
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_file(
        path,
        &String::from_utf8(bytes).expect("csv output is UTF-8"),
    )?;
    let side = serde_json::to_string_pretty(meta).expect("sidecar serializes");
    write_file(&sidecar_path(path), &(side + "\n"))
}

pub fn read_record(path: &Path) -> Result<(Vec<f64>, Vec<f64>, RecordSidecar)> {
    let text = read_file(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["time_s", "value"] {
        return Err(CliError::Config(format!(
            "{}: expected header time_s,value",
            path.display()
        )));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for row in r.deserialize::<RecordRow>() {
        let row = row.map_err(csv_err)?;
        times.push(row.time_s);
        values.push(row.value);
    }
    let side_path = sidecar_path(path);
    let meta = serde_json::from_str(&read_file(&side_path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", side_path.display())))?;
    Ok((times, values, meta))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Config(format!("csv: {e}"))
}

/// Writes serializable rows with their header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_file(
        path,
        &String::from_utf8(bytes).expect("csv output is UTF-8"),
    )
}

/// Reads rows, insisting on the exact header.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let text = read_file(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let got = r.headers().map_err(csv_err)?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(CliError::Config(format!(
            "{}: expected header {}",
            path.display(),
            header.join(",")
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn sig12(x: f64) -> String {
    format!("{x:.11e}")
}

/// Row-major text dump, one matrix row per line as `re,im` pairs with 12
/// significant digits.
pub fn format_matrix(m: &DMatrix<C64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{},{}", sig12(m[(i, j)].re), sig12(m[(i, j)].im)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<C64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("bad matrix entry {x:?}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != 2 * d) {
        return Err(CliError::Config(
            "matrix file must hold d rows of d `re,im` pairs".into(),
        ));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| {
        C64::new(rows[i][2 * j], rows[i][2 * j + 1])
    }))
}

pub fn write_matrix(path: &Path, m: &DMatrix<C64>) -> Result<()> {
    write_file(path, &format_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<C64>> {
    parse_matrix(&read_file(path)?)
}

pub const DESIGN_LOG_HEADER: [&str; 3] = ["sweep", "entropy", "rank"];
pub const SWEEP_HEADER: [&str; 6] = [
    "snr",
    "n_runs",
    "mean_fidelity",
    "stderr_fidelity",
    "mean_entropy",
    "rank",
];
pub const SENSITIVITY_HEADER: [&str; 4] = [
    "control_error_pct",
    "snr",
    "mean_fidelity",
    "stderr_fidelity",
];
pub const RESULT_HEADER: [&str; 5] = ["run_id", "snr", "rank", "entropy", "fidelity"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignLogRow {
    pub sweep: usize,
    pub entropy: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr: Snr,
    pub n_runs: usize,
    pub mean_fidelity: f64,
    pub stderr_fidelity: f64,
    pub mean_entropy: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub control_error_pct: f64,
    pub snr: Snr,
    pub mean_fidelity: f64,
    pub stderr_fidelity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: usize,
    pub snr: Snr,
    pub rank: usize,
    pub entropy: f64,
    pub fidelity: f64,
}

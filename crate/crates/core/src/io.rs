//! CSV persistence for features, counts, parameters, traces and diagnostics.
//!
//! Floats are written in Rust's shortest round-trip form, so every file reads back to
//! bit-identical values. Line endings are LF.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use csv::{ReaderBuilder, StringRecord, Terminator, WriterBuilder};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{FeatureMatrix, MixtureParams, SampleCounts};
use crate::subspace::SubspaceEstimate;

/// Version tag written in parameter files.
pub const PARAMS_FORMAT: u32 = 1;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        kind => Error::Format {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Writes rows of already formatted fields.
fn write_rows(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = WriterBuilder::new()
        .flexible(true)
        .terminator(Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// All records with their 1-based line numbers.
fn read_rows(path: &Path) -> Result<Vec<(usize, StringRecord)>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| format_err(path, line, format!("`{s}` is not a number")))
}

fn parse_u64(path: &Path, line: usize, s: &str) -> Result<u64> {
    s.parse::<u64>()
        .map_err(|_| format_err(path, line, format!("`{s}` is not a nonnegative integer")))
}

fn expect_header(path: &Path, rows: &[(usize, StringRecord)], header: &[&str]) -> Result<()> {
    match rows.first() {
        Some((line, rec)) if rec.iter().eq(header.iter().copied()) => {
            let _ = line;
            Ok(())
        }
        Some((line, rec)) => Err(format_err(
            path,
            *line,
            format!("expected header `{}`, found `{}`", header.join(","), rec.iter().collect::<Vec<_>>().join(",")),
        )),
        None => Err(format_err(path, 1, "file is empty")),
    }
}

/// A plain numeric matrix, one row per line, no header.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let rows = read_rows(path)?;
    if rows.is_empty() {
        return Err(format_err(path, 1, "file is empty"));
    }
    let ncols = rows[0].1.len();
    let mut data = Vec::with_capacity(rows.len() * ncols);
    for (line, rec) in &rows {
        if rec.len() != ncols {
            return Err(format_err(path, *line, format!("expected {ncols} fields, found {}", rec.len())));
        }
        for f in rec {
            data.push(parse_f64(path, *line, f)?);
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &data))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_rows(path, m.row_iter().map(|r| r.iter().map(|&v| fmt_f64(v)).collect()))
}

/// Features with a header row `x1,…,xL`.
pub fn write_features(path: &Path, x: &FeatureMatrix) -> Result<()> {
    let header: Vec<String> = (1..=x.dim()).map(|i| format!("x{i}")).collect();
    let body = x.matrix().row_iter().map(|r| r.iter().map(|&v| fmt_f64(v)).collect());
    write_rows(path, std::iter::once(header).chain(body))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let rows = read_rows(path)?;
    let Some((_, header)) = rows.first() else {
        return Err(format_err(path, 1, "file is empty"));
    };
    let l = header.len();
    let expected: Vec<String> = (1..=l).map(|i| format!("x{i}")).collect();
    expect_header(path, &rows, &expected.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut data = Vec::with_capacity((rows.len() - 1) * l);
    for (line, rec) in &rows[1..] {
        if rec.len() != l {
            return Err(format_err(path, *line, format!("expected {l} fields, found {}", rec.len())));
        }
        for f in rec {
            data.push(parse_f64(path, *line, f)?);
        }
    }
    FeatureMatrix::new(DMatrix::from_row_slice(rows.len() - 1, l, &data))
}

/// `j,freq,count` rows; population data is written with every count 0.
pub fn write_counts(path: &Path, counts: &SampleCounts) -> Result<()> {
    let ints = counts.counts();
    let header = vec!["j".to_string(), "freq".into(), "count".into()];
    let body = counts.freq().iter().enumerate().map(|(j, &f)| {
        vec![
            j.to_string(),
            fmt_f64(f),
            ints.as_ref().map_or(0, |c| c[j]).to_string(),
        ]
    });
    write_rows(path, std::iter::once(header).chain(body))
}

pub fn read_counts(path: &Path) -> Result<SampleCounts> {
    let rows = read_rows(path)?;
    expect_header(path, &rows, &["j", "freq", "count"])?;
    let mut freq = Vec::with_capacity(rows.len());
    let mut ints = Vec::with_capacity(rows.len());
    for (idx, (line, rec)) in rows[1..].iter().enumerate() {
        if rec.len() != 3 {
            return Err(format_err(path, *line, format!("expected 3 fields, found {}", rec.len())));
        }
        if parse_u64(path, *line, &rec[0])? != idx as u64 {
            return Err(format_err(path, *line, format!("expected index {idx}")));
        }
        freq.push(parse_f64(path, *line, &rec[1])?);
        ints.push(parse_u64(path, *line, &rec[2])?);
    }
    if ints.iter().all(|&c| c == 0) {
        SampleCounts::population(freq)
    } else {
        let counts = SampleCounts::from_counts(&ints)?;
        if counts.freq().iter().zip(&freq).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(format_err(path, 1, "freq column disagrees with count column"));
        }
        Ok(counts)
    }
}

/// Parameter file: `format,K,L` header, a version row, one `alpha` row and `K` `theta`
/// rows.
pub fn write_params(path: &Path, omega: &MixtureParams) -> Result<()> {
    let k = omega.n_components();
    let mut rows = vec![
        vec!["format".to_string(), "K".into(), "L".into()],
        vec![PARAMS_FORMAT.to_string(), k.to_string(), omega.dim().to_string()],
    ];
    rows.push(
        std::iter::once("alpha".to_string())
            .chain(omega.alpha().iter().map(|&a| fmt_f64(a)))
            .collect(),
    );
    for c in 0..k {
        rows.push(
            std::iter::once("theta".to_string())
                .chain(omega.thetas().row(c).iter().map(|&v| fmt_f64(v)))
                .collect(),
        );
    }
    write_rows(path, rows)
}

pub fn read_params(path: &Path) -> Result<MixtureParams> {
    let rows = read_rows(path)?;
    expect_header(path, &rows, &["format", "K", "L"])?;
    let Some((line, meta)) = rows.get(1) else {
        return Err(format_err(path, 2, "missing format row"));
    };
    if meta.len() != 3 {
        return Err(format_err(path, *line, "format row needs 3 fields"));
    }
    let version = parse_u64(path, *line, &meta[0])?;
    if version != PARAMS_FORMAT as u64 {
        return Err(format_err(path, *line, format!("unsupported format version {version}")));
    }
    let k = parse_u64(path, *line, &meta[1])? as usize;
    let l = parse_u64(path, *line, &meta[2])? as usize;
    if rows.len() != 3 + k {
        return Err(format_err(path, *line, format!("expected {} rows after the header, found {}", 2 + k, rows.len() - 1)));
    }
    let numeric = |idx: usize, tag: &str, width: usize| -> Result<Vec<f64>> {
        let (line, rec) = &rows[idx];
        if rec.get(0) != Some(tag) {
            return Err(format_err(path, *line, format!("expected a `{tag}` row")));
        }
        if rec.len() != width + 1 {
            return Err(format_err(path, *line, format!("expected {width} values, found {}", rec.len() - 1)));
        }
        rec.iter().skip(1).map(|f| parse_f64(path, *line, f)).collect()
    };
    let alpha = numeric(2, "alpha", k)?;
    let mut thetas = DMatrix::zeros(k, l);
    for c in 0..k {
        let row = numeric(3 + c, "theta", l)?;
        for (d, v) in row.into_iter().enumerate() {
            thetas[(c, d)] = v;
        }
    }
    MixtureParams::new(alpha, thetas)
}

pub fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let header = vec!["iter".to_string(), "loglik".into()];
    let body = trace.iter().enumerate().map(|(i, &v)| vec![i.to_string(), fmt_f64(v)]);
    write_rows(path, std::iter::once(header).chain(body))
}

/// `key,value` rows.
pub fn write_diagnostics(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let header = vec!["key".to_string(), "value".into()];
    let body = entries.iter().map(|(k, v)| vec![k.clone(), v.clone()]);
    write_rows(path, std::iter::once(header).chain(body))
}

/// An `eigvals` row followed by the `L` rows of `V̂`.
pub fn write_subspace(path: &Path, s: &SubspaceEstimate) -> Result<()> {
    let mut rows = vec![std::iter::once("eigvals".to_string())
        .chain(s.eigvals.iter().map(|&v| fmt_f64(v)))
        .collect::<Vec<_>>()];
    for r in s.v_hat.row_iter() {
        rows.push(std::iter::once("v".to_string()).chain(r.iter().map(|&v| fmt_f64(v))).collect());
    }
    write_rows(path, rows)
}

/// Creates `dir` if needed and returns `dir/name`.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir.join(name))
}

/// Writes raw bytes, mapping failures to an IO error carrying the path.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}

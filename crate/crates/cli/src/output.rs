//! Plain-text writers. Numbers use the shortest representation that reads
//! back to the same `f64`.

use std::fs;
use std::path::Path;

use rsid_core::{DMatrix, IoRecord};
use serde::Serialize;

use crate::error::CliError;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(path, &text)
}

/// Rows of already formatted fields under `header`.
pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// One column per channel (`{prefix}1..`), one row per sample.
pub fn series_text(prefix: &str, m: &DMatrix<f64>) -> String {
    let header: Vec<String> = (1..=m.nrows()).map(|i| format!("{prefix}{i}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..m.ncols())
        .map(|k| m.column(k).iter().map(|v| v.to_string()).collect())
        .collect();
    csv_text(&header, &rows)
}

pub fn write_series(path: &Path, prefix: &str, m: &DMatrix<f64>) -> Result<(), CliError> {
    write_text(path, &series_text(prefix, m))
}

pub fn write_record(path: &Path, record: &IoRecord) -> Result<(), CliError> {
    let mut buf = Vec::new();
    rsid_core::harness::write_csv_record(record, &mut buf)?;
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

/// Inputs `u1..um` from a CSV file; other columns are ignored.
pub fn read_inputs(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(rsid_core::Error::from)?.clone();
    let mut cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, name)| {
            let n = name.strip_prefix('u')?.parse::<usize>().ok()?;
            Some((n, c))
        })
        .collect();
    cols.sort_unstable();
    if cols.iter().enumerate().any(|(i, &(n, _))| n != i + 1) {
        return Err(parse_error(1, "input columns must be numbered u1..um"));
    }
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(rsid_core::Error::from)?;
        for &(_, c) in &cols {
            let field = rec.get(c).ok_or_else(|| parse_error(line, "missing field"))?;
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(line, &format!("not a number: '{field}'")))?;
            if !v.is_finite() {
                return Err(parse_error(line, "input is not finite"));
            }
            samples.push(v);
        }
    }
    let len = if cols.is_empty() { 0 } else { samples.len() / cols.len() };
    Ok(DMatrix::from_column_slice(cols.len(), len, &samples))
}

fn parse_error(line: usize, msg: &str) -> CliError {
    CliError::Core(rsid_core::Error::Parse {
        line,
        msg: msg.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_layout() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 2.5, -3.0]);
        assert_eq!(series_text("y", &m), "y1,y2\n1,2.5\n0.1,-3\n");
    }

    #[test]
    fn full_precision() {
        let v = 1.0 / 3.0;
        let text = series_text("y", &DMatrix::from_element(1, 1, v));
        let back: f64 = text.lines().nth(1).unwrap().parse().unwrap();
        assert_eq!(back, v);
    }
}

//! CSV and JSON files.
//!
//! Floats are written in shortest round-trip form (at most 17 significant
//! digits, exponent notation for very large or small magnitudes), so a
//! read/write cycle reproduces the file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use cvar_core::Panel;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Shortest round-trip text of `v`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// A panel together with the header of its timestamp column, if it had one.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPanel {
    pub panel: Panel,
    pub stamp_header: Option<String>,
}

fn data_err(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Data {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a header row of labels and one row per time step. A first column
/// whose first value is not a number is kept as timestamps.
pub fn read_panel(path: &Path) -> CliResult<LoadedPanel> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| data_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let records: Vec<csv::StringRecord> = reader
        .records()
        .collect::<Result<_, _>>()
        .map_err(|e| data_err(path, e.to_string()))?;
    let first = records.first().ok_or_else(|| data_err(path, "no data rows"))?;
    let has_stamp = first.get(0).is_some_and(|v| v.parse::<f64>().is_err());
    let skip = usize::from(has_stamp);
    let n = headers.len().saturating_sub(skip);
    if n == 0 {
        return Err(data_err(path, "no series columns"));
    }
    let mut values = Vec::with_capacity(records.len() * n);
    let mut stamps = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != headers.len() {
            return Err(data_err(
                path,
                format!("row {} has {} fields, header has {}", i + 2, rec.len(), headers.len()),
            ));
        }
        if has_stamp {
            stamps.push(rec[0].to_string());
        }
        for j in skip..rec.len() {
            let v: f64 = rec[j].parse().map_err(|_| {
                data_err(
                    path,
                    format!("row {}, column '{}': '{}' is not a number", i + 2, headers[j], &rec[j]),
                )
            })?;
            if !v.is_finite() {
                return Err(data_err(
                    path,
                    format!("row {}, column '{}': non-finite value", i + 2, headers[j]),
                ));
            }
            values.push(v);
        }
    }
    let levels = DMatrix::from_row_slice(records.len(), n, &values);
    let mut panel = Panel::new(levels, headers[skip..].to_vec())?;
    if has_stamp {
        panel = panel.with_timestamps(stamps)?;
    }
    Ok(LoadedPanel {
        panel,
        stamp_header: has_stamp.then(|| headers[0].clone()),
    })
}

pub fn write_panel(path: &Path, loaded: &LoadedPanel) -> CliResult<()> {
    let panel = &loaded.panel;
    let stamps = panel.timestamps();
    let mut header = Vec::new();
    if stamps.is_some() {
        header.push(loaded.stamp_header.clone().unwrap_or_else(|| "timestamp".into()));
    }
    header.extend(panel.labels().iter().cloned());
    let rows = (0..panel.rows()).map(|i| {
        let mut row: Vec<String> = stamps.map(|s| vec![s[i].clone()]).unwrap_or_default();
        row.extend(panel.levels().row(i).iter().map(|v| num(*v)));
        row
    });
    write_csv(path, &header, rows)
}

pub fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => data_err(path, format!("{other:?}")),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| data_err(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| data_err(path, e.to_string()))
}

pub fn ensure_dir(dir: &Path) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir.to_path_buf())
}

/// Row-major nested vectors, the JSON layout of every matrix.
pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> CliResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::usage(format!(
            "{what}: expected a non-empty rectangular matrix"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.csv");
        fs::write(
            &src,
            "date,a,b\n2008-09-01,1.5,-0.1\n2008-09-02,0.30000000000000004,1e-300\n2008-09-03,123456789.123,2\n",
        )
        .unwrap();
        let loaded = read_panel(&src).unwrap();
        assert_eq!(loaded.stamp_header.as_deref(), Some("date"));
        assert_eq!(loaded.panel.levels()[(1, 0)], 0.30000000000000004);
        let once = dir.path().join("once.csv");
        let twice = dir.path().join("twice.csv");
        write_panel(&once, &loaded).unwrap();
        write_panel(&twice, &read_panel(&once).unwrap()).unwrap();
        let a = fs::read(&once).unwrap();
        assert_eq!(a, fs::read(&twice).unwrap());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("date,a,b\n2008-09-01,1.5,-0.1\n"), "{text}");
        assert!(text.contains(",1e-300\n"));
    }

    #[test]
    fn panel_without_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.csv");
        fs::write(&src, "x1,x2\n1,2\n3,4\n").unwrap();
        let loaded = read_panel(&src).unwrap();
        assert!(loaded.stamp_header.is_none());
        assert_eq!(
            loaded.panel.levels(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])
        );
    }

    #[test]
    fn malformed_panels() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.csv");
        for body in ["x1,x2\n1,2\n3,oops\n", "x1,x2\n1,2\n3\n", "x1,x2\n", "x1,x2\n1,NaN\n"] {
            fs::write(&src, body).unwrap();
            assert!(matches!(read_panel(&src), Err(CliError::Data { .. })), "{body:?}");
        }
        assert!(matches!(
            read_panel(&dir.path().join("missing.csv")),
            Err(CliError::Io { .. })
        ));
    }
}

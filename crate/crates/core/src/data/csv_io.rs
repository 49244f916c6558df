use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use ndarray::Array2;

use super::RawSeries;
use crate::error::{Error, Result};

/// Timestamp layout of the date column (timezone-naive).
pub const DATE_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

fn parse_date(cell: &str, row: usize) -> Result<i64> {
    NaiveDateTime::parse_from_str(cell.trim(), DATE_FORMAT)
        .map(|dt| dt.and_utc().timestamp())
        .map_err(|e| Error::Row {
            row,
            message: format!("invalid date {cell:?}: {e}"),
        })
}

/// Reads a `date,<channel>...` CSV. Data rows are numbered from 1 in errors;
/// the header is row 0.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let header = reader.headers()?.clone();
    if header.get(0).map(str::trim) != Some("date") {
        return Err(Error::Row {
            row: 0,
            message: "first header cell must be \"date\"".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if names.is_empty() {
        return Err(Error::Row {
            row: 0,
            message: "no value columns after \"date\"".into(),
        });
    }
    let width = header.len();

    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != width {
            return Err(Error::Row {
                row,
                message: format!("expected {width} cells, found {}", record.len()),
            });
        }
        let ts = parse_date(&record[0], row)?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::Row {
                    row,
                    message: "timestamps are not strictly increasing".into(),
                });
            }
            if timestamps.len() >= 2 {
                let interval = timestamps[1] - timestamps[0];
                if ts - prev != interval {
                    return Err(Error::Row {
                        row,
                        message: format!("uneven spacing: step {} vs interval {interval}", ts - prev),
                    });
                }
            }
        }
        timestamps.push(ts);
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Row {
                row,
                message: format!("non-numeric cell {cell:?} in column {c}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    row,
                    message: format!("non-finite cell {cell:?} in column {c}"),
                });
            }
            flat.push(v);
        }
    }
    if timestamps.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            available: timestamps.len(),
        });
    }
    let interval = timestamps[1] - timestamps[0];
    let values = Array2::from_shape_vec((timestamps.len(), names.len()), flat).expect("row width validated above");
    RawSeries::new(timestamps, values, names, interval)
}

/// Writes a series in the same format `load_csv` reads. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv(series: &RawSeries<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(out, "date").map_err(io)?;
    for name in &series.feature_names {
        write!(out, ",{name}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for (t, row) in series.timestamps.iter().zip(series.values.rows()) {
        let date = DateTime::from_timestamp(*t, 0)
            .ok_or_else(|| Error::Config(format!("timestamp {t} out of range")))?
            .naive_utc()
            .format(DATE_FORMAT);
        write!(out, "{date}").map_err(io)?;
        for v in row {
            write!(out, ",{v}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

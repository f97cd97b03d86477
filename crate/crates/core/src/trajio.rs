//! Trajectory CSV files and content digests.
//!
//! Trajectories are UTF-8 CSV with header `t,dim0,dim1,...`, one row per
//! control tick, `t` in seconds. Floats are written in their shortest
//! round-trip form, so a file read back yields bit-identical actions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::bspline::{ActionChunk, DEFAULT_DT};
use crate::error::{Error, Result};

pub fn trajectory_csv(chunk: &ActionChunk) -> String {
    let mut out = String::from("t");
    for j in 0..chunk.dims() {
        let _ = write!(out, ",dim{j}");
    }
    out.push('\n');
    for t in 0..chunk.len() {
        let _ = write!(out, "{}", t as f64 * chunk.dt());
        for v in chunk.actions().row(t).iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory_csv(path: &Path, chunk: &ActionChunk) -> Result<()> {
    fs::write(path, trajectory_csv(chunk)).map_err(|e| Error::io(path, e))
}

/// Parses a trajectory CSV; `dt` is taken from the first two time stamps
/// (30 Hz when there is a single row).
pub fn parse_trajectory_csv(path: &Path, text: &str) -> Result<ActionChunk> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty trajectory file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(Error::format(path, "header must start with `t`"));
    }
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("dim{j}") {
            return Err(Error::format(path, format!("unexpected column `{c}`, wanted `dim{j}`")));
        }
    }
    let d = cols.len() - 1;
    if d == 0 {
        return Err(Error::format(path, "no action columns"));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::format(
                path,
                format!("row {}: expected {} fields, got {}", lineno + 2, d + 1, fields.len()),
            ));
        }
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                Error::format(path, format!("row {}: cannot parse `{f}`", lineno + 2))
            })?;
            if k == 0 {
                times.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if times.is_empty() {
        return Err(Error::format(path, "trajectory has no rows"));
    }
    let dt = if times.len() >= 2 {
        times[1] - times[0]
    } else {
        DEFAULT_DT
    };
    let actions = DMatrix::from_row_slice(times.len(), d, &values);
    ActionChunk::new(actions, dt).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_trajectory_csv(path: &Path) -> Result<ActionChunk> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory_csv(path, &text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Sorted `*.csv` files directly inside `dir`.
pub fn csv_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_rows() {
        let chunk = ActionChunk::new(DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 0.25, 2.0]), 0.1)
            .unwrap();
        let text = trajectory_csv(&chunk);
        assert_eq!(text, "t,dim0,dim1\n0,0.5,-1\n0.1,0.25,2\n");
    }

    #[test]
    fn malformed_files_rejected() {
        let p = Path::new("x.csv");
        assert!(parse_trajectory_csv(p, "").is_err());
        assert!(parse_trajectory_csv(p, "time,dim0\n0,1\n").is_err());
        assert!(parse_trajectory_csv(p, "t,dim1\n0,1\n").is_err());
        assert!(parse_trajectory_csv(p, "t,dim0\n0,1,2\n").is_err());
        assert!(parse_trajectory_csv(p, "t,dim0\n0,abc\n").is_err());
        assert!(parse_trajectory_csv(p, "t,dim0\n").is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_trajectory_csv(Path::new("/nonexistent/traj.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/traj.csv"));
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(
            values in prop::collection::vec(-1e3f64..1e3, 6..60),
        ) {
            let rows = values.len() / 3;
            let m = DMatrix::from_row_slice(rows, 3, &values[..rows * 3]);
            let chunk = ActionChunk::new(m, DEFAULT_DT).unwrap();
            let back = parse_trajectory_csv(Path::new("mem"), &trajectory_csv(&chunk)).unwrap();
            prop_assert_eq!(back.actions(), chunk.actions());
            prop_assert!((back.dt() - DEFAULT_DT).abs() < 1e-15);
        }
    }
}

//! Grid exports for inspecting per-patch quantities: CSV with one grid row
//! per line, and binary 8-bit PGM scaled to the grid's own min/max.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bundle::Grid;
use crate::error::{Error, Result};

pub fn grid_csv(values: &[f64], grid: Grid) -> Result<String> {
    check(values, grid)?;
    let mut out = String::new();
    for row in values.chunks(grid.cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    Ok(out)
}

/// Min-max scaled P5 image; a constant grid maps to all zeros.
pub fn grid_pgm(values: &[f64], grid: Grid) -> Result<Vec<u8>> {
    check(values, grid)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", grid.cols, grid.rows).into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

fn check(values: &[f64], grid: Grid) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::GridMismatch {
            len: values.len(),
            rows: grid.rows,
            cols: grid.cols,
        });
    }
    Ok(())
}

/// Writes `<stem>.csv` and `<stem>.pgm` into `dir`.
pub fn write_heatmap(dir: &Path, stem: &str, values: &[f64], grid: Grid) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, grid_csv(values, grid)?).map_err(|e| Error::io(&csv, e))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, grid_pgm(values, grid)?).map_err(|e| Error::io(&pgm, e))
}

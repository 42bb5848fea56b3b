//! Splits a run CSV into per-metric `n value` files for gnuplot.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;

use crate::CliError;

/// Written for cells that are empty in the CSV; gnuplot skips the point.
pub const MISSING: &str = "NaN";

/// One `<column>.dat` file per column other than `n`. Empty cells become
/// [`MISSING`] so every file has one line per CSV row.
pub fn emit_plot_data(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut reader = csv::Reader::from_path(csv_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?
        .clone();
    let n_col = headers
        .iter()
        .position(|h| h == "n")
        .ok_or_else(|| CliError::Runtime(format!("{}: missing column `n`", csv_path.display())))?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;

    let metrics: Vec<(usize, &str)> = headers.iter().enumerate().filter(|&(i, _)| i != n_col).collect();
    let mut bodies = vec![String::new(); metrics.len()];
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
        let n = &record[n_col];
        for (body, &(i, _)) in bodies.iter_mut().zip(&metrics) {
            let cell = record.get(i).unwrap_or("");
            let value = if cell.is_empty() { MISSING } else { cell };
            body.push_str(n);
            body.push(' ');
            body.push_str(value);
            body.push('\n');
        }
        rows += 1;
    }
    if rows == 0 {
        warn!("{} has no data rows; plot files are empty", csv_path.display());
    }

    let mut written = Vec::with_capacity(metrics.len());
    for (body, (_, name)) in bodies.iter().zip(metrics) {
        let path = out_dir.join(format!("{name}.dat"));
        let mut f = fs::File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        f.write_all(body.as_bytes())
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a file written by [`emit_plot_data`] back into `(n, cell)` pairs,
/// with [`MISSING`] mapped to the empty cell.
pub fn read_plot_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    text.lines()
        .map(|line| {
            let (n, v) = line
                .split_once(' ')
                .ok_or_else(|| CliError::Runtime(format!("{}: malformed line `{line}`", path.display())))?;
            let v = if v == MISSING { "" } else { v };
            Ok((n.to_string(), v.to_string()))
        })
        .collect()
}

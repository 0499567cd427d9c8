//! Atomic output, matrix files in either format, and CSV conversion.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rrqr_lora::Matrix;

use crate::error::{CliError, CliResult};
use crate::rlmx::{self, Dtype};

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let io_err = |e: std::io::Error| CliError::data(format!("writing {}: {e}", path.display()));
    fs::create_dir_all(&dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str, origin: &str) -> CliResult<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::data(format!("{origin}: {e}")))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    CliError::data(format!(
                        "{origin}: line {}, field {}: `{field}` is not a finite number",
                        line + 1,
                        col + 1
                    ))
                })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("{origin}: empty matrix")));
    }
    Matrix::from_rows(&rows).map_err(|e| CliError::data(format!("{origin}: {e}")))
}

/// Reads RLMX, or CSV when `csv` is set or the path ends in `.csv`.
pub fn read_matrix(path: &Path, csv: bool) -> CliResult<Matrix> {
    if csv || path.extension().is_some_and(|e| e == "csv") {
        let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        matrix_from_csv(&text, &path.display().to_string())
    } else {
        Ok(rlmx::read_file(path)?.0)
    }
}

/// Writes `m` as f64 RLMX, plus a `.csv` sibling when `csv` is set.
pub fn write_matrix(path: &Path, m: &Matrix, csv: bool) -> CliResult<()> {
    let bytes = rlmx::encode(m, Dtype::F64).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)?;
    if csv {
        write_atomic(&path.with_extension("csv"), matrix_to_csv(m).as_bytes())?;
    }
    Ok(())
}

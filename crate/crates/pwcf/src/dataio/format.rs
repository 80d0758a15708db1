//! On-disk formats.
//!
//! Feature matrices: "PWF1" — magic `50 57 46 31`, little-endian u32
//! version = 1, u64 rows (d), u64 cols (n), then `d*n` little-endian f64
//! values in column-major order. CSV ingest transposes: rows are samples.
//!
//! Labels: one decimal class index per line, in sample (column) order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

use super::{FeatureMatrix, LabelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Binary,
    Csv,
}

pub(crate) const FEATURE_MAGIC: [u8; 4] = *b"PWF1";
pub(crate) const FORMAT_VERSION: u32 = 1;

// Small readers/writers shared by every binary format in the crate.

pub(crate) fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format(path, what, format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format(path, what, format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64_block(
    r: &mut impl Read,
    len: usize,
    path: &Path,
    what: &str,
) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format(path, what, format!("truncated: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn write_f64_block(w: &mut impl Write, vals: &[f64], path: &Path) -> Result<()> {
    for &v in vals {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub(crate) fn check_magic(r: &mut impl Read, expected: &[u8; 4], path: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format(path, "magic", format!("truncated: {e}")))?;
    if &magic != expected {
        return Err(Error::format(
            path,
            "magic",
            format!(
                "expected {:02x?}, found {:02x?}",
                expected, magic
            ),
        ));
    }
    Ok(())
}

pub(crate) fn check_version(r: &mut impl Read, path: &Path) -> Result<()> {
    let version = read_u32(r, path, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            "version",
            format!("unsupported version {version}"),
        ));
    }
    Ok(())
}

pub fn load_feature_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    match format {
        MatrixFormat::Binary => load_binary(path),
        MatrixFormat::Csv => load_csv(path),
    }
}

pub fn save_feature_matrix(
    path: impl AsRef<Path>,
    matrix: &FeatureMatrix,
    format: MatrixFormat,
) -> Result<()> {
    let path = path.as_ref();
    match format {
        MatrixFormat::Binary => save_binary(path, matrix),
        MatrixFormat::Csv => save_csv(path, matrix),
    }
}

fn load_binary(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    check_magic(&mut r, &FEATURE_MAGIC, path)?;
    check_version(&mut r, path)?;
    let rows = read_u64(&mut r, path, "header")? as usize;
    let cols = read_u64(&mut r, path, "header")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(
            path,
            "header",
            format!("empty dataset: {rows} rows, {cols} cols"),
        ));
    }
    let total = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(path, "header", "dimension overflow".to_string()))?;
    let values = read_f64_block(&mut r, total, path, "values")?;
    for (idx, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::format(
                path,
                format!("row {}, column {}", idx % rows, idx / rows),
                format!("non-finite value {v}"),
            ));
        }
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailer", "trailing bytes after matrix".to_string()));
    }
    FeatureMatrix::new(DMatrix::from_column_slice(rows, cols, &values))
}

fn save_binary(path: &Path, matrix: &FeatureMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&FEATURE_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&(matrix.dim() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&(matrix.count() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    write_f64_block(&mut w, matrix.data().as_slice(), path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV rows are samples, so the stored matrix is the transpose of the file.
fn load_csv(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, field) in trimmed.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(
                    path,
                    format!("line {}, field {}", lineno + 1, col + 1),
                    format!("not a number: `{}`", field.trim()),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::format(
                    path,
                    format!("line {}, field {}", lineno + 1, col + 1),
                    format!("non-finite value {v}"),
                ));
            }
            row.push(v);
        }
        if let Some(w) = width {
            if row.len() != w {
                return Err(Error::format(
                    path,
                    format!("line {}", lineno + 1),
                    format!("expected {w} fields, found {}", row.len()),
                ));
            }
        } else {
            width = Some(row.len());
        }
        rows.push(row);
    }
    let d = width.ok_or_else(|| Error::format(path, "end of file", "empty dataset".to_string()))?;
    let n = rows.len();
    let mut m = DMatrix::zeros(d, n);
    for (j, row) in rows.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    FeatureMatrix::new(m)
}

fn save_csv(path: &Path, matrix: &FeatureMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for j in 0..matrix.count() {
        let fields: Vec<String> = (0..matrix.dim())
            .map(|i| format!("{:?}", matrix.data()[(i, j)]))
            .collect();
        writeln!(w, "{}", fields.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelVector> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let l: usize = trimmed.parse().map_err(|_| {
            Error::format(
                path,
                format!("line {}", lineno + 1),
                format!("not a class index: `{trimmed}`"),
            )
        })?;
        if l >= num_classes {
            return Err(Error::format(
                path,
                format!("line {}", lineno + 1),
                format!("label {l} is outside [0, {num_classes})"),
            ));
        }
        labels.push(l);
    }
    LabelVector::new(labels, num_classes)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelVector) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &l in labels.labels() {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

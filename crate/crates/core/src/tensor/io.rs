//! Plain-text matrix format (`.mtx.txt`).
//!
//! ```text
//! 2 3
//! 1 0 -0.5
//! 0.25 1e-7 3
//! ```
//!
//! The header holds `rows cols`; each following line holds one row. Values
//! are written with Rust's shortest round-trip float formatting, so
//! `parse_matrix(&m.to_string()) == m` bit for bit.

use std::fmt;
use std::fs;
use std::path::Path;

use super::DenseMatrix;
use crate::error::{LipError, Result};

impl fmt::Display for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", self.rows(), self.cols())?;
        for i in 0..self.rows() {
            let mut first = true;
            for v in self.row(i) {
                if !first {
                    f.write_str(" ")?;
                }
                first = false;
                write!(f, "{v}")?;
            }
            f.write_str("\n")?;
        }
        Ok(())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> LipError {
    LipError::Parse { line, message: message.into() }
}

fn parse_count(tok: &str, line: usize) -> Result<usize> {
    if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(parse_err(line, format!("expected a decimal count, got {tok:?}")));
    }
    let v: usize = tok.parse().map_err(|_| parse_err(line, format!("count {tok:?} out of range")))?;
    if v == 0 {
        return Err(parse_err(line, "dimensions must be positive"));
    }
    Ok(v)
}

/// Parses the matrix text format. Blank trailing lines are ignored.
pub fn parse_matrix(text: &str) -> Result<DenseMatrix> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 2 {
        return Err(parse_err(1, "header must be `rows cols`"));
    }
    let rows = parse_count(toks[0], 1)?;
    let cols = parse_count(toks[1], 1)?;
    let total = rows.checked_mul(cols).ok_or_else(|| parse_err(1, "rows*cols overflows"))?;

    // never trust the header for allocation size
    let mut data = Vec::with_capacity(total.min(text.len()));
    let mut seen_rows = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if seen_rows == rows {
            return Err(parse_err(lineno, "more rows than the header declares"));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| parse_err(lineno, format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value {tok:?}")));
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(
                lineno,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(parse_err(
            text.lines().count().max(1),
            format!("expected {rows} rows, found {seen_rows}"),
        ));
    }
    DenseMatrix::from_vec(rows, cols, data)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| LipError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_matrix(&text)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    fs::write(path, m.to_string())?;
    Ok(())
}

/// Reads a vector stored as an `n x 1` or `1 x n` matrix.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let m = read_matrix(path)?;
    if m.rows() != 1 && m.cols() != 1 {
        return Err(parse_err(1, format!("expected a vector, got {}x{}", m.rows(), m.cols())));
    }
    Ok(m.into_vec())
}

/// Writes a vector as an `n x 1` matrix.
pub fn write_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    write_matrix(path, &DenseMatrix::column_vector(v)?)
}

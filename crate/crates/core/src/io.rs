//! Plain-text matrix files: a header line `n r` followed by `n` rows of `r`
//! whitespace-separated decimals. Blank lines and lines starting with `#`
//! are skipped.
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! written matrix parses back bit for bit.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::FactorMatrix;
use crate::scalar::Real;

fn parse_usize(tok: &str, what: &str, line: usize) -> Result<usize> {
    tok.parse().map_err(|_| Error::Parse(format!("line {line}: {what} must be a nonnegative integer, got {tok:?}")))
}

/// Parses the text format into a dense matrix.
pub fn parse_matrix<T: Real>(text: &str) -> Result<DMatrix<T>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or_else(|| Error::Parse("empty input, expected header \"n r\"".into()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(Error::Parse(format!("line {hline}: header must be \"n r\", got {header:?}")));
    }
    let n = parse_usize(dims[0], "n", hline)?;
    let r = parse_usize(dims[1], "r", hline)?;
    let mut data = Vec::with_capacity(n * r);
    let mut rows = 0;
    for (ln, line) in lines {
        if rows == n {
            return Err(Error::Parse(format!("line {ln}: more than the {n} rows declared in the header")));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse(format!("line {ln}: not a number: {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("line {ln}: non-finite entry {tok:?}")));
            }
            data.push(T::lit(v));
        }
        if data.len() - before != r {
            return Err(Error::Parse(format!("line {ln}: expected {r} entries, found {}", data.len() - before)));
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Parse(format!("expected {n} rows, found {rows}")));
    }
    Ok(DMatrix::from_row_slice(n, r, &data))
}

/// Parses an `n x r` factor (`1 <= r <= n`).
pub fn parse_factor<T: Real>(text: &str) -> Result<FactorMatrix<T>> {
    FactorMatrix::new(parse_matrix(text)?)
}

/// Formats a matrix in the text format.
pub fn format_matrix<T: Real>(m: &DMatrix<T>) -> String {
    let mut out = format!("{} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{}", m[(i, j)]).expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn format_factor<T: Real>(x: &FactorMatrix<T>) -> String {
    format_matrix(x.as_matrix())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments() {
        let m: DMatrix<f64> = parse_matrix("# a point\n2 1\n1.5\n\n-2e-3\n").unwrap();
        assert_eq!(m, DMatrix::from_column_slice(2, 1, &[1.5, -2e-3]));
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["", "2\n1\n2\n", "2 1\n1\n", "2 1\n1\n2\n3\n", "1 2\n1\n", "1 1\nx\n", "1 1\nNaN\n", "a 1\n1\n"] {
            assert!(matches!(parse_matrix::<f64>(bad), Err(Error::Parse(_))), "{bad:?}");
        }
        assert!(parse_factor::<f64>("1 2\n1 2\n").is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = DMatrix::<f64>::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -5e-324, 1.7976931348623157e308]);
        let back: DMatrix<f64> = parse_matrix(&format_matrix(&m)).unwrap();
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let f = DMatrix::from_row_slice(1, 2, &[0.1f32, 1.0 / 3.0]);
        let back: DMatrix<f32> = parse_matrix(&format_matrix(&f)).unwrap();
        assert_eq!(f, back);
    }
}

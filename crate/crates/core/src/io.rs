//! Plain-text matrices and 8-bit graymaps.
//!
//! Matrices are comma-separated, one row per line, with an optional leading
//! `# rows=N cols=M` header (required for a matrix with no rows). Numbers are
//! written in the shortest form that parses back to the same `f64`, so a
//! write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_header(line_no: usize, text: &str) -> Result<(usize, usize)> {
    let mut rows = None;
    let mut cols = None;
    for part in text.trim_start_matches('#').split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("malformed header field `{part}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| parse_err(line_no, format!("header value `{value}` is not a count")))?;
        match key {
            "rows" => rows = Some(value),
            "cols" => cols = Some(value),
            other => {
                return Err(parse_err(
                    line_no,
                    format!("unknown header field `{other}`"),
                ))
            }
        }
    }
    match (rows, cols) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(parse_err(line_no, "header must give rows= and cols=")),
    }
}

/// Parses a matrix; line numbers in errors are 1-based.
pub fn parse_matrix(text: &str) -> Result<Array2<f64>> {
    let mut header = None;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if rows > 0 || header.is_some() {
                return Err(parse_err(line_no, "header must be the first line"));
            }
            header = Some(parse_header(line_no, line)?);
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let field = field.trim();
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line_no, format!("`{field}` is not a number")))?;
            values.push(v);
        }
        let width = values.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(parse_err(
                    line_no,
                    format!("ragged row: expected {c} values, found {width}"),
                ))
            }
            Some(_) => {}
        }
        rows += 1;
    }
    let cols = match (cols, header) {
        (Some(c), _) => c,
        (None, Some((0, c))) => return Ok(Array2::zeros((0, c))),
        (None, _) => return Err(parse_err(text.lines().count().max(1), "matrix has no rows")),
    };
    if let Some((hr, hc)) = header {
        if (hr, hc) != (rows, cols) {
            return Err(parse_err(
                1,
                format!("header says {hr}x{hc} but the data is {rows}x{cols}"),
            ));
        }
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("row widths checked"))
}

/// Serializes with a `# rows=N cols=M` header.
pub fn format_matrix(m: ArrayView2<'_, f64>) -> String {
    let mut out = format!("# rows={} cols={}\n", m.nrows(), m.ncols());
    for row in m.outer_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    parse_matrix(&fs::read_to_string(path)?)
}

pub fn write_matrix(path: &Path, m: ArrayView2<'_, f64>) -> Result<()> {
    fs::write(path, format_matrix(m))?;
    Ok(())
}

/// Binary (P5) graymap with one pixel per entry, `round(255 * v)` after
/// clamping to `[0, 1]`; rows of `m` become image rows.
pub fn encode_pgm(m: ArrayView2<'_, f64>) -> Vec<u8> {
    let (h, w) = m.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (255.0 * v).round() as u8
    }));
    out
}

pub fn write_pgm(path: &Path, m: ArrayView2<'_, f64>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(m))?;
    Ok(())
}

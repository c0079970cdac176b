//! Plain-text matrix format.
//!
//! ```text
//! # comments and blank lines are ignored
//! 3            # square: one dimension
//! 1 0 0
//! 0 1 0
//! 0 0 1
//! ```
//!
//! A header with two integers (`rows cols`) declares a rectangular matrix.
//! Access-count files carry one extra line after the header,
//! `components: <id> <id> ...`, giving each topic's component.
//! Values are written in shortest round-trip form, so a save/load cycle is
//! exact.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    fn parse(source_name: &str, line: usize, message: impl Into<String>) -> Self {
        FormatError::Parse {
            source_name: source_name.to_owned(),
            line,
            message: message.into(),
        }
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
        }
    }
}

impl<'a> Iterator for Lines<'a> {
    /// (1-based line number, content without comment)
    type Item = (usize, &'a str);

    fn next(&mut self) -> Option<Self::Item> {
        for (idx, raw) in self.inner.by_ref() {
            let content = raw.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                return Some((idx + 1, content));
            }
        }
        None
    }
}

fn parse_header(
    lines: &mut Lines<'_>,
    source_name: &str,
) -> Result<(usize, usize, usize), FormatError> {
    let Some((line, header)) = lines.next() else {
        return Err(FormatError::parse(
            source_name,
            0,
            "empty input, expected a dimension header",
        ));
    };
    let dims: Result<Vec<usize>, _> = header.split_whitespace().map(str::parse).collect();
    match dims.as_deref() {
        Ok([n]) => Ok((line, *n, *n)),
        Ok([r, c]) => Ok((line, *r, *c)),
        _ => Err(FormatError::parse(
            source_name,
            line,
            format!("expected `n` or `rows cols`, found `{header}`"),
        )),
    }
}

fn parse_rows(
    lines: &mut Lines<'_>,
    source_name: &str,
    header_line: usize,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>, FormatError> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut last_line = header_line;
    for r in 0..rows {
        let Some((line, content)) = lines.next() else {
            return Err(FormatError::parse(
                source_name,
                last_line,
                format!("expected {rows} rows, found {r}"),
            ));
        };
        last_line = line;
        let mut count = 0;
        for token in content.split_whitespace() {
            let v: f64 = token.parse().map_err(|_| {
                FormatError::parse(source_name, line, format!("invalid number `{token}`"))
            })?;
            data.push(v);
            count += 1;
        }
        if count != cols {
            return Err(FormatError::parse(
                source_name,
                line,
                format!("expected {cols} values, found {count}"),
            ));
        }
    }
    if let Some((line, _)) = lines.next() {
        return Err(FormatError::parse(
            source_name,
            line,
            format!("unexpected content after {rows} rows"),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Parses a matrix from text. `source_name` is used in error messages.
pub fn parse_matrix(text: &str, source_name: &str) -> Result<DMatrix<f64>, FormatError> {
    let mut lines = Lines::new(text);
    let (header_line, rows, cols) = parse_header(&mut lines, source_name)?;
    parse_rows(&mut lines, source_name, header_line, rows, cols)
}

/// Parses an access-count file: square header, component line, rows.
pub fn parse_access(
    text: &str,
    source_name: &str,
) -> Result<(DMatrix<f64>, Vec<usize>), FormatError> {
    let mut lines = Lines::new(text);
    let (header_line, rows, cols) = parse_header(&mut lines, source_name)?;
    if rows != cols {
        return Err(FormatError::parse(
            source_name,
            header_line,
            "access counts must be square",
        ));
    }
    let Some((line, content)) = lines.next() else {
        return Err(FormatError::parse(
            source_name,
            header_line,
            "missing `components:` line",
        ));
    };
    let Some(rest) = content.strip_prefix("components:") else {
        return Err(FormatError::parse(
            source_name,
            line,
            "expected `components: <id> ...`",
        ));
    };
    let components: Vec<usize> = rest
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| {
                FormatError::parse(source_name, line, format!("invalid component id `{t}`"))
            })
        })
        .collect::<Result<_, _>>()?;
    if components.len() != rows {
        return Err(FormatError::parse(
            source_name,
            line,
            format!("expected {rows} component ids, found {}", components.len()),
        ));
    }
    let a = parse_rows(&mut lines, source_name, line, rows, cols)?;
    Ok((a, components))
}

fn write_rows(out: &mut String, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    if m.nrows() == m.ncols() {
        let _ = writeln!(out, "{}", m.nrows());
    } else {
        let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    }
    write_rows(&mut out, m);
    out
}

pub fn format_access(a: &DMatrix<f64>, components: &[usize]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", a.nrows());
    let ids: Vec<String> = components.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(out, "components: {}", ids.join(" "));
    write_rows(&mut out, a);
    out
}

pub fn read_to_string(path: &Path) -> Result<String, FormatError> {
    std::fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>, FormatError> {
    let text = read_to_string(path)?;
    parse_matrix(&text, &path.display().to_string())
}

pub fn load_access(path: &Path) -> Result<(DMatrix<f64>, Vec<usize>), FormatError> {
    let text = read_to_string(path)?;
    parse_access(&text, &path.display().to_string())
}

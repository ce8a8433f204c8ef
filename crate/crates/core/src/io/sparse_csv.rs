//! Sparse measurements on disk as CSV rows `row,col,depth_m`, written in
//! (row, col) order. Depths print with shortest round-trip formatting, so
//! write→read returns the same values bit for bit. An empty file is a
//! valid sparse set with zero measurements.

use std::path::Path;

use crate::{Result, Scalar, SdrError, SparseDepth, Tensor};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> SdrError {
    SdrError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Encodes the measurements as CSV text, sorted by (row, col).
pub fn to_csv_string<T: Scalar>(sparse: &SparseDepth<T>) -> String {
    let mut points = sparse.points();
    points.sort_by_key(|&(row, col, _)| (row, col));
    let mut out = String::new();
    for (row, col, depth) in points {
        out.push_str(&format!("{row},{col},{}\n", depth.to_f64()));
    }
    out
}

/// Writes the measurements of `sparse` to `path`.
pub fn write_sparse_csv<T: Scalar>(path: &Path, sparse: &SparseDepth<T>) -> Result<()> {
    std::fs::write(path, to_csv_string(sparse))?;
    Ok(())
}

/// Parses CSV text into a sparse set on an `height` x `width` plane.
/// Coordinates must be in bounds and unique, depths positive and finite;
/// violations report the 1-based source line.
pub fn from_csv_string<T: Scalar>(
    path: &Path,
    text: &str,
    height: usize,
    width: usize,
) -> Result<SparseDepth<T>> {
    let mut dense = Tensor::<T>::zeros(&[height, width]);
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || (idx == 0 && line == "row,col,depth_m") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 fields \"row,col,depth_m\", found {}", fields.len()),
            ));
        }
        let row: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad row {:?}", fields[0])))?;
        let col: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad col {:?}", fields[1])))?;
        let depth: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad depth {:?}", fields[2])))?;
        if row >= height || col >= width {
            return Err(parse_err(
                path,
                line_no,
                format!("({row}, {col}) outside {height}x{width} plane"),
            ));
        }
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(parse_err(
                path,
                line_no,
                format!("depth must be positive and finite, got {depth}"),
            ));
        }
        let i = row * width + col;
        if dense.data()[i] > T::ZERO {
            return Err(parse_err(
                path,
                line_no,
                format!("duplicate measurement at ({row}, {col})"),
            ));
        }
        dense.data_mut()[i] = T::from_f64(depth);
    }
    SparseDepth::from_dense(dense)
}

/// Reads a sparse-measurement CSV for an `height` x `width` plane.
pub fn read_sparse_csv<T: Scalar>(
    path: &Path,
    height: usize,
    width: usize,
) -> Result<SparseDepth<T>> {
    let text = std::fs::read_to_string(path)?;
    from_csv_string(path, &text, height, width)
}

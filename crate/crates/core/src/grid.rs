//! Dense 2-D float grids: patch-grid saliency maps and human attention maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the visual patch grid. `rows * cols` equals the visual token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Most square factorization of `k` with `rows <= cols`.
    pub fn squarest(k: usize) -> Self {
        let mut rows = 1;
        let mut r = 1;
        while r * r <= k {
            if k.is_multiple_of(r) {
                rows = r;
            }
            r += 1;
        }
        Self {
            rows,
            cols: k / rows.max(1),
        }
    }
}

/// Row-major grid of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Min-max normalization to `[0, 1]`; a constant grid maps to all zeros.
    pub fn normalized(&self) -> Grid {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        if !(span > 0.0) || !span.is_finite() {
            return Grid::zeros(self.rows, self.cols);
        }
        self.map(|v| (v - lo) / span)
    }

    /// Separable Gaussian blur with `sigma` in cell units; edges are clamped.
    pub fn gaussian_blur(&self, sigma: f64) -> Grid {
        if !(sigma > 0.0) {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let ksum: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();

        let (rows, cols) = (self.rows as isize, self.cols as isize);
        let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
        let mut tmp = vec![0.0; self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                tmp[(r * cols + c) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * self.get(r as usize, clamp(c + i as isize - radius, cols)))
                    .sum();
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[(r * cols + c) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp[clamp(r + i as isize - radius, rows) * self.cols + c as usize])
                    .sum();
            }
        }
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: out,
        }
    }

    /// CSV text, one grid row per line, values in C `%.9e` notation.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if c > 0 {
                    out.push(',');
                }
                out.push_str(&format_sci(self.get(r, c)));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Grid> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("csv line {}: {e}", lineno + 1)))?;
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::ShapeMismatch(format!(
                        "csv line {} has {} values, expected {c}",
                        lineno + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            data.extend(row);
            rows += 1;
        }
        Grid::new(rows, cols.unwrap_or(0), data)
    }

    /// Binary PGM (P5) from values already in `[0, 1]`; quantized as
    /// `floor(255 * x)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    /// Parses binary (P5) or ASCII (P2) PGM; values are scaled to `[0, 1]`.
    pub fn from_pgm(bytes: &[u8]) -> Result<Grid> {
        let bad = |msg: &str| Error::InvalidArgument(format!("pgm: {msg}"));
        let mut pos = 0;
        let mut token = || -> Option<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            (start < pos).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token().ok_or_else(|| bad("empty"))?;
        let mut num = |what: &str| -> Result<usize> {
            token()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(&format!("bad {what}")))
        };
        let cols = num("width")?;
        let rows = num("height")?;
        let maxval = num("maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit maps are supported"));
        }
        let scale = maxval as f64;
        let data: Vec<f64> = match magic.as_str() {
            "P5" => {
                // Exactly one whitespace byte separates the header from raster data.
                let start = pos + 1;
                let raster = bytes
                    .get(start..start + rows * cols)
                    .ok_or_else(|| bad("truncated raster"))?;
                raster.iter().map(|&b| b as f64 / scale).collect()
            }
            "P2" => {
                let mut v = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    v.push(num("sample")? as f64 / scale);
                }
                v
            }
            _ => return Err(bad("unsupported magic")),
        };
        Grid::new(rows, cols, data)
    }

    /// Loads a CSV or PGM grid, chosen by file extension.
    pub fn load(path: &Path) -> Result<Grid> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let is_pgm = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("pgm"))
            .unwrap_or(false);
        if is_pgm {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            Grid::from_pgm(&bytes)
        } else {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Grid::from_csv(&text)
        }
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).floor() as u8
}

/// Formats like C's `printf("%.9e")`: `1.234567890e+00`.
pub fn format_sci(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let s = format!("{v:.9e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let mut out = String::with_capacity(16);
    let sign = if exp < 0 { '-' } else { '+' };
    let _ = write!(out, "{mantissa}e{sign}{:02}", exp.abs());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sci_format_matches_printf() {
        assert_eq!(format_sci(1.0), "1.000000000e+00");
        assert_eq!(format_sci(0.0), "0.000000000e+00");
        assert_eq!(format_sci(-0.00125), "-1.250000000e-03");
        assert_eq!(format_sci(1.5e120), "1.500000000e+120");
    }

    #[test]
    fn csv_round_trip_preserves_nine_digits() {
        let g = Grid::new(2, 2, vec![0.1, 2.0, 3.25, -4.5e-7]).unwrap();
        let back = Grid::from_csv(&g.to_csv()).unwrap();
        for (a, b) in g.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn pgm_quantization_bytes() {
        let g = Grid::new(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let pgm = g.normalized().to_pgm();
        assert_eq!(&pgm[pgm.len() - 4..], &[0, 255, 127, 63]);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        let back = Grid::from_pgm(&pgm).unwrap();
        assert_eq!(back.shape(), (2, 2));
        assert_eq!(back.get(0, 1), 1.0);
    }

    #[test]
    fn ascii_pgm() {
        let g = Grid::from_pgm(b"P2\n# c\n2 1\n255\n0 255\n").unwrap();
        assert_eq!(g.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn constant_grid_normalizes_to_zero() {
        let g = Grid::new(1, 3, vec![2.0; 3]).unwrap();
        assert_eq!(g.normalized().as_slice(), &[0.0; 3]);
    }

    #[test]
    fn blur_preserves_constant_and_mass_roughly() {
        let g = Grid::new(3, 3, vec![1.0; 9]).unwrap();
        let b = g.gaussian_blur(1.0);
        assert!(b.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let mut hot = Grid::zeros(5, 5);
        hot.set(2, 2, 1.0);
        let b = hot.gaussian_blur(0.7);
        assert!(b.get(2, 2) < 1.0 && b.get(2, 3) > 0.0);
    }

    #[test]
    fn squarest_grid() {
        assert_eq!(PatchGrid::squarest(36), PatchGrid::new(6, 6));
        assert_eq!(PatchGrid::squarest(12), PatchGrid::new(3, 4));
        assert_eq!(PatchGrid::squarest(7), PatchGrid::new(1, 7));
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            Grid::new(2, 3, vec![0.0; 4]),
            Err(Error::ShapeMismatch(_))
        ));
    }
}

//! Height rasters with a validity mask.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SurfaceError {
    #[error("surface dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} samples for a {rows}x{cols} grid, got {got}")]
    LengthMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("resolution must be positive and finite, got {0}")]
    BadResolution(f64),
}

/// A raster of surface heights (meters) sampled on a square lateral grid.
///
/// The mask is authoritative: a `false` entry is missing data and every
/// consumer must skip it. Heights under invalid samples are kept at `0.0`
/// so the raster never carries NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMatrix {
    rows: usize,
    cols: usize,
    resolution: f64,
    heights: Vec<f64>,
    mask: Vec<bool>,
}

impl SurfaceMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        resolution: f64,
        heights: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self, SurfaceError> {
        if rows == 0 || cols == 0 {
            return Err(SurfaceError::EmptyShape { rows, cols });
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(SurfaceError::BadResolution(resolution));
        }
        let expected = rows * cols;
        for got in [heights.len(), mask.len()] {
            if got != expected {
                return Err(SurfaceError::LengthMismatch {
                    rows,
                    cols,
                    expected,
                    got,
                });
            }
        }
        let mut surface = Self {
            rows,
            cols,
            resolution,
            heights,
            mask,
        };
        surface.scrub_invalid();
        Ok(surface)
    }

    /// Fully valid surface.
    pub fn from_heights(
        rows: usize,
        cols: usize,
        resolution: f64,
        heights: Vec<f64>,
    ) -> Result<Self, SurfaceError> {
        let mask = vec![true; heights.len()];
        Self::new(rows, cols, resolution, heights, mask)
    }

    /// Builds a surface where NaN marks a missing sample.
    pub fn from_nan_encoded(
        rows: usize,
        cols: usize,
        resolution: f64,
        raw: Vec<f64>,
    ) -> Result<Self, SurfaceError> {
        let mask = raw.iter().map(|v| !v.is_nan()).collect();
        Self::new(rows, cols, resolution, raw, mask)
    }

    pub fn filled(rows: usize, cols: usize, resolution: f64, value: f64) -> Result<Self, SurfaceError> {
        Self::from_heights(rows, cols, resolution, vec![value; rows * cols])
    }

    fn scrub_invalid(&mut self) {
        for (h, m) in self.heights.iter_mut().zip(self.mask.iter_mut()) {
            if !h.is_finite() {
                *m = false;
            }
            if !*m {
                *h = 0.0;
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn height(&self, row: usize, col: usize) -> f64 {
        self.heights[self.index(row, col)]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[self.index(row, col)]
    }

    /// `Some(height)` for valid samples, `None` for missing or out-of-range ones.
    pub fn get(&self, row: isize, col: isize) -> Option<f64> {
        if row < 0 || col < 0 || row as usize >= self.rows || col as usize >= self.cols {
            return None;
        }
        let i = self.index(row as usize, col as usize);
        self.mask[i].then(|| self.heights[i])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / (self.rows * self.cols) as f64
    }

    /// Mean and population standard deviation over valid samples.
    pub fn valid_stats(&self) -> Option<(f64, f64)> {
        let n = self.valid_count();
        if n == 0 {
            return None;
        }
        let mean = self.valid_values().sum::<f64>() / n as f64;
        let var = self.valid_values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Some((mean, var.sqrt()))
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.heights
            .iter()
            .zip(&self.mask)
            .filter_map(|(&h, &m)| m.then_some(h))
    }

    /// Replaces heights of valid samples; invalid samples stay at zero.
    pub fn with_heights(&self, heights: Vec<f64>) -> Result<Self, SurfaceError> {
        Self::new(self.rows, self.cols, self.resolution, heights, self.mask.clone())
    }

    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self, SurfaceError> {
        Self::new(self.rows, self.cols, self.resolution, self.heights.clone(), mask)
    }

    /// Copies the `rows x cols` window starting at (`row0`, `col0`). Parts of
    /// the window outside the raster come back invalid.
    pub fn window(&self, row0: isize, col0: isize, rows: usize, cols: usize) -> SurfaceMatrix {
        let mut heights = vec![0.0; rows * cols];
        let mut mask = vec![false; rows * cols];
        for r in 0..rows {
            let sr = row0 + r as isize;
            if sr < 0 || sr as usize >= self.rows {
                continue;
            }
            for c in 0..cols {
                let sc = col0 + c as isize;
                if sc < 0 || sc as usize >= self.cols {
                    continue;
                }
                let si = self.index(sr as usize, sc as usize);
                heights[r * cols + c] = self.heights[si];
                mask[r * cols + c] = self.mask[si];
            }
        }
        SurfaceMatrix {
            rows,
            cols,
            resolution: self.resolution,
            heights,
            mask,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_becomes_invalid_zero() {
        let s = SurfaceMatrix::from_nan_encoded(1, 3, 1.0, vec![1.0, f64::NAN, 3.0]).unwrap();
        assert_eq!(s.mask(), &[true, false, true]);
        assert_eq!(s.heights(), &[1.0, 0.0, 3.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SurfaceMatrix::from_heights(2, 2, 1.0, vec![0.0; 3]).is_err());
        assert!(SurfaceMatrix::from_heights(0, 2, 1.0, vec![]).is_err());
        assert!(SurfaceMatrix::from_heights(1, 1, 0.0, vec![0.0]).is_err());
    }

    #[test]
    fn window_outside_is_invalid() {
        let s = SurfaceMatrix::filled(2, 2, 1.0, 4.0).unwrap();
        let w = s.window(-1, 0, 2, 2);
        assert_eq!(w.mask(), &[false, false, true, true]);
        assert_eq!(w.height(1, 1), 4.0);
    }

    #[test]
    fn stats_ignore_invalid() {
        let s = SurfaceMatrix::new(1, 4, 1.0, vec![1.0, 3.0, 100.0, 0.0], vec![true, true, false, false])
            .unwrap();
        let (mean, std) = s.valid_stats().unwrap();
        assert_eq!(mean, 2.0);
        assert_eq!(std, 1.0);
    }
}

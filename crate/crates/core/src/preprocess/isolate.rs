use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::surface::SurfaceMatrix;

/// The breech-face ring between the firing pin hole and the casing edge,
/// in sample coordinates of the raster it was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    pub center_row: f64,
    pub center_col: f64,
    pub r_inner: f64,
    pub r_outer: f64,
}

impl Annulus {
    pub fn new(center_row: f64, center_col: f64, r_inner: f64, r_outer: f64) -> Result<Self, PreprocessError> {
        if !(r_inner > 0.0 && r_inner < r_outer && r_outer.is_finite()) {
            return Err(PreprocessError::Annulus(format!(
                "need 0 < r_inner < r_outer, got {r_inner} and {r_outer}"
            )));
        }
        Ok(Self {
            center_row,
            center_col,
            r_inner,
            r_outer,
        })
    }

    /// Whether the outer circle lies inside a `rows x cols` raster, with
    /// pixel edges at -0.5 and n - 0.5.
    pub fn fits_within(&self, rows: usize, cols: usize) -> bool {
        const EPS: f64 = 1e-6;
        self.center_row - self.r_outer >= -0.5 - EPS
            && self.center_col - self.r_outer >= -0.5 - EPS
            && self.center_row + self.r_outer <= rows as f64 - 0.5 + EPS
            && self.center_col + self.r_outer <= cols as f64 - 0.5 + EPS
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        let rho = ((row - self.center_row).powi(2) + (col - self.center_col).powi(2)).sqrt();
        rho >= self.r_inner && rho <= self.r_outer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsolationParams {
    /// Ring coverage needed for a radius to count as breech face.
    pub coverage: f64,
    /// Minimum coverage some ring must reach for the scan to be usable.
    pub min_band_coverage: f64,
    /// `r_inner / r_outer` used when no firing pin hole is found.
    pub full_disk_inner_fraction: f64,
}

impl Default for IsolationParams {
    fn default() -> Self {
        Self {
            coverage: 0.95,
            min_band_coverage: 0.5,
            full_disk_inner_fraction: 0.25,
        }
    }
}

/// Valid-sample coverage of unit-width rings `[k, k+1)` around a center.
/// Ring positions outside the raster count as missing.
fn ring_coverage(scan: &SurfaceMatrix, cy: f64, cx: f64, max_radius: usize) -> Vec<f64> {
    let mut total = vec![0usize; max_radius + 1];
    let mut valid = vec![0usize; max_radius + 1];
    let reach = max_radius as isize + 1;
    let (r0, c0) = (cy.round() as isize, cx.round() as isize);
    for r in r0 - reach..=r0 + reach {
        for c in c0 - reach..=c0 + reach {
            let rho = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
            let k = rho.floor() as usize;
            if k > max_radius {
                continue;
            }
            total[k] += 1;
            if scan.get(r, c).is_some() {
                valid[k] += 1;
            }
        }
    }
    total
        .iter()
        .zip(&valid)
        .map(|(&t, &v)| if t == 0 { 0.0 } else { v as f64 / t as f64 })
        .collect()
}

/// Locates the breech-face annulus and masks everything outside it.
///
/// The center is the centroid of the valid samples. `r_outer` is the outer
/// edge of the outermost ring with at least `coverage` valid samples;
/// `r_inner` the inner edge of the first such ring past the central hole.
pub fn isolate_breech_face(
    scan: &SurfaceMatrix,
    params: &IsolationParams,
) -> Result<(SurfaceMatrix, Annulus), PreprocessError> {
    let n = scan.valid_count();
    if n == 0 {
        return Err(PreprocessError::Isolation("scan has no valid samples".into()));
    }
    let (mut sr, mut sc) = (0.0, 0.0);
    for r in 0..scan.rows() {
        for c in 0..scan.cols() {
            if scan.is_valid(r, c) {
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    let (cy, cx) = (sr / n as f64, sc / n as f64);

    let mut max_radius = 0.0f64;
    for r in 0..scan.rows() {
        for c in 0..scan.cols() {
            if scan.is_valid(r, c) {
                max_radius = max_radius.max(((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt());
            }
        }
    }
    let coverage = ring_coverage(scan, cy, cx, max_radius.ceil() as usize + 1);

    if !coverage.iter().any(|&v| v >= params.min_band_coverage) {
        return Err(PreprocessError::Isolation(format!(
            "no ring reaches {:.0}% valid coverage",
            params.min_band_coverage * 100.0
        )));
    }
    let high: Vec<usize> = coverage
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= params.coverage)
        .map(|(k, _)| k)
        .collect();
    let (Some(&first), Some(&last)) = (high.first(), high.last()) else {
        return Err(PreprocessError::Isolation(format!(
            "no ring reaches {:.0}% valid coverage",
            params.coverage * 100.0
        )));
    };
    let r_outer = (last + 1) as f64;
    let r_inner = if first == 0 {
        log::warn!(
            "no firing pin hole detected; using r_inner = {} * r_outer",
            params.full_disk_inner_fraction
        );
        params.full_disk_inner_fraction * r_outer
    } else {
        first as f64
    };
    let annulus = Annulus::new(cy, cx, r_inner, r_outer)
        .map_err(|e| PreprocessError::Isolation(e.to_string()))?;

    let mut mask = scan.mask().to_vec();
    for r in 0..scan.rows() {
        for c in 0..scan.cols() {
            if !annulus.contains(r as f64, c as f64) {
                mask[r * scan.cols() + c] = false;
            }
        }
    }
    Ok((scan.with_mask(mask)?, annulus))
}

/// Square window of side `ceil(2 r_outer) + 1` around the annulus center,
/// with the annulus re-expressed in window coordinates.
pub fn crop_to_annulus(scan: &SurfaceMatrix, annulus: &Annulus) -> (SurfaceMatrix, Annulus) {
    let side = (2.0 * annulus.r_outer).ceil() as usize + 1;
    let half = (side as f64 - 1.0) / 2.0;
    let row0 = (annulus.center_row - half).round() as isize;
    let col0 = (annulus.center_col - half).round() as isize;
    let window = scan.window(row0, col0, side, side);
    let moved = Annulus {
        center_row: annulus.center_row - row0 as f64,
        center_col: annulus.center_col - col0 as f64,
        ..*annulus
    };
    (window, moved)
}

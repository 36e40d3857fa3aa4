use super::PreprocessError;
use crate::surface::SurfaceMatrix;

/// Relative pivot size below which the plane fit is considered rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Coefficients of `z = c0 + c1 * (row - row_mean) + c2 * (col - col_mean)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub row_mean: f64,
    pub col_mean: f64,
    pub coefficients: [f64; 3],
}

impl Plane {
    pub fn at(&self, row: f64, col: f64) -> f64 {
        let [c0, c1, c2] = self.coefficients;
        c0 + c1 * (row - self.row_mean) + c2 * (col - self.col_mean)
    }
}

/// Least-squares plane through the valid samples.
pub fn fit_plane(scan: &SurfaceMatrix) -> Result<Plane, PreprocessError> {
    let n = scan.valid_count();
    if n < 3 {
        return Err(PreprocessError::Leveling(format!("{n} valid samples, need >= 3")));
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
    let (row_mean, col_mean) = (sr / n as f64, sc / n as f64);

    // normal equations in centered coordinates
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for r in 0..scan.rows() {
        for c in 0..scan.cols() {
            if !scan.is_valid(r, c) {
                continue;
            }
            let x = [1.0, r as f64 - row_mean, c as f64 - col_mean];
            let z = scan.height(r, c);
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] += x[i] * x[j];
                }
                b[i] += x[i] * z;
            }
        }
    }
    let coefficients = solve3(a, b)?;
    Ok(Plane {
        row_mean,
        col_mean,
        coefficients,
    })
}

/// Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3], PreprocessError> {
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() <= RANK_TOLERANCE * scale {
            return Err(PreprocessError::Leveling(
                "valid samples are collinear (plane fit rank < 3)".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Subtracts the least-squares plane fitted over valid samples.
pub fn level_surface(scan: &SurfaceMatrix) -> Result<SurfaceMatrix, PreprocessError> {
    let plane = fit_plane(scan)?;
    let mut heights = scan.heights().to_vec();
    for r in 0..scan.rows() {
        for c in 0..scan.cols() {
            let i = scan.index(r, c);
            if scan.mask()[i] {
                heights[i] -= plane.at(r as f64, c as f64);
            }
        }
    }
    Ok(scan.with_heights(heights)?)
}

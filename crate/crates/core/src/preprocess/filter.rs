//! Mask-aware Gaussian filtering.

use super::PreprocessError;
use crate::surface::SurfaceMatrix;

/// Ratio between the standard deviation of the ISO 16610-21 Gaussian
/// weighting function and its cutoff wavelength: `sqrt(ln 2 / 2) / pi`.
pub const SIGMA_PER_CUTOFF: f64 = 0.187_390_625_129_277_6;

/// Kernel half-width in standard deviations.
const TRUNCATE: f64 = 4.0;

/// Default band-pass cutoffs (wavelengths, meters).
pub const DEFAULT_LOW_CUT: f64 = 250e-6;
pub const DEFAULT_HIGH_CUT: f64 = 16e-6;

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let half = (TRUNCATE * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Correlates each row of a row-major `rows x cols` grid with `kernel`,
/// treating samples outside the grid as zero.
fn convolve_rows(data: &[f64], rows: usize, cols: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (c, d) in dst.iter_mut().enumerate() {
            let lo = (c as isize - half).max(0) as usize;
            let hi = ((c as isize + half) as usize).min(cols - 1);
            let k0 = (lo as isize - (c as isize - half)) as usize;
            let mut acc = 0.0;
            for (v, w) in row[lo..=hi].iter().zip(&kernel[k0..]) {
                acc += v * w;
            }
            *d = acc;
        }
    }
    out
}

fn convolve_cols(data: &[f64], rows: usize, cols: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        let lo = (r as isize - half).max(0) as usize;
        let hi = ((r as isize + half) as usize).min(rows - 1);
        let k0 = (lo as isize - (r as isize - half)) as usize;
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (i, src_r) in (lo..=hi).enumerate() {
            let w = kernel[k0 + i];
            let src = &data[src_r * cols..(src_r + 1) * cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

pub(crate) fn separable(data: &[f64], rows: usize, cols: usize, kernel: &[f64]) -> Vec<f64> {
    let tmp = convolve_rows(data, rows, cols, kernel);
    convolve_cols(&tmp, rows, cols, kernel)
}

/// Normalized convolution: `G*(z m) / G*(m)` evaluated at valid samples.
/// Invalid samples stay invalid (and zero).
pub fn gaussian_smooth_masked(
    heights: &[f64],
    mask: &[bool],
    rows: usize,
    cols: usize,
    sigma: f64,
) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let weighted: Vec<f64> = heights
        .iter()
        .zip(mask)
        .map(|(&h, &m)| if m { h } else { 0.0 })
        .collect();
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let num = separable(&weighted, rows, cols, &kernel);
    let den = separable(&weights, rows, cols, &kernel);
    num.iter()
        .zip(&den)
        .zip(mask)
        .map(|((&n, &d), &m)| if m && d > 0.0 { n / d } else { 0.0 })
        .collect()
}

/// Gaussian high-pass at `low_cut` followed by a Gaussian low-pass at
/// `high_cut`. Both cutoffs are wavelengths in meters.
pub fn bandpass_filter(
    scan: &SurfaceMatrix,
    low_cut: f64,
    high_cut: f64,
) -> Result<SurfaceMatrix, PreprocessError> {
    if !(high_cut > 0.0 && low_cut > high_cut) {
        return Err(PreprocessError::CutoffOrder { low_cut, high_cut });
    }
    let (rows, cols, res) = (scan.rows(), scan.cols(), scan.resolution());
    let mask = scan.mask();
    let waviness = gaussian_smooth_masked(
        scan.heights(),
        mask,
        rows,
        cols,
        SIGMA_PER_CUTOFF * low_cut / res,
    );
    let roughness: Vec<f64> = scan
        .heights()
        .iter()
        .zip(&waviness)
        .map(|(h, w)| h - w)
        .collect();
    let smoothed = gaussian_smooth_masked(
        &roughness,
        mask,
        rows,
        cols,
        SIGMA_PER_CUTOFF * high_cut / res,
    );
    Ok(scan.with_heights(smoothed)?)
}

use super::PreprocessError;
use crate::surface::SurfaceMatrix;

/// Side of the square raster used by CMC.
pub const CMC_SIZE: usize = 224;

/// Overlap of output cell `i` (covering `[i s, (i+1) s)` with `s = n_in / n_out`)
/// with each input sample, as `(first input index, weights)`.
fn footprints(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let s = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let lo = i as f64 * s;
            let hi = (i + 1) as f64 * s;
            let first = lo.floor() as usize;
            let last = ((hi.ceil() as usize).min(n_in)).max(first + 1);
            let weights = (first..last)
                .map(|j| (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0))
                .collect();
            (first, weights)
        })
        .collect()
}

fn apply_rows(data: &[f64], cols: usize, rows_fp: &[(usize, Vec<f64>)]) -> Vec<f64> {
    let mut out = vec![0.0; rows_fp.len() * cols];
    for (o, (first, weights)) in rows_fp.iter().enumerate() {
        let dst = &mut out[o * cols..(o + 1) * cols];
        for (k, w) in weights.iter().enumerate() {
            let src = &data[(first + k) * cols..(first + k + 1) * cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

fn apply_cols(data: &[f64], rows: usize, cols: usize, cols_fp: &[(usize, Vec<f64>)]) -> Vec<f64> {
    let n_out = cols_fp.len();
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let src = &data[r * cols..(r + 1) * cols];
        for (o, (first, weights)) in cols_fp.iter().enumerate() {
            out[r * n_out + o] = weights.iter().zip(&src[*first..]).map(|(w, v)| w * v).sum();
        }
    }
    out
}

/// Mask-aware area-average downsampling. An output sample is the mean of the
/// valid input area under its footprint, and is invalid when less than half
/// of that footprint is valid.
pub fn resize_area(
    scan: &SurfaceMatrix,
    out_rows: usize,
    out_cols: usize,
) -> Result<SurfaceMatrix, PreprocessError> {
    let (rows, cols) = (scan.rows(), scan.cols());
    if rows < out_rows || cols < out_cols {
        return Err(PreprocessError::UpscaleRefused {
            rows,
            cols,
            target_rows: out_rows,
            target_cols: out_cols,
        });
    }
    let rfp = footprints(rows, out_rows);
    let cfp = footprints(cols, out_cols);
    let masked: Vec<f64> = scan
        .heights()
        .iter()
        .zip(scan.mask())
        .map(|(&h, &m)| if m { h } else { 0.0 })
        .collect();
    let weights: Vec<f64> = scan.mask().iter().map(|&m| f64::from(u8::from(m))).collect();
    let num = apply_cols(&apply_rows(&masked, cols, &rfp), out_rows, cols, &cfp);
    let den = apply_cols(&apply_rows(&weights, cols, &rfp), out_rows, cols, &cfp);
    let area = (rows as f64 / out_rows as f64) * (cols as f64 / out_cols as f64);

    let mut heights = vec![0.0; out_rows * out_cols];
    let mut mask = vec![false; out_rows * out_cols];
    for i in 0..heights.len() {
        if den[i] >= 0.5 * area * (1.0 - 1e-12) && den[i] > 0.0 {
            heights[i] = num[i] / den[i];
            mask[i] = true;
        }
    }
    let resolution = scan.resolution() * rows as f64 / out_rows as f64;
    Ok(SurfaceMatrix::new(out_rows, out_cols, resolution, heights, mask)?)
}

pub fn resize_to_224(scan: &SurfaceMatrix) -> Result<SurfaceMatrix, PreprocessError> {
    resize_area(scan, CMC_SIZE, CMC_SIZE)
}

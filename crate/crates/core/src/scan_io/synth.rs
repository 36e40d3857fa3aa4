//! Deterministic synthetic breech-face scans.
//!
//! Each gun owns a random "signature" field. A casing fired from that gun is
//! the signature seen through an annular aperture (casing rim outside, firing
//! pin hole inside), rotated and translated by a random mounting error, plus
//! fresh per-firing noise and a random tilt/curvature form. Heights are in
//! meters, with the signature at 1 µm RMS.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ScanIoError, ScanRecord};
use crate::preprocess::filter::{gaussian_kernel, separable};
use crate::surface::SurfaceMatrix;

/// Outer (casing edge) and inner (firing pin hole) radii as fractions of the
/// grid side.
pub(crate) const OUTER_RADIUS_FRACTION: f64 = 0.42;
pub(crate) const INNER_RADIUS_FRACTION: f64 = 0.12;

const SIGNATURE_RMS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub guns: usize,
    pub casings_per_gun: usize,
    /// Samples per side of the square raw scan.
    pub grid_size: usize,
    /// Correlation length of the gun signature, in samples.
    pub signature_smoothness: f64,
    /// Per-firing noise std relative to the signature std.
    pub noise_sigma: f64,
    /// Degrees.
    pub max_rotation: f64,
    /// Samples, per axis.
    pub max_translation: f64,
    pub seed: u64,
    /// Lateral sample spacing in meters.
    pub resolution: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            guns: 12,
            casings_per_gun: 8,
            grid_size: 300,
            signature_smoothness: 2.0,
            noise_sigma: 0.3,
            max_rotation: 15.0,
            max_translation: 8.0,
            seed: 0,
            resolution: 3.125e-6,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), ScanIoError> {
        let fail = |m: String| Err(ScanIoError::Params(m));
        if self.guns < 1 {
            return fail("guns must be >= 1".into());
        }
        if self.casings_per_gun < 2 {
            return fail("casings_per_gun must be >= 2 so every casing has a same-gun partner".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.signature_smoothness > 0.0) {
            return fail("signature_smoothness must be positive".into());
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return fail("resolution must be positive".into());
        }
        if !(self.max_rotation >= 0.0 && self.max_translation >= 0.0) {
            return fail("max_rotation and max_translation must be >= 0".into());
        }
        if self.grid_size < 32 {
            return fail("grid_size must be >= 32".into());
        }
        let half = self.grid_size as f64 / 2.0;
        let reach = OUTER_RADIUS_FRACTION * self.grid_size as f64 + self.max_translation * 2f64.sqrt();
        if reach + 1.0 > half {
            return fail(format!(
                "max_translation {} pushes the casing outside a {}-sample grid",
                self.max_translation, self.grid_size
            ));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Smoothed white noise, zero mean, unit population std.
fn smooth_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize, smoothness: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    let kernel = gaussian_kernel(smoothness);
    let num = separable(&white, rows, cols, &kernel);
    // edge renormalization keeps the variance roughly flat up to the border
    let ones = vec![1.0; rows * cols];
    let den = separable(&ones, rows, cols, &kernel);
    let mut field: Vec<f64> = num.iter().zip(&den).map(|(n, d)| n / d.sqrt()).collect();
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    field.iter_mut().for_each(|v| *v = (*v - mean) / std);
    field
}

fn bilinear(field: &[f64], rows: usize, cols: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (rows - 1) as f64);
    let x = x.clamp(0.0, (cols - 1) as f64);
    let r0 = (y.floor() as usize).min(rows - 2);
    let c0 = (x.floor() as usize).min(cols - 2);
    let fy = y - r0 as f64;
    let fx = x - c0 as f64;
    let at = |r: usize, c: usize| field[r * cols + c];
    (1.0 - fy) * ((1.0 - fx) * at(r0, c0) + fx * at(r0, c0 + 1))
        + fy * ((1.0 - fx) * at(r0 + 1, c0) + fx * at(r0 + 1, c0 + 1))
}

/// A fully valid, band-limited random surface (1 µm RMS).
pub fn band_limited_surface(
    rows: usize,
    cols: usize,
    smoothness: f64,
    seed: u64,
    resolution: f64,
) -> SurfaceMatrix {
    let mut rng = stream_rng(seed, u64::MAX);
    let field = smooth_noise(&mut rng, rows, cols, smoothness);
    let heights = field.into_iter().map(|v| v * SIGNATURE_RMS).collect();
    SurfaceMatrix::from_heights(rows, cols, resolution, heights).expect("valid shape")
}

/// Generates `guns x casings_per_gun` labelled scans. The output is a pure
/// function of `params`: every gun and casing draws from its own RNG stream,
/// so the thread count does not matter.
pub fn generate_synthetic_dataset(params: &SynthParams) -> Result<Vec<ScanRecord>, ScanIoError> {
    params.validate()?;
    let n = params.grid_size;
    let signatures: Vec<Vec<f64>> = (0..params.guns)
        .into_par_iter()
        .map(|g| {
            let mut rng = stream_rng(params.seed, (g as u64 + 1) << 32);
            smooth_noise(&mut rng, n, n, params.signature_smoothness)
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..params.guns)
        .flat_map(|g| (0..params.casings_per_gun).map(move |c| (g, c)))
        .collect();
    jobs.par_iter()
        .map(|&(g, c)| {
            let mut rng = stream_rng(params.seed, ((g as u64 + 1) << 32) | (c as u64 + 1));
            let surface = fire_casing(&signatures[g], params, &mut rng)?;
            ScanRecord::new(
                surface,
                format!("G{:03}", g + 1),
                format!("G{:03}-C{:02}", g + 1, c + 1),
                format!("synthetic:seed={}:gun={}:casing={}", params.seed, g + 1, c + 1),
            )
        })
        .collect()
}

fn fire_casing(
    signature: &[f64],
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<SurfaceMatrix, ScanIoError> {
    let n = params.grid_size;
    let center = (n as f64 - 1.0) / 2.0;
    let angle = rng.gen_range(-1.0..=1.0) * params.max_rotation.to_radians();
    let ty = rng.gen_range(-1.0..=1.0) * params.max_translation;
    let tx = rng.gen_range(-1.0..=1.0) * params.max_translation;
    // form: tilt up to 2 µm across the scan plus a bowl up to 1 µm at the rim
    let tilt_r = rng.gen_range(-1.0..=1.0) * 2e-6 / n as f64;
    let tilt_c = rng.gen_range(-1.0..=1.0) * 2e-6 / n as f64;
    let bowl = rng.gen_range(-1.0..=1.0) * 1e-6;
    let offset = rng.gen_range(-5e-6..=5e-6);

    let (cy, cx) = (center + ty, center + tx);
    let r_outer = OUTER_RADIUS_FRACTION * n as f64;
    let r_inner = INNER_RADIUS_FRACTION * n as f64;
    let (sin, cos) = angle.sin_cos();

    let mut heights = vec![0.0; n * n];
    let mut mask = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let rho = (dy * dy + dx * dx).sqrt();
            if rho < r_inner || rho > r_outer {
                continue;
            }
            // the casing frame is the gun frame rotated by `angle`
            let sx = cos * dx + sin * dy + center;
            let sy = -sin * dx + cos * dy + center;
            let sig = bilinear(signature, n, n, sy, sx);
            let noise: f64 = rng.sample(StandardNormal);
            let form = offset
                + tilt_r * r as f64
                + tilt_c * c as f64
                + bowl * (rho / r_outer).powi(2);
            let i = r * n + c;
            heights[i] = (sig + params.noise_sigma * noise) * SIGNATURE_RMS + form;
            mask[i] = true;
        }
    }
    Ok(SurfaceMatrix::new(n, n, params.resolution, heights, mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small() -> SynthParams {
        SynthParams {
            guns: 3,
            casings_per_gun: 4,
            grid_size: 64,
            max_translation: 2.0,
            ..SynthParams::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(data.len(), 12);
        let mut per_gun: BTreeMap<&str, usize> = BTreeMap::new();
        for rec in &data {
            *per_gun.entry(rec.gun_id.as_str()).or_default() += 1;
        }
        assert_eq!(per_gun.len(), 3);
        assert!(per_gun.values().all(|&v| v == 4));
    }

    #[test]
    fn seeded_determinism() {
        let a = generate_synthetic_dataset(&small()).unwrap();
        let b = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| generate_synthetic_dataset(&small()).unwrap());
        assert_eq!(a, c);
        let d = generate_synthetic_dataset(&SynthParams { seed: 1, ..small() }).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn parameter_validation() {
        assert!(SynthParams { casings_per_gun: 1, ..small() }.validate().is_err());
        assert!(SynthParams { guns: 0, ..small() }.validate().is_err());
        assert!(SynthParams { noise_sigma: -0.1, ..small() }.validate().is_err());
        assert!(SynthParams { max_translation: 20.0, ..small() }.validate().is_err());
    }

    #[test]
    fn annulus_has_a_hole() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        let s = &data[0].surface;
        let frac = s.valid_fraction();
        let expected = std::f64::consts::PI
            * (OUTER_RADIUS_FRACTION.powi(2) - INNER_RADIUS_FRACTION.powi(2));
        assert!((frac - expected).abs() < 0.05, "{frac} vs {expected}");
    }
}

use breechmark::preprocess::{
    bandpass_filter, level_surface, normalize_nonzero, preprocess_scan, resize_to_224, to_polar,
    Annulus, PolarImage, PreprocessParams, ANGLES, RADII,
};
use breechmark::scan_io::{band_limited_surface, generate_synthetic_dataset, SynthParams};
use breechmark::SurfaceMatrix;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Least-squares fit of `columns` to `y`, returned as fitted values.
fn lstsq_fit(columns: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(y.len(), columns.len(), |i, j| columns[j][i]);
    let b = DVector::from_column_slice(y);
    let coef = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
    ((&a * &coef).iter().copied().collect(), coef)
}

#[test]
fn leveling_matches_normal_equations_oracle() {
    let (rows, cols) = (40, 50);
    let bump = |r: f64, c: f64| 3.0 * (-((r - 15.0).powi(2) + (c - 30.0).powi(2)) / 40.0).exp();
    let mut heights = Vec::new();
    let mut bump_vals = Vec::new();
    let (mut col_r, mut col_c) = (Vec::new(), Vec::new());
    for r in 0..rows {
        for c in 0..cols {
            let (rf, cf) = (r as f64, c as f64);
            bump_vals.push(bump(rf, cf));
            heights.push(2.0 + 0.1 * rf - 0.05 * cf + bump(rf, cf));
            col_r.push(rf);
            col_c.push(cf);
        }
    }
    let ones = vec![1.0; rows * cols];
    let (fit, _) = lstsq_fit(&[ones, col_r, col_c], &bump_vals);
    let s = SurfaceMatrix::from_heights(rows, cols, 1.0, heights).unwrap();
    let out = level_surface(&s).unwrap();
    for ((o, b), f) in out.heights().iter().zip(&bump_vals).zip(&fit) {
        assert!((o - (b - f)).abs() < 1e-9);
    }
}

fn fitted_amplitude(values: &[f64], wavelength_px: f64, from: usize, to: usize) -> f64 {
    let w = 2.0 * std::f64::consts::PI / wavelength_px;
    let xs: Vec<f64> = (from..to).map(|i| i as f64).collect();
    let sin: Vec<f64> = xs.iter().map(|x| (w * x).sin()).collect();
    let cos: Vec<f64> = xs.iter().map(|x| (w * x).cos()).collect();
    let (_, coef) = lstsq_fit(&[sin, cos, vec![1.0; xs.len()]], &values[from..to]);
    coef[0].hypot(coef[1])
}

fn sinusoid_response(wavelength: f64) -> f64 {
    let res = 3.125e-6;
    let (rows, cols) = (9, 1400);
    let px = wavelength / res;
    let heights = (0..rows * cols)
        .map(|i| 1e-6 * (2.0 * std::f64::consts::PI * (i % cols) as f64 / px).sin())
        .collect();
    let s = SurfaceMatrix::from_heights(rows, cols, res, heights).unwrap();
    let out = bandpass_filter(&s, 250e-6, 16e-6).unwrap();
    let mid = &out.heights()[4 * cols..5 * cols];
    fitted_amplitude(mid, px, 200, cols - 200) / 1e-6
}

#[test]
fn bandpass_keeps_passband_and_kills_waviness() {
    let pass = sinusoid_response(60e-6);
    assert!((pass - 1.0).abs() < 0.2, "pass-band gain {pass}");
    let waviness = sinusoid_response(1000e-6);
    assert!(waviness < 0.1, "waviness gain {waviness}");
}

#[test]
fn resize_matches_block_means() {
    let heights = (0..448 * 448).map(|i| (i / 448) as f64).collect();
    let s = SurfaceMatrix::from_heights(448, 448, 1e-6, heights).unwrap();
    let out = resize_to_224(&s).unwrap();
    for r in 0..224 {
        for c in 0..224 {
            let block = [2 * r, 2 * r + 1].iter().map(|&x| x as f64).sum::<f64>() / 2.0;
            assert!((out.height(r, c) - block).abs() < 1e-12);
        }
    }
}

/// `new(r, c) = old(c, n-1-r)`: a counterclockwise quarter turn as displayed.
fn quarter_turn(s: &SurfaceMatrix) -> SurfaceMatrix {
    let n = s.rows();
    let heights = (0..n * n).map(|i| s.height(i % n, n - 1 - i / n)).collect();
    SurfaceMatrix::from_heights(n, n, s.resolution(), heights).unwrap()
}

fn std_of(values: &[f64]) -> f64 {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

#[test]
fn quarter_turn_is_a_cyclic_shift() {
    let s = band_limited_surface(201, 201, 30.0, 7, 1e-6);
    let a = Annulus::new(100.0, 100.0, 20.0, 90.0).unwrap();
    let p = to_polar(&s, &a).unwrap();
    let q = to_polar(&quarter_turn(&s), &a).unwrap();
    let shifted = p.roll(94);
    let tol = 0.05 * std_of(p.values());
    let worst = q
        .values()
        .iter()
        .zip(shifted.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst < tol, "max diff {worst} vs {tol}");
}

/// A smooth analytic field, so that rotated copies need no resampling.
fn analytic(rot_deg: f64, n: usize) -> SurfaceMatrix {
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = rot_deg.to_radians().sin_cos();
    let heights = (0..n * n)
        .map(|i| {
            let (dy, dx) = ((i / n) as f64 - c, (i % n) as f64 - c);
            // inverse rotation (visual counterclockwise, rows down)
            let x = cos * dx - sin * dy;
            let y = sin * dx + cos * dy;
            (x / 23.0).sin() + (0.7 * y / 19.0 + x / 41.0).cos() + (y / 31.0).sin() * (x / 37.0).cos()
        })
        .collect();
    SurfaceMatrix::from_heights(n, n, 1.0, heights).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn rotation_by_angular_steps_commutes_with_polar(k in 1usize..377) {
        let n = 161;
        let a = Annulus::new(80.0, 80.0, 15.0, 75.0).unwrap();
        let base = to_polar(&analytic(0.0, n), &a).unwrap();
        let turned = to_polar(&analytic(k as f64 * 360.0 / ANGLES as f64, n), &a).unwrap();
        let tol = 0.05 * std_of(base.values());
        let expected = base.roll(k as isize);
        for (x, y) in turned.values().iter().zip(expected.values()) {
            prop_assert!((x - y).abs() < tol);
        }
    }

    #[test]
    fn normalized_statistics(values in prop::collection::vec(-1e3f64..1e3, ANGLES * RADII)) {
        let mut values = values;
        for v in values.iter_mut().step_by(7) {
            *v = 0.0;
        }
        let img = PolarImage::from_values(values).unwrap();
        let out = normalize_nonzero(&img).unwrap();
        let valid: Vec<f64> = out.values().iter().zip(out.mask()).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
        let mean = valid.iter().sum::<f64>() / valid.len() as f64;
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((std_of(&valid) - 1.0).abs() < 1e-6);
        prop_assert!(out.values().iter().zip(out.mask()).all(|(&v, &m)| m || v == 0.0));
        let again = normalize_nonzero(&out).unwrap();
        for (x, y) in again.values().iter().zip(out.values()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

fn small_dataset() -> Vec<breechmark::scan_io::ScanRecord> {
    generate_synthetic_dataset(&SynthParams {
        guns: 3,
        casings_per_gun: 3,
        seed: 11,
        ..SynthParams::default()
    })
    .unwrap()
}

#[test]
fn pipeline_shapes_determinism_and_monotone_mask() {
    let data = small_dataset();
    let params = PreprocessParams::default();
    let a = preprocess_scan(&data[0].surface, &params).unwrap();
    let b = preprocess_scan(&data[0].surface, &params).unwrap();
    assert_eq!((a.cmc.rows(), a.cmc.cols()), (224, 224));
    assert_eq!(a.polar.values().len(), ANGLES * RADII);
    for (x, y) in a.polar.values().iter().zip(b.polar.values()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    // the valid breech face occupies no more of the 224 raster than the
    // annulus allows
    let ring = std::f64::consts::PI * (a.annulus.r_outer.powi(2) - a.annulus.r_inner.powi(2));
    assert!(a.cmc.valid_count() as f64 <= ring * 1.05);
    assert!(a.annulus.fits_within(224, 224));
    let raw_ratio = 0.12 / 0.42;
    assert!((a.annulus.r_inner / a.annulus.r_outer - raw_ratio).abs() < 0.03);
}

fn best_shift_pearson(p: &PolarImage, q: &PolarImage) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for k in 0..ANGLES as isize {
        let r = q.roll(k);
        let pairs: Vec<(f64, f64)> = p
            .values()
            .iter()
            .zip(r.values())
            .zip(p.mask().iter().zip(r.mask()))
            .filter(|(_, (&m1, &m2))| m1 && m2)
            .map(|((&x, &y), _)| (x, y))
            .collect();
        let n = pairs.len() as f64;
        let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in &pairs {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx).powi(2);
            syy += (y - my).powi(2);
        }
        best = best.max(sxy / (sxx * syy).sqrt());
    }
    best
}

#[test]
fn same_gun_polar_images_correlate_more() {
    let data = small_dataset();
    let polar: Vec<PolarImage> = data
        .iter()
        .map(|r| preprocess_scan(&r.surface, &PreprocessParams::default()).unwrap().polar)
        .collect();
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for i in 0..data.len() {
        for j in i + 1..data.len() {
            let c = best_shift_pearson(&polar[i], &polar[j]);
            if data[i].gun_id == data[j].gun_id {
                same.push(c);
            } else {
                diff.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&same) > mean(&diff) + 0.1, "same {same:?} diff {diff:?}");
}

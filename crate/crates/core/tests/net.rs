use breechmark::net::gradcheck::{check_layers, check_model, check_supcon};
use breechmark::net::{build_model, ModelConfig, Tensor, Variant};
use breechmark::preprocess::{PolarImage, ANGLES, RADII};
use breechmark::scan_io::band_limited_surface;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_layer_matches_finite_differences() {
    for seed in 0..20 {
        for c in check_layers(seed, H).unwrap() {
            assert!(c.max_rel_error < TOL, "seed {seed}: {c:?}");
        }
    }
}

#[test]
fn supcon_matches_finite_differences() {
    for seed in 0..20 {
        let c = check_supcon(seed, H);
        assert!(c.max_rel_error < TOL, "seed {seed}: {c:?}");
    }
}

#[test]
fn whole_network_matches_finite_differences() {
    let (mut skipped, mut entries) = (0, 0);
    for seed in 0..20 {
        let variant = Variant::ALL[seed as usize % 4];
        for c in check_model(variant, seed, H, 6).unwrap() {
            assert!(c.max_rel_error < TOL, "seed {seed}: {c:?}");
            skipped += c.skipped;
            entries += c.entries;
        }
    }
    // steps that cross a ReLU kink are left out, but they must stay rare
    assert!(skipped * 20 < entries * 3, "{skipped} of {entries} entries skipped");
}

fn polar(seed: u64) -> PolarImage {
    let s = band_limited_surface(ANGLES, RADII, 2.0, seed, 1.0);
    PolarImage::from_values(s.heights().iter().map(|v| v * 1e6).collect()).unwrap()
}

#[test]
fn angular_shifts_leave_embeddings_unchanged() {
    let model = build_model(&ModelConfig { width: 4, ..ModelConfig::default() }, 1).unwrap();
    for (seed, shift) in [(0, 1), (1, 94), (2, -37), (3, 200)] {
        let img = polar(seed);
        let a = model.embed(&img).unwrap();
        let b = model.embed(&img.roll(shift)).unwrap();
        let diff = a.vector.iter().zip(&b.vector).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "shift {shift}: {diff}");
    }
}

#[test]
fn architecture_table() {
    let counts = [
        (Variant::Reference, 11),
        (Variant::DoubleBlock, 20),
        (Variant::BlockDepth2, 8),
        (Variant::BlockDepth4, 14),
    ];
    for (variant, layers) in counts {
        let cfg = |width| ModelConfig { variant, width, ..ModelConfig::default() };
        assert_eq!(build_model(&cfg(8), 0).unwrap().layer_count(), layers);
        let params: Vec<f64> = [8, 16, 32, 64]
            .iter()
            .map(|&w| build_model(&cfg(w), 0).unwrap().count_parameters() as f64)
            .collect();
        for pair in params.windows(2) {
            let ratio = pair[1] / pair[0];
            assert!((3.5..=4.1).contains(&ratio), "{variant}: {ratio}");
        }
    }
    assert_eq!(build_model(&ModelConfig::default(), 0).unwrap().count_parameters(), 40_816);
}

#[test]
fn forward_rejects_bad_input() {
    let model = build_model(&ModelConfig { width: 2, ..ModelConfig::default() }, 0).unwrap();
    assert!(model.forward(&Tensor::zeros(vec![2, 8, 8])).is_err());
    assert!(model.forward(&Tensor::zeros(vec![8, 8])).is_err());
}

use std::f64::consts::PI;
use std::path::Path;

use super::{Annulus, PreprocessError};
use crate::scan_io::internal::{atomic_write, pack_bits, unpack_bits, Reader};
use crate::scan_io::ScanIoError;
use crate::surface::SurfaceMatrix;

/// Angular samples over a full turn.
pub const ANGLES: usize = 377;
/// Radial samples from `r_inner` to `r_outer`.
pub const RADII: usize = 60;

const POLAR_MAGIC: &[u8; 4] = b"BMKP";
const POLAR_VERSION: u32 = 1;

/// A 377 x 60 polar image, angle-major. Invalid samples hold 0.0 and are
/// tracked by an explicit mask, since a valid sample may also be exactly 0
/// after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarImage {
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl PolarImage {
    pub fn new(mut values: Vec<f64>, mask: Vec<bool>) -> Result<Self, PreprocessError> {
        if values.len() != ANGLES * RADII || mask.len() != ANGLES * RADII {
            return Err(PreprocessError::PolarShape {
                values: values.len(),
                mask: mask.len(),
            });
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if !m || !v.is_finite() {
                *v = 0.0;
            }
        }
        let mask = mask
            .iter()
            .zip(&values)
            .map(|(&m, v)| m && v.is_finite())
            .collect();
        Ok(Self { values, mask })
    }

    /// Treats every nonzero entry as valid.
    pub fn from_values(values: Vec<f64>) -> Result<Self, PreprocessError> {
        let mask = values.iter().map(|&v| v != 0.0 && v.is_finite()).collect();
        Self::new(values, mask)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn at(&self, angle: usize, radius: usize) -> f64 {
        self.values[angle * RADII + radius]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Rolls the angular axis: `out[a] = self[a - shift mod 377]`.
    pub fn roll(&self, shift: isize) -> Self {
        let k = shift.rem_euclid(ANGLES as isize) as usize;
        let mut values = vec![0.0; self.values.len()];
        let mut mask = vec![false; self.mask.len()];
        for a in 0..ANGLES {
            let dst = ((a + k) % ANGLES) * RADII;
            values[dst..dst + RADII].copy_from_slice(&self.values[a * RADII..(a + 1) * RADII]);
            mask[dst..dst + RADII].copy_from_slice(&self.mask[a * RADII..(a + 1) * RADII]);
        }
        Self { values, mask }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.values.len() + self.mask.len() / 8 + 1);
        buf.extend_from_slice(POLAR_MAGIC);
        buf.extend_from_slice(&POLAR_VERSION.to_le_bytes());
        buf.extend_from_slice(&(ANGLES as u32).to_le_bytes());
        buf.extend_from_slice(&(RADII as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&pack_bits(&self.mask));
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ScanIoError> {
        let mut rd = Reader::new(bytes);
        let magic = rd.magic()?;
        if &magic != POLAR_MAGIC {
            return Err(ScanIoError::BadMagic {
                expected: "BMKP",
                found: magic,
            });
        }
        let version = rd.u32("version")?;
        if version != POLAR_VERSION {
            return Err(ScanIoError::Version {
                found: version,
                expected: POLAR_VERSION,
            });
        }
        let angles = rd.u32("angles")? as usize;
        let radii = rd.u32("radii")? as usize;
        if (angles, radii) != (ANGLES, RADII) {
            return Err(ScanIoError::UnsupportedGeometry(format!(
                "polar grid {angles}x{radii}, expected {ANGLES}x{RADII}"
            )));
        }
        let n = ANGLES * RADII;
        let values = rd.f64_vec(n, "values")?;
        let mask = unpack_bits(rd.take(n.div_ceil(8), "mask")?, n);
        rd.finish()?;
        Ok(Self { values, mask })
    }

    pub fn write(&self, path: &Path) -> Result<(), ScanIoError> {
        atomic_write(path, &self.encode()).map_err(|e| ScanIoError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, ScanIoError> {
        let bytes = std::fs::read(path).map_err(|e| ScanIoError::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Sample position `(row, col)` of polar cell `(a, r)`.
pub fn polar_position(annulus: &Annulus, a: usize, r: usize) -> (f64, f64) {
    let theta = 2.0 * PI * a as f64 / ANGLES as f64;
    let rho = annulus.r_inner + (r as f64 + 0.5) * (annulus.r_outer - annulus.r_inner) / RADII as f64;
    let (sin, cos) = theta.sin_cos();
    (annulus.center_row - rho * sin, annulus.center_col + rho * cos)
}

/// Bilinear value at a fractional position, or `None` when any neighbor
/// carrying nonzero weight is invalid or off the raster.
pub(crate) fn bilinear_valid(scan: &SurfaceMatrix, y: f64, x: f64) -> Option<f64> {
    let (r0, c0) = (y.floor(), x.floor());
    let (fy, fx) = (y - r0, x - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let mut acc = 0.0;
    for (dr, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dc, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wy * wx;
            if w == 0.0 {
                continue;
            }
            acc += w * scan.get(r0 + dr, c0 + dc)?;
        }
    }
    Some(acc)
}

/// Resamples the annulus onto the 377 x 60 polar grid (not normalized).
/// Angles run counterclockwise as displayed, with rows pointing down.
pub fn to_polar(scan: &SurfaceMatrix, annulus: &Annulus) -> Result<PolarImage, PreprocessError> {
    if !annulus.fits_within(scan.rows(), scan.cols()) {
        return Err(PreprocessError::Annulus(format!(
            "annulus {annulus:?} does not fit a {}x{} raster",
            scan.rows(),
            scan.cols()
        )));
    }
    let mut values = vec![0.0; ANGLES * RADII];
    let mut mask = vec![false; ANGLES * RADII];
    for a in 0..ANGLES {
        for r in 0..RADII {
            let (y, x) = polar_position(annulus, a, r);
            if let Some(v) = bilinear_valid(scan, y, x) {
                values[a * RADII + r] = v;
                mask[a * RADII + r] = true;
            }
        }
    }
    PolarImage::new(values, mask)
}

/// Maps valid entries to zero mean and unit population std; invalid entries
/// stay 0.
pub fn normalize_nonzero(img: &PolarImage) -> Result<PolarImage, PreprocessError> {
    let n = img.valid_count();
    if n < 2 {
        return Err(PreprocessError::Normalization(format!("{n} valid entries, need >= 2")));
    }
    let valid = || img.values.iter().zip(&img.mask).filter(|(_, &m)| m).map(|(v, _)| *v);
    let mean = valid().sum::<f64>() / n as f64;
    let var = valid().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(PreprocessError::Normalization("valid entries have zero spread".into()));
    }
    let values = img
        .values
        .iter()
        .zip(&img.mask)
        .map(|(&v, &m)| if m { (v - mean) / std } else { 0.0 })
        .collect();
    Ok(PolarImage {
        values,
        mask: img.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_mask_image(values: Vec<f64>) -> PolarImage {
        let mask = vec![true; values.len()];
        PolarImage::new(values, mask).unwrap()
    }

    #[test]
    fn constant_surface_gives_constant_polar() {
        let s = SurfaceMatrix::filled(101, 101, 1.0, 5.0).unwrap();
        let a = Annulus::new(50.0, 50.0, 10.0, 50.0).unwrap();
        let p = to_polar(&s, &a).unwrap();
        assert_eq!(p.values().len(), ANGLES * RADII);
        assert!(p.values().iter().all(|v| (v - 5.0).abs() < 1e-9));
        assert_eq!(p.valid_count(), ANGLES * RADII);
    }

    #[test]
    fn invalid_neighbor_invalidates_sample() {
        let mut mask = vec![true; 101 * 101];
        mask[50 * 101 + 80] = false;
        let s = SurfaceMatrix::new(101, 101, 1.0, vec![1.0; 101 * 101], mask).unwrap();
        let a = Annulus::new(50.0, 50.0, 10.0, 50.0).unwrap();
        let p = to_polar(&s, &a).unwrap();
        assert!(p.valid_count() < ANGLES * RADII);
        assert!(p.values().iter().zip(p.mask()).all(|(&v, &m)| m || v == 0.0));
    }

    #[test]
    fn annulus_outside_raster_rejected() {
        let s = SurfaceMatrix::filled(50, 50, 1.0, 0.0).unwrap();
        let a = Annulus::new(25.0, 25.0, 5.0, 40.0).unwrap();
        assert!(to_polar(&s, &a).is_err());
    }

    #[test]
    fn normalize_three_values() {
        let mut values = vec![0.0; ANGLES * RADII];
        values[..3].copy_from_slice(&[1.0, 2.0, 3.0]);
        let img = PolarImage::from_values(values).unwrap();
        let out = normalize_nonzero(&img).unwrap();
        let z = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((out.values()[0] + z).abs() < 1e-12);
        assert_eq!(out.values()[1], 0.0);
        assert!(out.mask()[1]);
        assert!((out.values()[2] - z).abs() < 1e-12);
        // normalizing again keeps the middle sample valid
        let again = normalize_nonzero(&out).unwrap();
        assert!(again.values().iter().zip(out.values()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn normalize_rejects_degenerate() {
        let zero = PolarImage::from_values(vec![0.0; ANGLES * RADII]).unwrap();
        assert!(matches!(normalize_nonzero(&zero), Err(PreprocessError::Normalization(_))));
        let flat = full_mask_image(vec![2.0; ANGLES * RADII]);
        assert!(normalize_nonzero(&flat).is_err());
    }

    #[test]
    fn roll_wraps() {
        let img = full_mask_image((0..ANGLES * RADII).map(|i| (i / RADII) as f64 + 1.0).collect());
        let rolled = img.roll(5);
        assert_eq!(rolled.at(5, 0), 1.0);
        assert_eq!(rolled.at(0, 7), (ANGLES - 5) as f64 + 1.0);
        assert_eq!(rolled.roll(-5), img);
    }

    #[test]
    fn bmkp_round_trip() {
        let mut mask = vec![true; ANGLES * RADII];
        mask[17] = false;
        let img = PolarImage::new((0..ANGLES * RADII).map(|i| i as f64 * 0.5 - 3.0).collect(), mask).unwrap();
        let back = PolarImage::decode(&img.encode()).unwrap();
        assert_eq!(back, img);
        let mut bytes = img.encode();
        bytes.truncate(100);
        assert!(PolarImage::decode(&bytes).is_err());
    }
}

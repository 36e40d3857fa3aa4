//! From a raw scan to the two images the comparison methods consume: the
//! 224 x 224 breech-face raster used by CMC and the normalized 377 x 60
//! polar image fed to the network.

pub mod filter;
mod isolate;
mod level;
pub(crate) mod polar;
mod resize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::surface::{SurfaceError, SurfaceMatrix};

pub use filter::{bandpass_filter, DEFAULT_HIGH_CUT, DEFAULT_LOW_CUT};
pub use isolate::{crop_to_annulus, isolate_breech_face, Annulus, IsolationParams};
pub use level::{fit_plane, level_surface, Plane};
pub use polar::{normalize_nonzero, polar_position, to_polar, PolarImage, ANGLES, RADII};
pub use resize::{resize_area, resize_to_224, CMC_SIZE};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("leveling failed: {0}")]
    Leveling(String),
    #[error("breech face isolation failed: {0}")]
    Isolation(String),
    #[error("band-pass needs low_cut > high_cut > 0, got low_cut={low_cut} high_cut={high_cut}")]
    CutoffOrder { low_cut: f64, high_cut: f64 },
    #[error("refusing to upscale {rows}x{cols} to {target_rows}x{target_cols}")]
    UpscaleRefused {
        rows: usize,
        cols: usize,
        target_rows: usize,
        target_cols: usize,
    },
    #[error("invalid annulus: {0}")]
    Annulus(String),
    #[error("polar image needs {} values and mask bits, got {values} and {mask}", ANGLES * RADII)]
    PolarShape { values: usize, mask: usize },
    #[error("normalization failed: {0}")]
    Normalization(String),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessParams {
    /// High-pass cutoff wavelength, meters.
    pub low_cut: f64,
    /// Low-pass cutoff wavelength, meters.
    pub high_cut: f64,
    pub isolation: IsolationParams,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            low_cut: DEFAULT_LOW_CUT,
            high_cut: DEFAULT_HIGH_CUT,
            isolation: IsolationParams::default(),
        }
    }
}

/// Both outputs of the pipeline for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedScan {
    /// Leveled, band-passed, breech-face-only 224 x 224 raster.
    pub cmc: SurfaceMatrix,
    /// Annulus in `cmc` coordinates.
    pub annulus: Annulus,
    /// Normalized polar image.
    pub polar: PolarImage,
}

/// level -> isolate -> crop -> band-pass -> resize -> polar -> normalize.
pub fn preprocess_scan(
    scan: &SurfaceMatrix,
    params: &PreprocessParams,
) -> Result<PreprocessedScan, PreprocessError> {
    let leveled = level_surface(scan)?;
    let (isolated, annulus) = isolate_breech_face(&leveled, &params.isolation)?;
    let (cropped, annulus) = crop_to_annulus(&isolated, &annulus);
    let filtered = bandpass_filter(&cropped, params.low_cut, params.high_cut)?;
    let cmc = resize_to_224(&filtered)?;
    let scale = CMC_SIZE as f64 / filtered.rows() as f64;
    // area resampling maps pixel centers as (x + 0.5) s - 0.5
    let annulus = Annulus::new(
        (annulus.center_row + 0.5) * scale - 0.5,
        (annulus.center_col + 0.5) * scale - 0.5,
        annulus.r_inner * scale,
        annulus.r_outer * scale,
    )?;
    let polar = normalize_nonzero(&to_polar(&cmc, &annulus)?)?;
    Ok(PreprocessedScan { cmc, annulus, polar })
}

//! Cartridge-casing breech-face comparison: scan ingestion, preprocessing,
//! a rotation-equivariant residual network trained with a supervised
//! contrastive loss, the Congruent Matching Cells baseline, and ROC-based
//! evaluation.

pub mod cmc;
pub mod metrics;
pub mod net;
pub mod preprocess;
pub mod scan_io;
pub mod supcon;
pub mod surface;
pub mod trainer;

pub use surface::{SurfaceError, SurfaceMatrix};

//! Congruent Matching Cells and High CMC comparison of preprocessed
//! breech-face rasters.

mod ncc;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{format_score, Method, MetricsError, ScoreSet, ScoredPair};
use crate::preprocess::polar::bilinear_valid;
use crate::scan_io::ScanRecord;
use crate::surface::{SurfaceError, SurfaceMatrix};

pub use ncc::{CellSpectra, Correlator, LagMatch};

#[derive(Debug, Error)]
pub enum CmcError {
    #[error("invalid CMC parameters: {0}")]
    Params(String),
    #[error("grid {grid} does not divide a {rows}x{cols} raster")]
    Partition { grid: usize, rows: usize, cols: usize },
    #[error("scan shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("scan has fewer than two valid samples")]
    Empty,
    #[error("need at least 2 scans, got {0}")]
    TooFewScans(usize),
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranslationUnit {
    /// `t_x`, `t_y` are fractions of the cell side.
    CellFraction,
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmcParams {
    pub t_x: f64,
    pub t_y: f64,
    pub translation_unit: TranslationUnit,
    /// Degrees.
    pub t_theta: f64,
    pub t_ccf: f64,
    /// Cells per side.
    pub grid: usize,
    /// Trial rotations in degrees, strictly increasing.
    pub theta_grid: Vec<f64>,
    pub min_valid_fraction: f64,
    /// Translation search radius around the nominal cell position, samples.
    pub search_margin: usize,
    /// Lags whose overlap is below this fraction of the cell's valid
    /// samples are ignored.
    pub min_overlap_fraction: f64,
    /// Count tolerance below the maximum for the High CMC high region.
    pub high_region_tolerance: usize,
    /// `false` scores with the original CMC maximum count.
    pub high_cmc: bool,
}

impl Default for CmcParams {
    fn default() -> Self {
        Self {
            t_x: 0.4,
            t_y: 0.4,
            translation_unit: TranslationUnit::CellFraction,
            t_theta: 10.0,
            t_ccf: 0.5,
            grid: 8,
            theta_grid: default_theta_grid(),
            min_valid_fraction: 0.15,
            search_margin: 14,
            min_overlap_fraction: 0.1,
            high_region_tolerance: 1,
            high_cmc: true,
        }
    }
}

/// -30 to 30 degrees in 3 degree steps.
pub fn default_theta_grid() -> Vec<f64> {
    (-10..=10).map(|i| f64::from(i) * 3.0).collect()
}

impl CmcParams {
    pub fn validate(&self) -> Result<(), CmcError> {
        let fail = |m: String| Err(CmcError::Params(m));
        if !(self.t_x > 0.0 && self.t_y > 0.0 && self.t_theta > 0.0) {
            return fail("t_x, t_y and t_theta must be positive".into());
        }
        if !(self.t_ccf > 0.0 && self.t_ccf <= 1.0) {
            return fail(format!("t_ccf must lie in (0, 1], got {}", self.t_ccf));
        }
        if self.grid < 2 {
            return fail("grid must be >= 2".into());
        }
        if self.theta_grid.is_empty() {
            return fail("theta_grid is empty".into());
        }
        if self.theta_grid.iter().any(|t| !t.is_finite()) || self.theta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return fail("theta_grid must be finite and strictly increasing".into());
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) || !(0.0..=1.0).contains(&self.min_overlap_fraction) {
            return fail("min_valid_fraction and min_overlap_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Translation tolerances `(t_x, t_y)` in samples.
    pub fn translation_tolerance(&self, cell_side: usize) -> (f64, f64) {
        match self.translation_unit {
            TranslationUnit::CellFraction => (self.t_x * cell_side as f64, self.t_y * cell_side as f64),
            TranslationUnit::Pixels => (self.t_x, self.t_y),
        }
    }
}

/// One tile of the partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    /// Top-left sample.
    pub origin: (usize, usize),
    pub side: usize,
    pub valid: usize,
    pub participating: bool,
}

/// Registration of one cell at one trial rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMatch {
    pub cell_index: (usize, usize),
    pub theta: f64,
    pub dx: i32,
    pub dy: i32,
    pub ccf: f64,
    /// `false` when the cell did not participate or no lag had enough
    /// overlap; the other fields then carry no claim.
    pub valid: bool,
}

/// `grid x grid` equal square tiles, row-major.
pub fn partition_cells(scan: &SurfaceMatrix, grid: usize, min_valid_fraction: f64) -> Result<Vec<Cell>, CmcError> {
    let (rows, cols) = (scan.rows(), scan.cols());
    if grid == 0 || rows != cols || rows % grid != 0 {
        return Err(CmcError::Partition { grid, rows, cols });
    }
    let side = rows / grid;
    let mut cells = Vec::with_capacity(grid * grid);
    for gr in 0..grid {
        for gc in 0..grid {
            let origin = (gr * side, gc * side);
            let valid = (0..side)
                .flat_map(|r| (0..side).map(move |c| (r, c)))
                .filter(|&(r, c)| scan.is_valid(origin.0 + r, origin.1 + c))
                .count();
            cells.push(Cell {
                row: gr,
                col: gc,
                origin,
                side,
                valid,
                participating: valid as f64 >= min_valid_fraction * (side * side) as f64 && valid > 0,
            });
        }
    }
    Ok(cells)
}

/// Rotates counterclockwise (as displayed, rows pointing down) by `degrees`
/// about the raster center. Output samples are valid only when every
/// bilinear neighbor with nonzero weight is valid.
pub fn rotate_surface(scan: &SurfaceMatrix, degrees: f64) -> SurfaceMatrix {
    if degrees == 0.0 {
        return scan.clone();
    }
    let (rows, cols) = (scan.rows(), scan.cols());
    let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut heights = vec![0.0; rows * cols];
    let mut mask = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let sx = cx + cos * dx - sin * dy;
            let sy = cy + sin * dx + cos * dy;
            if let Some(v) = bilinear_valid(scan, sy, sx) {
                heights[r * cols + c] = v;
                mask[r * cols + c] = true;
            }
        }
    }
    SurfaceMatrix::new(rows, cols, scan.resolution(), heights, mask).expect("same shape")
}

/// Valid heights standardized to zero mean and unit std; invalid entries 0.
fn standardized(scan: &SurfaceMatrix) -> Result<Vec<f64>, CmcError> {
    let (mean, std) = scan.valid_stats().ok_or(CmcError::Empty)?;
    if !(std > 0.0) {
        return Err(CmcError::Empty);
    }
    Ok(scan
        .heights()
        .iter()
        .zip(scan.mask())
        .map(|(&h, &m)| if m { (h - mean) / std } else { 0.0 })
        .collect())
}

/// Per-direction result: every cell's best registration at every trial
/// rotation and the resulting congruency.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalCmc {
    pub thetas: Vec<f64>,
    pub grid: usize,
    /// `matches[t][cell]`.
    pub matches: Vec<Vec<CellMatch>>,
    /// `congruent[t][cell]`.
    pub congruent: Vec<Vec<bool>>,
}

impl DirectionalCmc {
    pub fn counts(&self) -> Vec<usize> {
        self.congruent.iter().map(|c| c.iter().filter(|&&v| v).count()).collect()
    }

    pub fn counts_by_theta(&self) -> Vec<(f64, usize)> {
        self.thetas.iter().copied().zip(self.counts()).collect()
    }

    /// Rotation with the most congruent cells; ties go to the larger summed
    /// ccf of those cells, then to the smaller angle.
    pub fn peak_theta(&self) -> f64 {
        let key = |t: usize| {
            let ccf: f64 = self.matches[t]
                .iter()
                .zip(&self.congruent[t])
                .filter(|(_, &c)| c)
                .map(|(m, _)| m.ccf)
                .sum();
            (self.congruent[t].iter().filter(|&&c| c).count(), ccf)
        };
        let mut best = 0;
        for t in 1..self.thetas.len() {
            let (kt, kb) = (key(t), key(best));
            if kt.0 > kb.0 || (kt.0 == kb.0 && kt.1 > kb.1) {
                best = t;
            }
        }
        self.thetas[best]
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Marks cells congruent at one rotation: `ccf >= t_ccf` and translation
/// within tolerance of the median translation of all such cells.
pub fn congruency(matches: &[CellMatch], t_ccf: f64, tol: (f64, f64)) -> Vec<bool> {
    let accepted: Vec<&CellMatch> = matches.iter().filter(|m| m.valid && m.ccf >= t_ccf).collect();
    if accepted.is_empty() {
        return vec![false; matches.len()];
    }
    let mdx = median(&mut accepted.iter().map(|m| f64::from(m.dx)).collect::<Vec<_>>());
    let mdy = median(&mut accepted.iter().map(|m| f64::from(m.dy)).collect::<Vec<_>>());
    matches
        .iter()
        .map(|m| {
            m.valid && m.ccf >= t_ccf && (f64::from(m.dx) - mdx).abs() <= tol.0 && (f64::from(m.dy) - mdy).abs() <= tol.1
        })
        .collect()
}

/// Registers every participating cell of `a` against `b` rotated back by
/// each trial angle, so that `b = rotate(a, theta)` peaks at `theta`.
pub fn cmc_counts(a: &SurfaceMatrix, b: &SurfaceMatrix, params: &CmcParams) -> Result<DirectionalCmc, CmcError> {
    params.validate()?;
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(CmcError::ShapeMismatch((a.rows(), a.cols()), (b.rows(), b.cols())));
    }
    let cells = partition_cells(a, params.grid, params.min_valid_fraction)?;
    let side = cells[0].side;
    let corr = Correlator::new(side, params.search_margin, params.min_overlap_fraction);
    let av = standardized(a)?;
    let bv = standardized(b)?;
    let b_std = b.with_heights(bv)?;

    let mut ws = corr.workspace();
    let spectra: Vec<Option<CellSpectra>> = cells
        .iter()
        .map(|cell| {
            cell.participating.then(|| {
                let mut vals = Vec::with_capacity(side * side);
                let mut mask = Vec::with_capacity(side * side);
                for r in 0..side {
                    for c in 0..side {
                        let i = a.index(cell.origin.0 + r, cell.origin.1 + c);
                        vals.push(av[i]);
                        mask.push(a.mask()[i]);
                    }
                }
                corr.cell_spectra(&vals, &mask, &mut ws)
            })
        })
        .collect();

    let tol = params.translation_tolerance(side);
    let n = corr.region_side();
    let margin = params.search_margin as isize;
    let matches: Vec<Vec<CellMatch>> = params
        .theta_grid
        .par_iter()
        .map(|&theta| {
            let rotated = rotate_surface(&b_std, -theta);
            let mut ws = corr.workspace();
            let mut vals = vec![0.0; n * n];
            let mut mask = vec![false; n * n];
            cells
                .iter()
                .zip(&spectra)
                .map(|(cell, spec)| {
                    let mut out = CellMatch {
                        cell_index: (cell.row, cell.col),
                        theta,
                        dx: 0,
                        dy: 0,
                        ccf: 0.0,
                        valid: false,
                    };
                    let Some(spec) = spec else { return out };
                    let (r0, c0) = (cell.origin.0 as isize - margin, cell.origin.1 as isize - margin);
                    for r in 0..n {
                        for c in 0..n {
                            let v = rotated.get(r0 + r as isize, c0 + c as isize);
                            vals[r * n + c] = v.unwrap_or(0.0);
                            mask[r * n + c] = v.is_some();
                        }
                    }
                    if let Some(m) = corr.best_lag(spec, &vals, &mask, &mut ws) {
                        out.dx = m.dx;
                        out.dy = m.dy;
                        out.ccf = m.ccf;
                        out.valid = true;
                    }
                    out
                })
                .collect()
        })
        .collect();
    let congruent = matches.iter().map(|m| congruency(m, params.t_ccf, tol)).collect();
    Ok(DirectionalCmc {
        thetas: params.theta_grid.clone(),
        grid: params.grid,
        matches,
        congruent,
    })
}

/// High CMC count from per-rotation congruency: with `M` the maximum count
/// and `H` the rotations within `tolerance` of it, cells congruent at any
/// rotation in `H` when `H` spans at most `2 t_theta`, else `M`.
pub fn high_cmc_count(thetas: &[f64], congruent: &[Vec<bool>], t_theta: f64, tolerance: usize) -> usize {
    let counts: Vec<usize> = congruent.iter().map(|c| c.iter().filter(|&&v| v).count()).collect();
    let Some(&max) = counts.iter().max() else { return 0 };
    let high: Vec<usize> = (0..counts.len()).filter(|&t| counts[t] + tolerance >= max).collect();
    let span = thetas[*high.last().expect("max is in H")] - thetas[high[0]];
    if span > 2.0 * t_theta {
        return max;
    }
    let cells = congruent.first().map_or(0, Vec::len);
    (0..cells).filter(|&c| high.iter().any(|&t| congruent[t][c])).count()
}

/// The directional count used for scoring: High CMC, or the maximum
/// per-rotation count with `high_cmc = false`.
pub fn high_cmc(result: &DirectionalCmc, params: &CmcParams) -> usize {
    if params.high_cmc {
        high_cmc_count(&result.thetas, &result.congruent, params.t_theta, params.high_region_tolerance)
    } else {
        result.counts().into_iter().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcComparison {
    pub counts_by_theta_ab: Vec<(f64, usize)>,
    pub counts_by_theta_ba: Vec<(f64, usize)>,
    pub cmc_ab: usize,
    pub cmc_ba: usize,
    pub score: f64,
}

/// `(cmc_ab + cmc_ba) / (2 grid^2)`, clamped to `[0, 1]`.
pub fn combine_counts(cmc_ab: usize, cmc_ba: usize, grid: usize) -> f64 {
    ((cmc_ab + cmc_ba) as f64 / (2 * grid * grid) as f64).clamp(0.0, 1.0)
}

pub fn cmc_score(a: &SurfaceMatrix, b: &SurfaceMatrix, params: &CmcParams) -> Result<CmcComparison, CmcError> {
    let ab = cmc_counts(a, b, params)?;
    let ba = cmc_counts(b, a, params)?;
    let (cmc_ab, cmc_ba) = (high_cmc(&ab, params), high_cmc(&ba, params));
    Ok(CmcComparison {
        counts_by_theta_ab: ab.counts_by_theta(),
        counts_by_theta_ba: ba.counts_by_theta(),
        cmc_ab,
        cmc_ba,
        score: combine_counts(cmc_ab, cmc_ba, params.grid),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcPairResult {
    pub casing_a: String,
    pub casing_b: String,
    pub gun_a: String,
    pub gun_b: String,
    pub score: f64,
    pub cmc_ab: usize,
    pub cmc_ba: usize,
    /// `ok`, or `error: <message>` for pairs that failed (scored 0).
    pub status: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmcBenchmark {
    pub pairs: usize,
    pub wall_seconds: f64,
    pub pairs_per_sec: f64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcScores {
    pub results: Vec<CmcPairResult>,
    pub benchmark: CmcBenchmark,
}

const CSV_HEADER: [&str; 8] = ["casing_a", "casing_b", "gun_a", "gun_b", "score", "cmc_ab", "cmc_ba", "status"];

impl CmcScores {
    pub fn to_score_set(&self) -> Result<ScoreSet, MetricsError> {
        let pairs = self
            .results
            .iter()
            .map(|r| ScoredPair {
                id_a: r.casing_a.clone(),
                id_b: r.casing_b.clone(),
                same_source: r.gun_a == r.gun_b,
                score: r.score,
            })
            .collect();
        ScoreSet::new(Method::Cmc, pairs)
    }

    pub fn failed(&self) -> usize {
        self.results.iter().filter(|r| r.status != "ok").count()
    }

    /// `casing_a,casing_b,gun_a,gun_b,score,cmc_ab,cmc_ba,status`.
    pub fn write_csv(&self, path: &Path) -> Result<(), CmcError> {
        let err = |e: csv::Error| {
            CmcError::Metrics(MetricsError::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(CSV_HEADER).map_err(err)?;
        for r in &self.results {
            w.write_record([
                r.casing_a.as_str(),
                &r.casing_b,
                &r.gun_a,
                &r.gun_b,
                &format_score(r.score),
                &r.cmc_ab.to_string(),
                &r.cmc_ba.to_string(),
                &r.status,
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|source| CmcError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write_benchmark_json(&self, path: &Path) -> Result<(), CmcError> {
        let text = serde_json::to_string_pretty(&self.benchmark).expect("plain struct");
        std::fs::write(path, text).map_err(|source| CmcError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Scores all unordered pairs `(i < j)` on a pool of `workers` threads.
/// Output order and values do not depend on `workers`.
pub fn cmc_score_all_pairs(scans: &[ScanRecord], params: &CmcParams, workers: usize) -> Result<CmcScores, CmcError> {
    let pairs: Vec<(usize, usize)> = (0..scans.len())
        .flat_map(|i| (i + 1..scans.len()).map(move |j| (i, j)))
        .collect();
    cmc_score_pairs(scans, &pairs, params, workers)
}

/// Scores the listed index pairs of `scans`, in the given order.
pub fn cmc_score_pairs(
    scans: &[ScanRecord],
    pairs: &[(usize, usize)],
    params: &CmcParams,
    workers: usize,
) -> Result<CmcScores, CmcError> {
    params.validate()?;
    if scans.len() < 2 {
        return Err(CmcError::TooFewScans(scans.len()));
    }
    let mut seen = HashMap::new();
    for s in scans {
        if seen.insert(s.casing_id.as_str(), ()).is_some() {
            return Err(MetricsError::DuplicateId(s.casing_id.clone()).into());
        }
    }
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= scans.len() || j >= scans.len() || i == j) {
        return Err(CmcError::Params(format!("pair ({i}, {j}) is not two distinct scans of {}", scans.len())));
    }
    let workers = workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CmcError::Pool(e.to_string()))?;
    let done = AtomicUsize::new(0);
    let start = Instant::now();
    let results = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(i, j)| {
                let (a, b) = (&scans[i], &scans[j]);
                let (score, cmc_ab, cmc_ba, status) = match cmc_score(&a.surface, &b.surface, params) {
                    Ok(c) => (c.score, c.cmc_ab, c.cmc_ba, "ok".to_string()),
                    Err(e) => {
                        log::warn!("CMC failed for {} vs {}: {e}", a.casing_id, b.casing_id);
                        (0.0, 0, 0, format!("error: {e}"))
                    }
                };
                let finished = done.fetch_add(1, Ordering::Relaxed) + 1;
                if finished.is_multiple_of(100) {
                    log::info!("CMC: {finished}/{} pairs", pairs.len());
                }
                CmcPairResult {
                    casing_a: a.casing_id.clone(),
                    casing_b: b.casing_id.clone(),
                    gun_a: a.gun_id.clone(),
                    gun_b: b.gun_id.clone(),
                    score,
                    cmc_ab,
                    cmc_ba,
                    status,
                }
            })
            .collect::<Vec<_>>()
    });
    let wall_seconds = start.elapsed().as_secs_f64();
    Ok(CmcScores {
        benchmark: CmcBenchmark {
            pairs: results.len(),
            wall_seconds,
            pairs_per_sec: results.len() as f64 / wall_seconds.max(f64::MIN_POSITIVE),
            workers,
        },
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_sizes() {
        let s = SurfaceMatrix::filled(224, 224, 1.0, 0.0).unwrap();
        let cells = partition_cells(&s, 8, 0.15).unwrap();
        assert_eq!(cells.len(), 64);
        assert!(cells.iter().all(|c| c.side == 28 && c.participating));
        assert!(matches!(partition_cells(&s, 9, 0.15), Err(CmcError::Partition { .. })));
    }

    #[test]
    fn score_arithmetic() {
        assert_eq!(combine_counts(45, 38, 8), 0.6484375);
        assert_eq!(combine_counts(64, 64, 8), 1.0);
    }

    #[test]
    fn high_cmc_fallback_and_single_theta() {
        let flat: Vec<Vec<bool>> = (0..21).map(|t| (0..64).map(|c| (c + 3 * t) % 64 < 5).collect()).collect();
        assert_eq!(high_cmc_count(&default_theta_grid(), &flat, 10.0, 1), 5);
        let one = vec![(0..64).map(|c| c < 17).collect::<Vec<bool>>()];
        assert_eq!(high_cmc_count(&[0.0], &one, 10.0, 1), 17);
    }

    #[test]
    fn params_validation() {
        assert!(CmcParams::default().validate().is_ok());
        assert!(CmcParams { t_ccf: 0.0, ..CmcParams::default() }.validate().is_err());
        assert!(CmcParams { theta_grid: vec![3.0, 0.0], ..CmcParams::default() }.validate().is_err());
        assert!(CmcParams { grid: 1, ..CmcParams::default() }.validate().is_err());
        assert_eq!(CmcParams::default().theta_grid.len(), 21);
    }

    #[test]
    fn rotation_round_trip_near_identity() {
        let s = crate::scan_io::band_limited_surface(64, 64, 3.0, 1, 1.0);
        let back = rotate_surface(&rotate_surface(&s, 12.0), -12.0);
        let c = back.index(32, 32);
        assert!(back.mask()[c]);
        assert!((back.heights()[c] - s.heights()[c]).abs() < 0.2e-6);
        assert_eq!(rotate_surface(&s, 0.0), s);
    }
}

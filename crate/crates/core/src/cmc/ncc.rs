//! Mask-aware normalized cross-correlation over a window of integer lags,
//! computed from six FFT correlations.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

type C64 = Complex<f64>;

/// Best lag of a cell inside its search region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagMatch {
    pub ccf: f64,
    /// Column displacement of the cell content, samples.
    pub dx: i32,
    /// Row displacement, samples.
    pub dy: i32,
}

impl LagMatch {
    /// Higher ccf wins; ties go to the smaller `|dx| + |dy|`, then `dy`, then `dx`.
    fn beats(&self, other: &LagMatch) -> bool {
        if self.ccf != other.ccf {
            return self.ccf > other.ccf;
        }
        let key = |m: &LagMatch| (m.dx.abs() + m.dy.abs(), m.dy, m.dx);
        key(self) < key(other)
    }
}

/// Transforms of one cell's `mask`, `value * mask` and `value^2 * mask`,
/// conjugated and zero-padded to the correlator size.
pub struct CellSpectra {
    m: Vec<C64>,
    a: Vec<C64>,
    aa: Vec<C64>,
    valid: usize,
    full: bool,
    sum: f64,
    energy: f64,
}

/// Overlap sums at each lag, row-major over the `(2 margin + 1)^2` window.
struct LagSums {
    n: Vec<f64>,
    sa: Vec<f64>,
    saa: Vec<f64>,
    sb: Vec<f64>,
    sbb: Vec<f64>,
    sab: Vec<f64>,
}

/// Square 2D FFT correlator for `cell`-sided cells against regions with
/// `margin` extra samples on every side.
pub struct Correlator {
    cell: usize,
    margin: usize,
    n: usize,
    min_overlap_fraction: f64,
    /// Index of the negated frequency for each transform entry.
    neg: Vec<usize>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

pub struct Workspace {
    z1: Vec<C64>,
    z2: Vec<C64>,
    q: [Vec<C64>; 3],
    scratch: Vec<C64>,
}

impl Correlator {
    pub fn new(cell: usize, margin: usize, min_overlap_fraction: f64) -> Self {
        let n = cell + 2 * margin;
        let mut planner = FftPlanner::new();
        let neg = (0..n * n).map(|k| ((n - k / n) % n) * n + (n - k % n) % n).collect();
        Self {
            cell,
            margin,
            n,
            min_overlap_fraction,
            neg,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn region_side(&self) -> usize {
        self.n
    }

    pub fn workspace(&self) -> Workspace {
        let len = self.n * self.n;
        let scratch = self.fwd.get_inplace_scratch_len().max(self.inv.get_inplace_scratch_len());
        Workspace {
            z1: vec![C64::default(); len],
            z2: vec![C64::default(); len],
            q: [vec![C64::default(); len], vec![C64::default(); len], vec![C64::default(); len]],
            scratch: vec![C64::default(); scratch],
        }
    }

    /// Rows, transpose, rows. The result is the 2D transform in transposed
    /// layout; `transform2(inverse)` on it returns to the original layout.
    fn transform2(&self, plan: &Arc<dyn Fft<f64>>, buf: &mut [C64], scratch: &mut [C64]) {
        let n = self.n;
        plan.process_with_scratch(buf, scratch);
        for i in 0..n {
            let (head, tail) = buf.split_at_mut((i + 1) * n);
            let row = &mut head[i * n..];
            for (j, v) in row.iter_mut().enumerate().skip(i + 1) {
                std::mem::swap(v, &mut tail[(j - i - 1) * n + i]);
            }
        }
        plan.process_with_scratch(buf, scratch);
    }

    /// Splits the transform of `x + i y` (both real) into the transforms of
    /// `x` and `y`.
    fn unpack(&self, z: &[C64], k: usize) -> (C64, C64) {
        let zk = z[k];
        let zn = z[self.neg[k]].conj();
        ((zk + zn) * 0.5, (zk - zn) * C64::new(0.0, -0.5))
    }

    /// `values` and `mask` are `cell x cell`, row-major.
    pub fn cell_spectra(&self, values: &[f64], mask: &[bool], ws: &mut Workspace) -> CellSpectra {
        let (n, c) = (self.n, self.cell);
        ws.z1.fill(C64::default());
        ws.z2.fill(C64::default());
        let mut valid = 0;
        let mut sum = 0.0;
        let mut energy = 0.0;
        for r in 0..c {
            for col in 0..c {
                if mask[r * c + col] {
                    let v = values[r * c + col];
                    ws.z1[r * n + col] = C64::new(1.0, v);
                    ws.z2[r * n + col] = C64::new(v * v, 0.0);
                    valid += 1;
                    sum += v;
                    energy += v * v;
                }
            }
        }
        self.transform2(&self.fwd, &mut ws.z1, &mut ws.scratch);
        self.transform2(&self.fwd, &mut ws.z2, &mut ws.scratch);
        let len = n * n;
        let (mut m, mut a, mut aa) = (Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len));
        for k in 0..len {
            let (mk, ak) = self.unpack(&ws.z1, k);
            m.push(mk.conj());
            a.push(ak.conj());
            aa.push(ws.z2[k].conj());
        }
        CellSpectra {
            m,
            a,
            aa,
            valid,
            full: valid == c * c,
            sum,
            energy,
        }
    }

    /// Window sums of the region's mask, values and squared values over
    /// every cell-sized placement, from summed area tables.
    fn box_sums(&self, values: &[f64], mask: &[bool]) -> [Vec<f64>; 3] {
        let (n, c, w) = (self.n, self.cell, 2 * self.margin + 1);
        let stride = n + 1;
        let mut table = vec![[0.0f64; 3]; stride * stride];
        for r in 0..n {
            let mut row = [0.0; 3];
            for col in 0..n {
                let k = r * n + col;
                if mask[k] {
                    let v = values[k];
                    row[0] += 1.0;
                    row[1] += v;
                    row[2] += v * v;
                }
                let up = table[r * stride + col + 1];
                table[(r + 1) * stride + col + 1] = [up[0] + row[0], up[1] + row[1], up[2] + row[2]];
            }
        }
        let mut out = [Vec::with_capacity(w * w), Vec::with_capacity(w * w), Vec::with_capacity(w * w)];
        for tr in 0..w {
            for tc in 0..w {
                let (a, b) = (table[(tr + c) * stride + tc + c], table[tr * stride + tc + c]);
                let (d, e) = (table[(tr + c) * stride + tc], table[tr * stride + tc]);
                for (q, o) in out.iter_mut().enumerate() {
                    o.push(a[q] - b[q] - d[q] + e[q]);
                }
            }
        }
        out
    }

    /// Real parts of the inverse transform restricted to the lag window.
    fn lag_window(&self, q: &[C64], part: fn(C64) -> f64) -> Vec<f64> {
        let (n, w) = (self.n, 2 * self.margin + 1);
        let scale = 1.0 / (n * n) as f64;
        (0..w * w).map(|k| part(q[(k / w) * n + k % w]) * scale).collect()
    }

    fn lag_sums(&self, cell: &CellSpectra, values: &[f64], mask: &[bool], ws: &mut Workspace) -> LagSums {
        let len = self.n * self.n;
        let region_full = mask.iter().all(|&m| m);
        let i = C64::new(0.0, 1.0);
        let re = |z: C64| z.re;
        let im = |z: C64| z.im;
        if cell.full {
            let w = 2 * self.margin + 1;
            let [count, sb, sbb] = self.box_sums(values, mask);
            if region_full {
                for k in 0..len {
                    ws.z1[k] = C64::new(values[k], 0.0);
                }
                self.transform2(&self.fwd, &mut ws.z1, &mut ws.scratch);
                for k in 0..len {
                    ws.q[0][k] = cell.a[k] * ws.z1[k];
                }
                self.transform2(&self.inv, &mut ws.q[0], &mut ws.scratch);
                return LagSums {
                    n: count,
                    sa: vec![cell.sum; w * w],
                    saa: vec![cell.energy; w * w],
                    sb,
                    sbb,
                    sab: self.lag_window(&ws.q[0], re),
                };
            }
            for k in 0..len {
                ws.z1[k] = if mask[k] { C64::new(1.0, values[k]) } else { C64::default() };
            }
            self.transform2(&self.fwd, &mut ws.z1, &mut ws.scratch);
            for k in 0..len {
                let (mb, b) = self.unpack(&ws.z1, k);
                ws.q[0][k] = cell.a[k] * mb + i * (cell.aa[k] * mb);
                ws.q[1][k] = cell.a[k] * b;
            }
            let [q0, q1, _] = &mut ws.q;
            self.transform2(&self.inv, q0, &mut ws.scratch);
            self.transform2(&self.inv, q1, &mut ws.scratch);
            return LagSums {
                n: count,
                sa: self.lag_window(&ws.q[0], re),
                saa: self.lag_window(&ws.q[0], im),
                sb,
                sbb,
                sab: self.lag_window(&ws.q[1], re),
            };
        }
        for k in 0..len {
            if mask[k] {
                let v = values[k];
                ws.z1[k] = C64::new(1.0, v);
                ws.z2[k] = C64::new(v * v, 0.0);
            } else {
                ws.z1[k] = C64::default();
                ws.z2[k] = C64::default();
            }
        }
        self.transform2(&self.fwd, &mut ws.z1, &mut ws.scratch);
        self.transform2(&self.fwd, &mut ws.z2, &mut ws.scratch);
        for k in 0..len {
            let (mb, b) = self.unpack(&ws.z1, k);
            let bb = ws.z2[k];
            // pairs of real correlations share one inverse transform
            ws.q[0][k] = cell.m[k] * mb + i * (cell.a[k] * mb);
            ws.q[1][k] = cell.aa[k] * mb + i * (cell.m[k] * b);
            ws.q[2][k] = cell.m[k] * bb + i * (cell.a[k] * b);
        }
        let [q0, q1, q2] = &mut ws.q;
        for q in [q0, q1, q2] {
            self.transform2(&self.inv, q, &mut ws.scratch);
        }
        LagSums {
            n: self.lag_window(&ws.q[0], re),
            sa: self.lag_window(&ws.q[0], im),
            saa: self.lag_window(&ws.q[1], re),
            sb: self.lag_window(&ws.q[1], im),
            sbb: self.lag_window(&ws.q[2], re),
            sab: self.lag_window(&ws.q[2], im),
        }
    }

    /// Best lag with `|dx|, |dy| <= margin`. `values` and `mask` are the
    /// `region_side()`-sided region whose inner `cell x cell` block is the
    /// cell's nominal location. `None` when no lag has enough overlap and
    /// spread on both sides.
    pub fn best_lag(&self, cell: &CellSpectra, values: &[f64], mask: &[bool], ws: &mut Workspace) -> Option<LagMatch> {
        let region_energy: f64 = values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v * v).sum();
        if cell.valid == 0 || region_energy == 0.0 {
            return None;
        }
        let sums = self.lag_sums(cell, values, mask, ws);
        let min_overlap = (self.min_overlap_fraction * cell.valid as f64).max(3.0);
        let tiny_a = 1e-10 * cell.energy;
        let tiny_b = 1e-10 * region_energy;
        let w = 2 * self.margin + 1;
        let mut best: Option<LagMatch> = None;
        for k in 0..w * w {
            let count = sums.n[k].round();
            if count < min_overlap {
                continue;
            }
            let (sa, sb) = (sums.sa[k], sums.sb[k]);
            let va = sums.saa[k] - sa * sa / count;
            let vb = sums.sbb[k] - sb * sb / count;
            if !(va > tiny_a && vb > tiny_b) {
                continue;
            }
            let cov = sums.sab[k] - sa * sb / count;
            if cov <= 0.0 && best.as_ref().is_some_and(|b| b.ccf > 0.0) {
                continue;
            }
            let ccf = (cov / (va * vb).sqrt()).clamp(-1.0, 1.0);
            let cand = LagMatch {
                ccf,
                dx: (k % w) as i32 - self.margin as i32,
                dy: (k / w) as i32 - self.margin as i32,
            };
            if best.as_ref().is_none_or(|b| cand.beats(b)) {
                best = Some(cand);
            }
        }
        best
    }
}

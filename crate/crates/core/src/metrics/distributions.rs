use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Method, MetricsError, ScoreSet};

/// Equal-width histogram of scores split by pair label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from the minimum to the maximum score.
    pub edges: Vec<f64>,
    pub same_source: Vec<usize>,
    pub different_source: Vec<usize>,
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let i = ((v - lo) / (hi - lo) * bins as f64).floor() as usize;
    i.min(bins - 1)
}

/// Bins span `[min, max]`; the maximum falls in the last bin.
pub fn score_histogram(scores: &ScoreSet, bins: usize) -> Result<Histogram, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let values = scores.pairs().iter().map(|p| p.score);
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let edges = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    let mut same_source = vec![0; bins];
    let mut different_source = vec![0; bins];
    for p in scores.pairs() {
        let i = bin_index(p.score, lo, hi, bins);
        if p.same_source {
            same_source[i] += 1;
        } else {
            different_source[i] += 1;
        }
    }
    Ok(Histogram {
        edges,
        same_source,
        different_source,
    })
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let r = sxy / (sxx * syy).sqrt();
    r.is_finite().then_some(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub id_a: String,
    pub id_b: String,
    pub x: f64,
    pub y: f64,
    pub same_source: bool,
}

/// Two score sets joined pair by pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub x_method: Method,
    pub y_method: Method,
    pub points: Vec<ScatterPoint>,
    /// Pearson r over every pair.
    pub pearson_all: Option<f64>,
    /// Pearson r over pairs whose CMC score is nonzero (all pairs when
    /// neither axis is CMC).
    pub pearson_nonzero_cmc: Option<f64>,
    pub nonzero_cmc_pairs: usize,
}

/// Joins `a` (x axis) and `b` (y axis) on unordered pair identity.
pub fn score_scatter(a: &ScoreSet, b: &ScoreSet) -> Result<Scatter, MetricsError> {
    let index_b: BTreeMap<String, usize> = b.pairs().iter().enumerate().map(|(i, p)| (p.key(), i)).collect();
    let keys_a: BTreeMap<String, usize> = a.pairs().iter().enumerate().map(|(i, p)| (p.key(), i)).collect();
    let mut missing: Vec<String> = keys_a.keys().filter(|k| !index_b.contains_key(*k)).cloned().collect();
    missing.extend(index_b.keys().filter(|k| !keys_a.contains_key(*k)).cloned());
    if !missing.is_empty() {
        return Err(MetricsError::JoinMismatch(missing));
    }
    let mut points = Vec::with_capacity(a.len());
    for pa in a.pairs() {
        let pb = &b.pairs()[index_b[&pa.key()]];
        if pa.same_source != pb.same_source {
            return Err(MetricsError::LabelMismatch(pa.key()));
        }
        points.push(ScatterPoint {
            id_a: pa.id_a.clone(),
            id_b: pa.id_b.clone(),
            x: pa.score,
            y: pb.score,
            same_source: pa.same_source,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let keep = |p: &ScatterPoint| match (a.method(), b.method()) {
        (_, Method::Cmc) => p.y != 0.0,
        (Method::Cmc, _) => p.x != 0.0,
        _ => true,
    };
    let nz: Vec<&ScatterPoint> = points.iter().filter(|p| keep(p)).collect();
    let nx: Vec<f64> = nz.iter().map(|p| p.x).collect();
    let ny: Vec<f64> = nz.iter().map(|p| p.y).collect();
    Ok(Scatter {
        x_method: a.method(),
        y_method: b.method(),
        pearson_all: pearson(&xs, &ys),
        pearson_nonzero_cmc: pearson(&nx, &ny),
        nonzero_cmc_pairs: nz.len(),
        points,
    })
}

impl Scatter {
    /// `bins x bins` counts over the x and y score ranges, row-major with
    /// y as the row index.
    pub fn heatmap(&self, bins: usize) -> Vec<Vec<usize>> {
        let range = |f: fn(&ScatterPoint) -> f64| {
            self.points
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (xl, xh) = range(|p| p.x);
        let (yl, yh) = range(|p| p.y);
        let mut grid = vec![vec![0; bins]; bins];
        for p in &self.points {
            grid[bin_index(p.y, yl, yh, bins)][bin_index(p.x, xl, xh, bins)] += 1;
        }
        grid
    }
}

#[cfg(test)]
mod tests {
    use super::super::ScoredPair;
    use super::*;

    fn set(method: Method, scores: &[(f64, bool)]) -> ScoreSet {
        let pairs = scores
            .iter()
            .enumerate()
            .map(|(i, &(score, same_source))| ScoredPair {
                id_a: format!("c{i}"),
                id_b: format!("d{i}"),
                same_source,
                score,
            })
            .collect();
        ScoreSet::new(method, pairs).unwrap()
    }

    #[test]
    fn six_scores_three_bins() {
        // range [0, 0.9], width 0.3: [0,0.3) [0.3,0.6) [0.6,0.9]
        let s = set(
            Method::Contrastive,
            &[(0.0, false), (0.1, false), (0.35, true), (0.5, false), (0.7, true), (0.9, true)],
        );
        let h = score_histogram(&s, 3).unwrap();
        assert_eq!(h.different_source, vec![2, 1, 0]);
        assert_eq!(h.same_source, vec![0, 1, 2]);
        let one = score_histogram(&s, 1).unwrap();
        assert_eq!((one.same_source[0], one.different_source[0]), (3, 3));
        assert!(score_histogram(&s, 0).is_err());
    }

    #[test]
    fn self_join_is_diagonal() {
        let s = set(Method::Contrastive, &[(0.1, true), (0.4, false), (0.3, false)]);
        let sc = score_scatter(&s, &s).unwrap();
        assert!(sc.points.iter().all(|p| p.x == p.y));
        assert!((sc.pearson_all.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sc.heatmap(2).iter().flatten().sum::<usize>(), 3);
    }

    #[test]
    fn disjoint_sets_fail_to_join() {
        let a = set(Method::Contrastive, &[(0.1, true)]);
        let mut b_pairs = a.pairs().to_vec();
        b_pairs[0].id_b = "other".into();
        let b = ScoreSet::new(Method::Cmc, b_pairs).unwrap();
        match score_scatter(&a, &b) {
            Err(MetricsError::JoinMismatch(m)) => assert_eq!(m.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn five_pair_pearson() {
        // x = 1..5, y = [2, 4, 5, 4, 5]: r = 6 / sqrt(10 * 6)
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 4.0, 5.0, 4.0, 5.0];
        let expected = 6.0 / (10.0f64 * 6.0).sqrt();
        assert!((pearson(&x, &y).unwrap() - expected).abs() < 1e-12);
    }
}

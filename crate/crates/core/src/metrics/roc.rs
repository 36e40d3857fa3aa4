use serde::{Deserialize, Serialize};

use super::{MetricsError, ScoreSet};

/// Mann-Whitney AUC with midranks: the probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn auc_from_scores(positives: &[f64], negatives: &[f64]) -> Result<f64, MetricsError> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(MetricsError::SingleClass {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    if positives.iter().chain(negatives).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the positive rank sum, so midranks stay integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share the midrank (i + 1 + j) / 2
        let pos_in_tie = all[i..j].iter().filter(|e| e.1).count() as u128;
        rank_sum2 += pos_in_tie * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (p, n) = (positives.len() as u128, negatives.len() as u128);
    // 2U = 2R - P(P+1)
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (p * n) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Pairs scoring at least this value are called same-source.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From `(0, 0)` at threshold `+inf` down to `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub fn roc_auc(scores: &ScoreSet) -> Result<RocCurve, MetricsError> {
    let (pos, neg) = scores.split_by_label();
    let auc = auc_from_scores(&pos, &neg)?;
    let mut sorted: Vec<(f64, bool)> = scores.pairs().iter().map(|p| (p.score, p.same_source)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (pos.len() as f64, neg.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    Ok(RocCurve {
        points,
        auc,
        positives: pos.len(),
        negatives: neg.len(),
    })
}

/// Trapezoidal area under the curve points.
pub fn trapezoid_area(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

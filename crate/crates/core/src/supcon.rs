//! Supervised contrastive loss over a labelled batch of embeddings.
//!
//! For anchor `a` with positives `P(a)` (same label, excluding `a`) and
//! negatives `N(a)` (different label):
//!
//! ```text
//! L = sum_a  -1/|P(a)| sum_{p in P(a)} log( exp(z_a.z_p / t) / sum_{n in N(a)} exp(z_a.z_n / t) )
//! ```

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SupConError {
    #[error("loss undefined for anchor {anchor}: {reason}")]
    Undefined { anchor: usize, reason: &'static str },
    #[error("invalid batch: {0}")]
    Batch(String),
}

/// Embeddings with class labels and a temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<L> {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<L>,
    temperature: f64,
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
}

impl<L: PartialEq> LabeledBatch<L> {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<L>, temperature: f64) -> Result<Self, SupConError> {
        if embeddings.len() != labels.len() {
            return Err(SupConError::Batch(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        if embeddings.len() < 2 {
            return Err(SupConError::Batch("need at least 2 embeddings".into()));
        }
        let dim = embeddings[0].len();
        if dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
            return Err(SupConError::Batch("embeddings must share a positive dimension".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(SupConError::Batch(format!("temperature must be > 0, got {temperature}")));
        }
        let n = labels.len();
        let mut positives = vec![Vec::new(); n];
        let mut negatives = vec![Vec::new(); n];
        for a in 0..n {
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    positives[a].push(j);
                } else {
                    negatives[a].push(j);
                }
            }
            if positives[a].is_empty() {
                return Err(SupConError::Undefined {
                    anchor: a,
                    reason: "no same-label partner",
                });
            }
            if negatives[a].is_empty() {
                return Err(SupConError::Undefined {
                    anchor: a,
                    reason: "no different-label element",
                });
            }
        }
        Ok(Self {
            embeddings,
            labels,
            temperature,
            positives,
            negatives,
        })
    }
}

impl<L> LabeledBatch<L> {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[L] {
        &self.labels
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    fn sim(&self, i: usize, j: usize) -> f64 {
        dot(&self.embeddings[i], &self.embeddings[j]) / self.temperature
    }

    /// `log sum_{n in N(a)} exp(s_an)` with max subtraction, and the softmax
    /// weights over the negatives.
    fn negative_lse(&self, a: usize) -> (f64, Vec<f64>) {
        let logits: Vec<f64> = self.negatives[a].iter().map(|&n| self.sim(a, n)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        (m + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The loss as written: a mean over positives of log-ratios, summed over
/// anchors. The denominator is evaluated with the largest negative logit
/// subtracted from every exponent.
pub fn supcon_loss<L>(batch: &LabeledBatch<L>) -> f64 {
    let mut total = 0.0;
    for a in 0..batch.len() {
        let m = batch.negatives[a]
            .iter()
            .map(|&n| batch.sim(a, n))
            .fold(f64::NEG_INFINITY, f64::max);
        let log_denom = m + batch.negatives[a]
            .iter()
            .map(|&n| (batch.sim(a, n) - m).exp())
            .sum::<f64>()
            .ln();
        let mut anchor = 0.0;
        for &p in &batch.positives[a] {
            // log(exp(s_ap) / denom)
            anchor += batch.sim(a, p) - log_denom;
        }
        total -= anchor / batch.positives[a].len() as f64;
    }
    total
}

/// The rewritten form: per anchor, log-sum-exp over negatives minus the mean
/// positive similarity.
pub fn supcon_loss_rewritten<L>(batch: &LabeledBatch<L>) -> f64 {
    (0..batch.len())
        .map(|a| {
            let (lse, _) = batch.negative_lse(a);
            let pos = &batch.positives[a];
            let mean_pos = pos.iter().map(|&p| batch.sim(a, p)).sum::<f64>() / pos.len() as f64;
            lse - mean_pos
        })
        .sum()
}

/// Loss and its gradient with respect to every embedding.
pub fn supcon_grad<L>(batch: &LabeledBatch<L>) -> (f64, Vec<Vec<f64>>) {
    let n = batch.len();
    let dim = batch.embeddings[0].len();
    let t = batch.temperature;
    // coef[a][j] = dL / d(z_a . z_j) from anchor a's term
    let mut coef = vec![vec![0.0; n]; n];
    let mut loss = 0.0;
    for a in 0..n {
        let (lse, weights) = batch.negative_lse(a);
        let pos = &batch.positives[a];
        let inv = 1.0 / pos.len() as f64;
        let mut mean_pos = 0.0;
        for &p in pos {
            mean_pos += batch.sim(a, p) * inv;
            coef[a][p] -= inv / t;
        }
        for (&j, w) in batch.negatives[a].iter().zip(&weights) {
            coef[a][j] += w / t;
        }
        loss += lse - mean_pos;
    }
    let z = &batch.embeddings;
    let mut grads = vec![vec![0.0; dim]; n];
    for a in 0..n {
        for j in 0..n {
            let c = coef[a][j];
            if c == 0.0 {
                continue;
            }
            for d in 0..dim {
                grads[a][d] += c * z[j][d];
                grads[j][d] += c * z[a][d];
            }
        }
    }
    (loss, grads)
}

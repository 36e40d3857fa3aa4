//! Pair labels, ROC analysis, score distributions and report files.

mod distributions;
mod report;
mod roc;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scan_io::ScanRecord;

pub use distributions::{pearson, score_histogram, score_scatter, Histogram, Scatter, ScatterPoint};
pub use report::{
    histogram_svg, roc_overlay_svg, scatter_svg, write_histogram_csv, write_roc_csv,
    write_scatter_csv, write_summary_json, EvaluationSummary,
};
pub use roc::{auc_from_scores, roc_auc, trapezoid_area, RocCurve, RocPoint};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("AUC undefined with {positives} same-source and {negatives} different-source pairs")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores must be finite")]
    NonFinite,
    #[error("duplicate pair ({0}, {1})")]
    DuplicatePair(String, String),
    #[error("duplicate casing id {0}")]
    DuplicateId(String),
    #[error("pair universes differ; missing from one side: {}", .0.join(", "))]
    JoinMismatch(Vec<String>),
    #[error("same-source label disagrees for pair {0}")]
    LabelMismatch(String),
    #[error("need at least one bin")]
    NoBins,
    #[error("score file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MetricsError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Contrastive,
    Cmc,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Contrastive => "contrastive",
            Method::Cmc => "cmc",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "contrastive" => Ok(Method::Contrastive),
            "cmc" => Ok(Method::Cmc),
            other => Err(format!("unknown method {other:?} (expected contrastive or cmc)")),
        }
    }
}

/// An unordered pair of casings and whether they share a gun.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLabel {
    pub id_a: String,
    pub id_b: String,
    pub same_source: bool,
}

/// All unordered pairs `(i < j)` in dataset order. Casing ids must be unique.
pub fn pair_labels(records: &[ScanRecord]) -> Result<Vec<PairLabel>, MetricsError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.casing_id.as_str()) {
            return Err(MetricsError::DuplicateId(r.casing_id.clone()));
        }
    }
    let mut out = Vec::with_capacity(records.len() * records.len().saturating_sub(1) / 2);
    for (i, a) in records.iter().enumerate() {
        for b in &records[i + 1..] {
            out.push(PairLabel {
                id_a: a.casing_id.clone(),
                id_b: b.casing_id.clone(),
                same_source: a.gun_id == b.gun_id,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id_a: String,
    pub id_b: String,
    pub same_source: bool,
    pub score: f64,
}

impl ScoredPair {
    /// Order-independent key `"a|b"` with `a <= b`.
    pub fn key(&self) -> String {
        if self.id_a <= self.id_b {
            format!("{}|{}", self.id_a, self.id_b)
        } else {
            format!("{}|{}", self.id_b, self.id_a)
        }
    }
}

/// Similarity scores for a set of casing pairs from one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    method: Method,
    pairs: Vec<ScoredPair>,
}

impl ScoreSet {
    pub fn new(method: Method, pairs: Vec<ScoredPair>) -> Result<Self, MetricsError> {
        let mut keys = BTreeSet::new();
        for p in &pairs {
            if !p.score.is_finite() {
                return Err(MetricsError::NonFinite);
            }
            if !keys.insert(p.key()) {
                return Err(MetricsError::DuplicatePair(p.id_a.clone(), p.id_b.clone()));
            }
        }
        Ok(Self { method, pairs })
    }

    /// Attaches scores to labelled pairs.
    pub fn from_labels(method: Method, labels: &[PairLabel], scores: &[f64]) -> Result<Self, MetricsError> {
        assert_eq!(labels.len(), scores.len(), "one score per pair");
        let pairs = labels
            .iter()
            .zip(scores)
            .map(|(l, &score)| ScoredPair {
                id_a: l.id_a.clone(),
                id_b: l.id_b.clone(),
                same_source: l.same_source,
                score,
            })
            .collect();
        Self::new(method, pairs)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn pairs(&self) -> &[ScoredPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(same-source scores, different-source scores)`.
    pub fn split_by_label(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for p in &self.pairs {
            if p.same_source {
                pos.push(p.score);
            } else {
                neg.push(p.score);
            }
        }
        (pos, neg)
    }

    /// CSV with header `id_a,id_b,same_source,score,method`.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let err = |e: csv::Error| MetricsError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["id_a", "id_b", "same_source", "score", "method"]).map_err(err)?;
        for p in &self.pairs {
            w.write_record([
                p.id_a.as_str(),
                p.id_b.as_str(),
                if p.same_source { "true" } else { "false" },
                &format_score(p.score),
                &self.method.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| MetricsError::io(path, e))
    }

    /// Reads a score CSV, either the `id_a,id_b,same_source,score,method`
    /// layout written by [`ScoreSet::write_csv`] or the CMC layout
    /// `casing_a,casing_b,gun_a,gun_b,score,...` (method `cmc`, labels from
    /// the gun columns). Columns are found by name; extra columns are ignored.
    pub fn read_csv(path: &Path) -> Result<Self, MetricsError> {
        let fmt_err = |message: String| MetricsError::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| fmt_err(e.to_string()))?;
        let headers = r.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let need = |name: &str| col(name).ok_or_else(|| fmt_err(format!("missing column `{name}`")));
        enum Layout {
            Labelled { ia: usize, ib: usize, is: usize, im: usize },
            Guns { ia: usize, ib: usize, ga: usize, gb: usize },
        }
        let layout = if col("casing_a").is_some() {
            Layout::Guns {
                ia: need("casing_a")?,
                ib: need("casing_b")?,
                ga: need("gun_a")?,
                gb: need("gun_b")?,
            }
        } else {
            Layout::Labelled {
                ia: need("id_a")?,
                ib: need("id_b")?,
                is: need("same_source")?,
                im: need("method")?,
            }
        };
        let isc = need("score")?;
        let mut method = None;
        let mut pairs = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let row = line + 1;
            let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
            let at = |i: usize| rec.get(i).unwrap_or("");
            let (id_a, id_b, same_source, m) = match layout {
                Layout::Labelled { ia, ib, is, im } => {
                    let m: Method = at(im).parse().map_err(|e| fmt_err(format!("row {row}: {e}")))?;
                    let same = match at(is) {
                        "true" => true,
                        "false" => false,
                        other => return Err(fmt_err(format!("row {row}: same_source {other:?}"))),
                    };
                    (at(ia), at(ib), same, m)
                }
                Layout::Guns { ia, ib, ga, gb } => (at(ia), at(ib), at(ga) == at(gb), Method::Cmc),
            };
            if *method.get_or_insert(m) != m {
                return Err(fmt_err("rows mix scoring methods".into()));
            }
            let score = at(isc)
                .parse::<f64>()
                .map_err(|_| fmt_err(format!("row {row}: score {:?}", at(isc))))?;
            pairs.push(ScoredPair {
                id_a: id_a.to_string(),
                id_b: id_b.to_string(),
                same_source,
                score,
            });
        }
        let method = method.ok_or_else(|| fmt_err("no rows".into()))?;
        Self::new(method, pairs)
    }
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn format_score(v: f64) -> String {
    format!("{v:?}")
}

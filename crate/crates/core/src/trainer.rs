//! Batch construction, the optimization loop with periodic held-out ROC AUC
//! recording, smoothing of the recorded series and multi-run summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{auc_from_scores, MetricsError};
use crate::net::{
    polar_input, save_checkpoint, similarity, Embedding, Gradients, Model, NetError, Optimizer,
    OptimizerConfig, Tensor,
};
use crate::preprocess::PolarImage;
use crate::supcon::{supcon_grad, LabeledBatch, SupConError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set rejected: {0}")]
    Dataset(String),
    #[error("evaluation guns also appear in training: {}", .0.join(", "))]
    Protocol(Vec<String>),
    #[error("non-finite loss or gradient at epoch {epoch}; model restored to the last good state")]
    NonFinite { epoch: usize },
    #[error("smoothing window {window} exceeds {count} records")]
    Window { window: usize, count: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    SupCon(#[from] SupConError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs between ROC AUC recordings.
    pub eval_every: usize,
    /// Recordings per trailing mean.
    pub smooth_window: usize,
    pub guns_per_batch: usize,
    pub casings_per_gun_per_batch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Independent repetitions (seeds `seed`, `seed + 1`, ...).
    pub runs: usize,
    /// Stop once the trailing-mean AUC reaches this value.
    pub target_smoothed_auc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20_000,
            eval_every: 20,
            smooth_window: 10,
            guns_per_batch: 8,
            casings_per_gun_per_batch: 2,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            runs: 5,
            target_smoothed_auc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.eval_every == 0 {
            return fail("epochs and eval_every must be >= 1".into());
        }
        if !self.epochs.is_multiple_of(self.eval_every) {
            return fail(format!("eval_every {} does not divide epochs {}", self.eval_every, self.epochs));
        }
        if self.smooth_window == 0 {
            return fail("smooth_window must be >= 1".into());
        }
        if self.casings_per_gun_per_batch < 2 {
            return fail("casings_per_gun_per_batch must be >= 2".into());
        }
        if self.guns_per_batch < 2 {
            return fail("guns_per_batch must be >= 2 so every anchor has negatives".into());
        }
        if self.runs == 0 {
            return fail("runs must be >= 1".into());
        }
        self.optimizer_config().validate()?;
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.learning_rate),
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.learning_rate),
        }
    }

    /// Number of ROC AUC records a full run produces.
    pub fn record_count(&self) -> usize {
        self.epochs / self.eval_every
    }
}

/// A preprocessed casing image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub casing_id: String,
    pub gun_id: String,
    pub image: PolarImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub roc_auc: f64,
    /// Mean over the epoch's batches of the batch loss divided by batch size.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub max_auc: f64,
    pub smoothed_max_auc: f64,
    pub best_epoch: usize,
    pub records: Vec<TrainRecord>,
}

fn group_by_gun(dataset: &[LabeledImage]) -> BTreeMap<&str, Vec<usize>> {
    let mut guns: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.iter().enumerate() {
        guns.entry(item.gun_id.as_str()).or_default().push(i);
    }
    guns
}

/// Partitions a shuffled gun list into batches of `guns_per_batch` guns with
/// `per_gun` casings each, deterministically from `(seed, epoch)`. A single
/// leftover gun joins the previous batch; a shorter remainder forms its own.
pub fn make_batches(
    dataset: &[LabeledImage],
    guns_per_batch: usize,
    per_gun: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>, TrainError> {
    let guns = group_by_gun(dataset);
    if let Some((gun, idx)) = guns.iter().find(|(_, idx)| idx.len() < 2) {
        return Err(TrainError::Dataset(format!(
            "gun {gun} has {} casing(s); every gun needs at least 2",
            idx.len()
        )));
    }
    if let Some((gun, idx)) = guns.iter().find(|(_, idx)| idx.len() < per_gun) {
        return Err(TrainError::Dataset(format!(
            "gun {gun} has {} casings, fewer than the {per_gun} drawn per batch",
            idx.len()
        )));
    }
    if guns.len() < 2 {
        return Err(TrainError::Dataset("need at least 2 guns".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<&Vec<usize>> = guns.values().collect();
    order.shuffle(&mut rng);
    let mut groups: Vec<Vec<&Vec<usize>>> = order.chunks(guns_per_batch.max(2)).map(<[_]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let last = groups.pop().expect("non-empty");
        groups.last_mut().expect("non-empty").extend(last);
    }
    Ok(groups
        .into_iter()
        .map(|group| {
            group
                .into_iter()
                .flat_map(|casings| casings.choose_multiple(&mut rng, per_gun).copied().collect::<Vec<_>>())
                .collect()
        })
        .collect())
}

/// Forward, loss and backward for one batch; returns the summed loss and
/// the parameter gradients of that sum.
pub fn batch_gradients(
    model: &Model,
    inputs: &[&Tensor],
    labels: &[&str],
) -> Result<(f64, Gradients), TrainError> {
    let passes = inputs
        .par_iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>, NetError>>()?;
    let embeddings = passes.iter().map(|(e, _)| e.vector.clone()).collect();
    let batch = LabeledBatch::new(embeddings, labels.to_vec(), model.config().temperature)?;
    let (loss, grad_emb) = supcon_grad(&batch);
    let per_image = passes
        .par_iter()
        .zip(&grad_emb)
        .map(|((_, tape), g)| {
            let mut grads = model.zero_gradients();
            model.backward(tape, g, &mut grads)?;
            Ok(grads)
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    // fixed summation order keeps results independent of the thread count
    let mut total = model.zero_gradients();
    for g in &per_image {
        total.add_assign(g);
    }
    Ok((loss, total))
}

pub fn embed_all(model: &Model, images: &[LabeledImage]) -> Result<Vec<Embedding>, NetError> {
    images.par_iter().map(|item| model.embed(&item.image)).collect()
}

/// ROC AUC of embedding dot products over all unordered pairs.
pub fn evaluate_auc(model: &Model, eval_set: &[LabeledImage]) -> Result<f64, TrainError> {
    let emb = embed_all(model, eval_set)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let s = similarity(&emb[i], &emb[j]);
            if eval_set[i].gun_id == eval_set[j].gun_id {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    Ok(auc_from_scores(&pos, &neg)?)
}

fn check_disjoint(train: &[LabeledImage], eval: &[LabeledImage]) -> Result<(), TrainError> {
    let train_guns: BTreeSet<&str> = train.iter().map(|x| x.gun_id.as_str()).collect();
    let shared: BTreeSet<&str> = eval
        .iter()
        .map(|x| x.gun_id.as_str())
        .filter(|g| train_guns.contains(g))
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Protocol(shared.into_iter().map(str::to_string).collect()))
    }
}

fn snapshot(model: &Model) -> Vec<Vec<f64>> {
    model.parameters().iter().map(|p| p.data().to_vec()).collect()
}

fn restore(model: &mut Model, params: &[Vec<f64>]) {
    for (p, saved) in model.parameters_mut().iter_mut().zip(params) {
        p.data_mut().copy_from_slice(saved);
    }
}

/// Trains `model` in place. Every `eval_every` epochs the held-out ROC AUC is
/// recorded; the parameters with the highest AUC are kept (and written to
/// `checkpoint` when given) and left in `model` on return.
pub fn train(
    model: &mut Model,
    train_set: &[LabeledImage],
    eval_set: &[LabeledImage],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    check_disjoint(train_set, eval_set)?;
    let inputs: Vec<Tensor> = train_set.iter().map(|x| polar_input(&x.image)).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer_config(), model)?;
    let mut records = Vec::with_capacity(cfg.record_count());
    let mut last_good = snapshot(model);
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(
            train_set,
            cfg.guns_per_batch,
            cfg.casings_per_gun_per_batch,
            cfg.seed,
            epoch,
        )?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let xs: Vec<&Tensor> = batch.iter().map(|&i| &inputs[i]).collect();
            let labels: Vec<&str> = batch.iter().map(|&i| train_set[i].gun_id.as_str()).collect();
            let (loss, grads) = batch_gradients(model, &xs, &labels)?;
            if !loss.is_finite() || !grads.is_finite() {
                restore(model, &last_good);
                return Err(TrainError::NonFinite { epoch });
            }
            optimizer.step(model, &grads);
            loss_sum += loss / batch.len() as f64;
        }
        let loss = loss_sum / batches.len() as f64;

        if epoch % cfg.eval_every == 0 {
            check_disjoint(train_set, eval_set)?;
            let roc_auc = evaluate_auc(model, eval_set)?;
            records.push(TrainRecord { epoch, roc_auc, loss });
            log::info!("epoch {epoch}: loss {loss:.5}, held-out AUC {roc_auc:.4}");
            last_good = snapshot(model);
            if best.as_ref().is_none_or(|(b, _, _)| roc_auc > *b) {
                if let Some(path) = checkpoint {
                    save_checkpoint(model, path)?;
                }
                best = Some((roc_auc, epoch, last_good.clone()));
            }
            if let Some(target) = cfg.target_smoothed_auc {
                if records.len() >= cfg.smooth_window {
                    let tail = &records[records.len() - cfg.smooth_window..];
                    let mean = tail.iter().map(|r| r.roc_auc).sum::<f64>() / tail.len() as f64;
                    if mean >= target {
                        log::info!("trailing mean AUC {mean:.4} reached target {target} at epoch {epoch}");
                        break;
                    }
                }
            }
        }
    }

    let (max_auc, best_epoch, params) = best.expect("at least one evaluation");
    restore(model, &params);
    let window = cfg.smooth_window.min(records.len());
    let smoothed_max_auc = smooth_records(&records, window)?
        .into_iter()
        .map(|(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RunSummary {
        max_auc,
        smoothed_max_auc,
        best_epoch,
        records,
    })
}

/// Trailing means over `window` consecutive records, labelled with the
/// epoch of the last record in each window.
pub fn smooth_records(records: &[TrainRecord], window: usize) -> Result<Vec<(usize, f64)>, TrainError> {
    if window == 0 || window > records.len() {
        return Err(TrainError::Window {
            window,
            count: records.len(),
        });
    }
    Ok(records
        .windows(window)
        .map(|w| {
            let mean = w.iter().map(|r| r.roc_auc).sum::<f64>() / window as f64;
            (w[window - 1].epoch, mean)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsSummary {
    pub avg_max_auc: f64,
    pub avg_smoothed_max_auc: f64,
    pub max_aucs: Vec<f64>,
    pub smoothed_max_aucs: Vec<f64>,
}

impl RunsSummary {
    /// Runs as columns, mean last, three decimals.
    pub fn table(&self) -> String {
        let mut s = String::from("metric");
        for i in 0..self.max_aucs.len() {
            write!(s, ",run {}", i + 1).unwrap();
        }
        s.push_str(",mean\n");
        for (name, values, mean) in [
            ("High ROC AUC", &self.max_aucs, self.avg_max_auc),
            ("Smoothed High ROC AUC", &self.smoothed_max_aucs, self.avg_smoothed_max_auc),
        ] {
            s.push_str(name);
            for v in values {
                write!(s, ",{v:.3}").unwrap();
            }
            writeln!(s, ",{mean:.3}").unwrap();
        }
        s
    }
}

pub fn summarize_runs(runs: &[RunSummary]) -> Result<RunsSummary, TrainError> {
    if runs.is_empty() {
        return Err(TrainError::Config("no runs to summarize".into()));
    }
    let max_aucs: Vec<f64> = runs.iter().map(|r| r.max_auc).collect();
    let smoothed_max_aucs: Vec<f64> = runs.iter().map(|r| r.smoothed_max_auc).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(RunsSummary {
        avg_max_auc: mean(&max_aucs),
        avg_smoothed_max_auc: mean(&smoothed_max_aucs),
        max_aucs,
        smoothed_max_aucs,
    })
}

/// `epoch,loss,roc_auc` log.
pub fn write_training_log(records: &[TrainRecord], path: &Path) -> Result<(), TrainError> {
    let mut s = String::from("epoch,loss,roc_auc\n");
    for r in records {
        writeln!(s, "{},{:?},{:?}", r.epoch, r.loss, r.roc_auc).unwrap();
    }
    std::fs::write(path, s).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

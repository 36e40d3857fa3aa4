//! One function per subcommand. Each writes into its own directory under
//! `output_dir` and finishes with a `run.json`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use breechmark::cmc::{cmc_score_all_pairs, cmc_score_pairs};
use breechmark::metrics::{
    histogram_svg, pair_labels, roc_auc, roc_overlay_svg, scatter_svg, score_histogram, score_scatter,
    write_histogram_csv, write_roc_csv, write_scatter_csv, write_summary_json, EvaluationSummary, Method,
    ScoreSet,
};
use breechmark::net::{build_model, load_checkpoint, similarity, Model};
use breechmark::preprocess::{preprocess_scan, PolarImage};
use breechmark::scan_io::{
    generate_synthetic_dataset, load_dataset, read_internal, read_manifest, write_internal, write_manifest,
    DatasetManifest, ManifestEntry, ScanRecord,
};
use breechmark::trainer::{
    embed_all, summarize_runs, train as train_model, write_training_log, LabeledImage, RunSummary, RunsSummary,
    TrainConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::run::Run;
use crate::ScoreMethod;

const HISTOGRAM_BINS: usize = 25;
const SCATTER_BINS: usize = 20;
const POLAR_EXTENSION: &str = "bmkp";

/// File-name-safe form of a label.
fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn file_stem(r: &ScanRecord) -> String {
    format!("{}__{}", sanitize(&r.gun_id), sanitize(&r.casing_id))
}

fn manifest_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scans".into(), |s| s.to_string_lossy().into_owned())
}

fn require(path: PathBuf, hint: &str) -> anyhow::Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        bail!("missing input {} ({hint})", path.display())
    }
}

/// Writes each record as an internal scan file in `run.dir`; returns the
/// manifest entries pointing at them.
fn write_scan_files(run: &Run, records: &[ScanRecord]) -> anyhow::Result<Vec<ManifestEntry>> {
    records
        .par_iter()
        .map(|r| {
            let path = run.dir.join(format!("{}.bmk", file_stem(r)));
            write_internal(r, &path)?;
            Ok(ManifestEntry {
                path,
                gun_id: r.gun_id.clone(),
                casing_id: r.casing_id.clone(),
            })
        })
        .collect()
}

fn write_named_manifest(run: &mut Run, name: &str, entries: Vec<ManifestEntry>) -> anyhow::Result<PathBuf> {
    let path = run.output(format!("{name}.csv"));
    write_manifest(&DatasetManifest::new(name, entries)?, &path)?;
    Ok(path)
}

pub fn synth(cfg: &RunConfig, workers: usize) -> anyhow::Result<()> {
    let mut run = Run::start(cfg, "synth", "scans", workers)?;
    let records = generate_synthetic_dataset(&cfg.synth)?;
    run.step("generate");
    let entries = write_scan_files(&run, &records)?;
    write_named_manifest(&mut run, "all", entries.clone())?;
    if cfg.holdout_guns > 0 {
        let guns: BTreeSet<&str> = records.iter().map(|r| r.gun_id.as_str()).collect();
        let held: BTreeSet<&str> = guns.iter().rev().take(cfg.holdout_guns).copied().collect();
        let (eval, train): (Vec<_>, Vec<_>) = entries.into_iter().partition(|e| held.contains(e.gun_id.as_str()));
        write_named_manifest(&mut run, "train", train)?;
        write_named_manifest(&mut run, "eval", eval)?;
        log::info!("held out guns: {}", held.into_iter().collect::<Vec<_>>().join(", "));
    }
    run.step("write");
    log::info!("wrote {} synthetic scans", records.len());
    run.finish()
}

pub fn ingest(cfg: &RunConfig, workers: usize, manifest: &Path, name: Option<String>) -> anyhow::Result<()> {
    let mut run = Run::start(cfg, "ingest", "scans", workers)?;
    let records = load_dataset(&read_manifest(manifest)?)?;
    run.step("read");
    let entries = write_scan_files(&run, &records)?;
    let name = name.unwrap_or_else(|| manifest_name(manifest));
    write_named_manifest(&mut run, &name, entries)?;
    run.step("write");
    log::info!("ingested {} scans as {name}", records.len());
    run.finish()
}

/// The raw manifests `preprocess` works on when none are given.
fn default_raw_manifests(cfg: &RunConfig) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let configured: Vec<(String, PathBuf)> = [("train", &cfg.manifests.train), ("eval", &cfg.manifests.eval)]
        .into_iter()
        .filter_map(|(n, p)| p.as_ref().map(|p| (n.to_string(), p.clone())))
        .collect();
    if !configured.is_empty() {
        return Ok(configured);
    }
    let scans = cfg.output_dir.join("scans");
    let split: Vec<(String, PathBuf)> = ["train", "eval"]
        .into_iter()
        .map(|n| (n.to_string(), scans.join(format!("{n}.csv"))))
        .filter(|(_, p)| p.is_file())
        .collect();
    if !split.is_empty() {
        return Ok(split);
    }
    let all = scans.join("all.csv");
    if all.is_file() {
        return Ok(vec![("all".into(), all)]);
    }
    bail!(
        "no input manifests: pass --manifest, set [manifests] in the config, or run `synth` first (looked for {})",
        scans.display()
    )
}

/// Preprocesses every record, collecting all failures into one error.
fn preprocess_records(cfg: &RunConfig, records: &[ScanRecord]) -> anyhow::Result<Vec<(ScanRecord, PolarImage)>> {
    let results: Vec<_> = records
        .par_iter()
        .map(|r| {
            preprocess_scan(&r.surface, &cfg.preprocess)
                .map_err(|e| format!("{}: {e}", r.casing_id))
                .and_then(|p| {
                    ScanRecord::new(p.cmc, r.gun_id.clone(), r.casing_id.clone(), r.source_path.clone())
                        .map(|rec| (rec, p.polar))
                        .map_err(|e| format!("{}: {e}", r.casing_id))
                })
        })
        .collect();
    let failures: Vec<String> = results.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    if !failures.is_empty() {
        bail!("preprocessing failed for {} scan(s): {}", failures.len(), failures.join("; "));
    }
    Ok(results.into_iter().map(Result::unwrap).collect())
}

pub fn preprocess(cfg: &RunConfig, workers: usize, manifests: &[PathBuf]) -> anyhow::Result<()> {
    let inputs = if manifests.is_empty() {
        default_raw_manifests(cfg)?
    } else {
        manifests.iter().map(|p| (manifest_name(p), p.clone())).collect()
    };
    let mut run = Run::start(cfg, "preprocess", "preprocessed", workers)?;
    for (name, path) in inputs {
        let records = load_dataset(&read_manifest(&path)?)?;
        let processed = preprocess_records(cfg, &records)?;
        let entries = processed
            .par_iter()
            .map(|(rec, polar)| {
                let path = run.dir.join(format!("{}.bmk", file_stem(rec)));
                write_internal(rec, &path)?;
                polar.write(&path.with_extension(POLAR_EXTENSION))?;
                Ok(ManifestEntry {
                    path,
                    gun_id: rec.gun_id.clone(),
                    casing_id: rec.casing_id.clone(),
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        write_named_manifest(&mut run, &name, entries)?;
        run.step(&name);
        log::info!("preprocessed {} scans from {}", records.len(), path.display());
    }
    run.finish()
}

/// CMC rasters and polar images of a preprocessed manifest.
fn load_preprocessed(manifest: &Path) -> anyhow::Result<(Vec<ScanRecord>, Vec<PolarImage>)> {
    let m = read_manifest(manifest)?;
    let loaded = m
        .entries
        .par_iter()
        .map(|e| {
            let mut rec = read_internal(&e.path)?;
            rec.gun_id = e.gun_id.clone();
            rec.casing_id = e.casing_id.clone();
            let polar_path = e.path.with_extension(POLAR_EXTENSION);
            let polar = PolarImage::read(&polar_path)
                .with_context(|| format!("{} has no polar image; was it written by `preprocess`?", e.path.display()))?;
            Ok((rec, polar))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(loaded.into_iter().unzip())
}

fn labeled(records: &[ScanRecord], polars: Vec<PolarImage>) -> Vec<LabeledImage> {
    records
        .iter()
        .zip(polars)
        .map(|(r, image)| LabeledImage {
            casing_id: r.casing_id.clone(),
            gun_id: r.gun_id.clone(),
            image,
        })
        .collect()
}

fn preprocessed(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join("preprocessed").join(format!("{name}.csv"))
}

/// `train/summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub variant: String,
    pub width: usize,
    pub layers: usize,
    pub parameters: usize,
    pub runs: RunsSummary,
    pub best_epochs: Vec<usize>,
    /// 1-based run whose checkpoint was copied to `best.ckpt`.
    pub best_run: usize,
}

pub fn train(
    cfg: &RunConfig,
    workers: usize,
    train_manifest: Option<PathBuf>,
    eval_manifest: Option<PathBuf>,
) -> anyhow::Result<()> {
    let hint = "run `preprocess` first or pass it explicitly";
    let train_path = require(train_manifest.unwrap_or_else(|| preprocessed(cfg, "train")), hint)?;
    let eval_path = require(eval_manifest.unwrap_or_else(|| preprocessed(cfg, "eval")), hint)?;
    let mut run = Run::start(cfg, "train", "train", workers)?;
    let (train_recs, train_polar) = load_preprocessed(&train_path)?;
    let (eval_recs, eval_polar) = load_preprocessed(&eval_path)?;
    let train_set = labeled(&train_recs, train_polar);
    let eval_set = labeled(&eval_recs, eval_polar);
    run.step("load");
    log::info!("training on {} casings, evaluating on {}", train_set.len(), eval_set.len());

    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut model: Option<Model> = None;
    for r in 0..cfg.train.runs {
        let dir = run.dir.join(format!("run{}", r + 1));
        std::fs::create_dir_all(&dir)?;
        let mut m = build_model(&cfg.model, cfg.seed + r as u64)?;
        let tc = TrainConfig {
            seed: cfg.train.seed + r as u64,
            ..cfg.train.clone()
        };
        let ckpt = run.output(format!("run{}/best.ckpt", r + 1));
        let summary = train_model(&mut m, &train_set, &eval_set, &tc, Some(&ckpt))?;
        write_training_log(&summary.records, &run.output(format!("run{}/log.csv", r + 1)))?;
        std::fs::write(run.output(format!("run{}/summary.json", r + 1)), serde_json::to_string_pretty(&summary)?)?;
        log::info!(
            "run {}: max AUC {:.4}, smoothed max {:.4} (epoch {})",
            r + 1,
            summary.max_auc,
            summary.smoothed_max_auc,
            summary.best_epoch
        );
        summaries.push(summary);
        model.get_or_insert(m);
        run.step(&format!("run{}", r + 1));
    }
    let runs = summarize_runs(&summaries)?;
    let best_run = summaries
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.max_auc.total_cmp(&b.1.max_auc).then(b.0.cmp(&a.0)))
        .map_or(1, |(i, _)| i + 1);
    std::fs::copy(run.dir.join(format!("run{best_run}/best.ckpt")), run.output("best.ckpt"))?;
    let model = model.expect("runs >= 1");
    let summary = TrainingSummary {
        variant: cfg.model.variant.to_string(),
        width: cfg.model.width,
        layers: model.layer_count(),
        parameters: model.count_parameters(),
        best_epochs: summaries.iter().map(|s| s.best_epoch).collect(),
        runs: runs.clone(),
        best_run,
    };
    std::fs::write(run.output("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    std::fs::write(run.output("table.csv"), runs.table())?;
    print!("{}", runs.table());
    run.finish()
}

fn default_checkpoint(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    require(
        checkpoint.unwrap_or_else(|| cfg.output_dir.join("train").join("best.ckpt")),
        "run `train` first or pass --checkpoint",
    )
}

pub fn embed(
    cfg: &RunConfig,
    workers: usize,
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> anyhow::Result<()> {
    let manifest = require(manifest.unwrap_or_else(|| preprocessed(cfg, "eval")), "run `preprocess` first")?;
    let checkpoint = default_checkpoint(cfg, checkpoint)?;
    let mut run = Run::start(cfg, "embed", "embeddings", workers)?;
    let model = load_checkpoint(&checkpoint)?;
    let (records, polars) = load_preprocessed(&manifest)?;
    let emb = embed_all(&model, &labeled(&records, polars))?;
    let path = run.output(format!("{}.csv", manifest_name(&manifest)));
    let mut w = csv::Writer::from_path(&path)?;
    let dim = model.config().embedding_dim;
    let mut header = vec!["casing_id".to_string(), "gun_id".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (r, e) in records.iter().zip(&emb) {
        let mut row = vec![r.casing_id.clone(), r.gun_id.clone()];
        row.extend(e.vector.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    run.step("embed");
    run.finish()
}

pub fn score(
    cfg: &RunConfig,
    workers: usize,
    method: ScoreMethod,
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> anyhow::Result<()> {
    let manifest = require(manifest.unwrap_or_else(|| preprocessed(cfg, "eval")), "run `preprocess` first")?;
    let checkpoint = match method {
        ScoreMethod::Contrastive => Some(default_checkpoint(cfg, checkpoint)?),
        ScoreMethod::Cmc => None,
    };
    let mut run = Run::start(cfg, "score", "scores", workers)?;
    let (records, polars) = load_preprocessed(&manifest)?;
    run.step("load");
    let set = match method {
        ScoreMethod::Contrastive => {
            let model = load_checkpoint(checkpoint.as_deref().expect("contrastive has a checkpoint"))?;
            let emb = embed_all(&model, &labeled(&records, polars))?;
            let labels = pair_labels(&records)?;
            let n = records.len();
            let scores: Vec<f64> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| similarity(&emb[i], &emb[j]))
                .collect();
            let set = ScoreSet::from_labels(Method::Contrastive, &labels, &scores)?;
            set.write_csv(&run.output("contrastive.csv"))?;
            set
        }
        ScoreMethod::Cmc => {
            let scores = cmc_score_all_pairs(&records, &cfg.cmc, workers)?;
            scores.write_csv(&run.output("cmc.csv"))?;
            scores.write_benchmark_json(&run.output("cmc_benchmark.json"))?;
            if scores.failed() > 0 {
                log::warn!("{} CMC pair(s) failed and were scored 0", scores.failed());
            }
            scores.to_score_set()?
        }
    };
    run.step("score");
    match roc_auc(&set) {
        Ok(curve) => println!("{} pairs, ROC AUC {:.4}", set.len(), curve.auc),
        Err(e) => println!("{} pairs ({e})", set.len()),
    }
    run.finish()
}

/// Distinct labels for score files: file stems, suffixed on collision.
fn labels_for(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .map(|p| {
            let base = sanitize(&manifest_name(p));
            let mut label = base.clone();
            let mut k = 2;
            while !seen.insert(label.clone()) {
                label = format!("{base}_{k}");
                k += 1;
            }
            label
        })
        .collect()
}

struct Evaluated {
    label: String,
    set: ScoreSet,
    summary: EvaluationSummary,
    curve: breechmark::metrics::RocCurve,
}

fn evaluate_sets(run: &mut Run, paths: &[PathBuf]) -> anyhow::Result<Vec<Evaluated>> {
    let labels = labels_for(paths);
    let mut out = Vec::new();
    for (path, label) in paths.iter().zip(labels) {
        let set = ScoreSet::read_csv(path)?;
        let curve = roc_auc(&set).with_context(|| format!("evaluating {}", path.display()))?;
        write_roc_csv(&curve, &run.output(format!("roc_{label}.csv")))?;
        let summary = EvaluationSummary {
            method: set.method(),
            auc: curve.auc,
            same_source_pairs: curve.positives,
            different_source_pairs: curve.negatives,
            source: path.display().to_string(),
        };
        println!("{label} ({}): ROC AUC {:.4} over {} pairs", set.method(), curve.auc, set.len());
        out.push(Evaluated {
            label,
            set,
            summary,
            curve,
        });
    }
    let curves: Vec<(&str, &breechmark::metrics::RocCurve)> =
        out.iter().map(|e| (e.label.as_str(), &e.curve)).collect();
    std::fs::write(run.output("roc.svg"), roc_overlay_svg(&curves))?;
    let summaries: Vec<EvaluationSummary> = out.iter().map(|e| e.summary.clone()).collect();
    write_summary_json(&summaries, &run.output("summary.json"))?;
    if let [a, b, ..] = out.as_slice() {
        let scatter = score_scatter(&a.set, &b.set)?;
        write_scatter_csv(&scatter, &run.output("scatter.csv"))?;
        std::fs::write(run.output("scatter.svg"), scatter_svg(&scatter, SCATTER_BINS))?;
        if let Some(r) = scatter.pearson_nonzero_cmc {
            println!("Pearson r ({} pairs): {r:.4}", scatter.nonzero_cmc_pairs);
        }
    }
    Ok(out)
}

pub fn evaluate(cfg: &RunConfig, workers: usize, scores: &[PathBuf]) -> anyhow::Result<()> {
    let mut run = Run::start(cfg, "evaluate", "evaluation", workers)?;
    evaluate_sets(&mut run, scores)?;
    run.step("evaluate");
    run.finish()
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn report(
    cfg: &RunConfig,
    workers: usize,
    scores: Vec<PathBuf>,
    train_summary: Option<PathBuf>,
) -> anyhow::Result<()> {
    let scores = if scores.is_empty() {
        let dir = cfg.output_dir.join("scores");
        let found: Vec<PathBuf> = ["contrastive.csv", "cmc.csv"]
            .iter()
            .map(|f| dir.join(f))
            .filter(|p| p.is_file())
            .collect();
        if found.is_empty() {
            bail!("no score files in {} (run `score` first or pass --scores)", dir.display());
        }
        found
    } else {
        scores
    };
    let train_summary = match train_summary {
        Some(p) => Some(require(p, "training summary")?),
        None => Some(cfg.output_dir.join("train").join("summary.json")).filter(|p| p.is_file()),
    };
    let training: Option<TrainingSummary> = train_summary
        .as_ref()
        .map(|p| -> anyhow::Result<_> {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .transpose()?;

    let mut run = Run::start(cfg, "report", "report", workers)?;
    let evaluated = evaluate_sets(&mut run, &scores)?;
    for e in &evaluated {
        let hist = score_histogram(&e.set, HISTOGRAM_BINS)?;
        write_histogram_csv(&hist, &run.output(format!("hist_{}.csv", e.label)))?;
        let title = format!("{} similarity scores", e.set.method());
        std::fs::write(run.output(format!("hist_{}.svg", e.label)), histogram_svg(&title, &hist))?;
    }
    let mut table = String::from("method,source,layers,parameters,avg_high_roc_auc,avg_smoothed_high_roc_auc,held_out_roc_auc\n");
    for e in &evaluated {
        let t = training.as_ref().filter(|_| e.set.method() == Method::Contrastive);
        table.push_str(&format!(
            "{},{},{},{},{},{},{:.3}\n",
            e.set.method(),
            e.label,
            fmt_opt(t.map(|t| t.layers)),
            fmt_opt(t.map(|t| t.parameters)),
            fmt_opt(t.map(|t| format!("{:.3}", t.runs.avg_max_auc))),
            fmt_opt(t.map(|t| format!("{:.3}", t.runs.avg_smoothed_max_auc))),
            e.curve.auc
        ));
    }
    std::fs::write(run.output("table.csv"), &table)?;
    print!("{table}");
    run.step("report");
    run.finish()
}

#[derive(Debug, Serialize)]
struct BenchReport {
    scans: usize,
    total_pairs: usize,
    measured_pairs: usize,
    failed_pairs: usize,
    workers: usize,
    wall_seconds: f64,
    pairs_per_sec: f64,
    /// Throughput per busy core: `pairs_per_sec / min(workers, cores)`.
    pairs_per_sec_per_core: f64,
    projected_workers: usize,
    /// All pairs at `projected_workers` times the per-core rate.
    projected_total_seconds: f64,
}

pub fn bench_cmc(
    cfg: &RunConfig,
    workers: usize,
    manifest: Option<PathBuf>,
    pairs: Option<usize>,
    project_workers: usize,
) -> anyhow::Result<()> {
    if project_workers == 0 {
        return Err(crate::UsageError("--project-workers must be >= 1".into()).into());
    }
    let mut run = Run::start(cfg, "bench-cmc", "bench", workers)?;
    let records = match manifest {
        Some(m) => load_preprocessed(&m)?.0,
        None => {
            let raw = generate_synthetic_dataset(&cfg.synth)?;
            preprocess_records(cfg, &raw)?.into_iter().map(|(r, _)| r).collect()
        }
    };
    run.step("prepare");
    let n = records.len();
    let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let total = all.len();
    let measured: Vec<(usize, usize)> = match pairs {
        Some(0) => return Err(crate::UsageError("--pairs must be >= 1".into()).into()),
        Some(k) if k < total => (0..k).map(|i| all[i * total / k]).collect(),
        _ => all,
    };
    let scores = if measured.len() == total {
        cmc_score_all_pairs(&records, &cfg.cmc, workers)?
    } else {
        cmc_score_pairs(&records, &measured, &cfg.cmc, workers)?
    };
    run.step("score");
    scores.write_csv(&run.output("scores.csv"))?;
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    let b = scores.benchmark;
    let per_core = b.pairs_per_sec / workers.min(cores) as f64;
    let report = BenchReport {
        scans: n,
        total_pairs: total,
        measured_pairs: b.pairs,
        failed_pairs: scores.failed(),
        workers,
        wall_seconds: b.wall_seconds,
        pairs_per_sec: b.pairs_per_sec,
        pairs_per_sec_per_core: per_core,
        projected_workers: project_workers,
        projected_total_seconds: total as f64 / (per_core * project_workers as f64),
    };
    std::fs::write(run.output("cmc_benchmark.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "{} of {} pairs in {:.1} s ({:.3} pairs/s); projected {:.2} h for all pairs on {} workers",
        report.measured_pairs,
        total,
        report.wall_seconds,
        report.pairs_per_sec,
        report.projected_total_seconds / 3600.0,
        project_workers
    );
    if report.failed_pairs > 0 {
        return Err(anyhow!("{} CMC pair(s) failed", report.failed_pairs));
    }
    run.finish()
}

//! Acceptance suite: runs each primary criterion in turn and prints one
//! PASS/FAIL line per criterion. Set `BREECHMARK_ACCEPTANCE=1,5,8` to run a
//! subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use breechmark::cmc::{cmc_score, cmc_score_all_pairs, rotate_surface, CmcParams};
use breechmark::metrics::{auc_from_scores, ScoreSet};
use breechmark::net::gradcheck::{check_layers, check_model, check_supcon};
use breechmark::net::{build_model, similarity, ModelConfig, Variant, ANGULAR_STRIDE};
use breechmark::preprocess::{PolarImage, ANGLES, RADII};
use breechmark::scan_io::{band_limited_surface, read_manifest, ScanRecord};
use breechmark::supcon::{supcon_loss, supcon_loss_rewritten, LabeledBatch};
use breechmark::trainer::{
    evaluate_auc, smooth_records, summarize_runs, LabeledImage, RunSummary, TrainConfig, TrainRecord,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let (mut checks, mut entries, mut skipped) = (0, 0, 0);
    for seed in 0..20 {
        let mut all = check_layers(seed, H).map_err(|e| e.to_string())?;
        all.push(check_supcon(seed, H));
        all.extend(check_model(Variant::ALL[seed as usize % 4], seed, H, 6).map_err(|e| e.to_string())?);
        for c in all {
            ensure!(c.max_rel_error < GRAD_TOL, "seed {seed}: {} has relative error {:.2e}", c.name, c.max_rel_error);
            worst = worst.max(c.max_rel_error);
            checks += 1;
            entries += c.entries;
            skipped += c.skipped;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    ensure!(skipped * 20 < entries * 3, "{skipped} of {entries} entries skipped at ReLU kinks");
    Ok(format!(
        "{checks} checks over 20 seeds, max rel error {worst:.2e}, {skipped}/{entries} kink-crossing entries skipped, {secs:.1} s"
    ))
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn loss_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let taus = [0.05, 0.1, 0.5, 1.0];
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let size = rng.gen_range(4..=64);
        let classes = rng.gen_range(2..=8).min(size / 2);
        let dim = rng.gen_range(2..=16);
        let mut labels: Vec<usize> = (0..size).map(|k| k % classes).collect();
        labels.shuffle(&mut rng);
        let emb = (0..size).map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let batch = LabeledBatch::new(emb, labels, taus[i % 4]).map_err(|e| e.to_string())?;
        let diff = (supcon_loss(&batch) - supcon_loss_rewritten(&batch)).abs();
        ensure!(diff < 1e-9, "batch {i} (size {size}, {classes} classes): forms differ by {diff:.2e}");
        worst = worst.max(diff);
    }
    Ok(format!("100 batches, max difference {worst:.2e}"))
}

/// Periodic in angle with angular frequencies up to 8, smooth in radius;
/// `shift` may be fractional.
fn band_limited_polar(seed: u64, shift: f64) -> PolarImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            (
                f64::from(rng.gen_range(1..=8)),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut values = Vec::with_capacity(ANGLES * RADII);
    for a in 0..ANGLES {
        let theta = std::f64::consts::TAU * (a as f64 - shift) / ANGLES as f64;
        for r in 0..RADII {
            let rho = r as f64 / RADII as f64;
            let v: f64 = terms
                .iter()
                .map(|&(k, phase, fr, pr)| (k * theta + phase).cos() * (fr * std::f64::consts::PI * rho + pr).cos())
                .sum();
            values.push(v + 0.01);
        }
    }
    PolarImage::from_values(values).expect("polar shape")
}

fn shift_invariance() -> Outcome {
    let model = build_model(&ModelConfig::default(), 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_diff, mut worst_cos): (f64, f64) = (0.0, 1.0);
    for seed in 0..20 {
        let s = band_limited_surface(ANGLES, RADII, 2.0, 1000 + seed, 1.0);
        let img = PolarImage::from_values(s.heights().to_vec()).expect("polar shape");
        let base = model.embed(&img).map_err(|e| e.to_string())?;
        let k = rng.gen_range(1..ANGLES / ANGULAR_STRIDE) * ANGULAR_STRIDE;
        let shifted = model.embed(&img.roll(k as isize)).map_err(|e| e.to_string())?;
        let diff = base.vector.iter().zip(&shifted.vector).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure!(diff < 1e-5, "input {seed}, shift {k}: max difference {diff:.2e}");
        worst_diff = worst_diff.max(diff);

        let frac = rng.gen_range(0.0..ANGLES as f64);
        let a = model.embed(&band_limited_polar(seed, 0.0)).map_err(|e| e.to_string())?;
        let b = model.embed(&band_limited_polar(seed, frac)).map_err(|e| e.to_string())?;
        let cos = similarity(&a, &b);
        ensure!(cos >= 0.99, "input {seed}, shift {frac:.3}: cosine {cos:.4}");
        worst_cos = worst_cos.min(cos);
    }
    Ok(format!(
        "20 inputs: integer shifts max difference {worst_diff:.2e}, fractional shifts min cosine {worst_cos:.5}"
    ))
}

fn architecture() -> Outcome {
    let expected = [
        (Variant::Reference, 11),
        (Variant::DoubleBlock, 20),
        (Variant::BlockDepth2, 8),
        (Variant::BlockDepth4, 14),
    ];
    let mut detail = Vec::new();
    for (variant, layers) in expected {
        let cfg = |width| ModelConfig { variant, width, ..ModelConfig::default() };
        let got = build_model(&cfg(16), 0).map_err(|e| e.to_string())?.layer_count();
        ensure!(got == layers, "{variant}: {got} layers, expected {layers}");
        let mut params = Vec::new();
        for w in [8, 16, 32, 64] {
            params.push(build_model(&cfg(w), 0).map_err(|e| e.to_string())?.count_parameters());
        }
        for p in params.windows(2) {
            let ratio = p[1] as f64 / p[0] as f64;
            ensure!((3.5..=4.1).contains(&ratio), "{variant}: width ratio {ratio:.3} ({} -> {})", p[0], p[1]);
        }
        detail.push(format!("{variant} {layers} layers {params:?}"));
    }
    Ok(detail.join("; "))
}

/// All P x N ordered comparisons, ties counted as one half.
fn brute_force_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &p in pos {
        for &n in neg {
            twice += u64::from(p >= n) + u64::from(p > n);
        }
    }
    twice as f64 / 2.0 / (pos.len() * neg.len()) as f64
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tied_sets = 0;
    for i in 0..200 {
        let (p, n) = (rng.gen_range(1..=150), rng.gen_range(1..=150));
        let levels = rng.gen_range(1..=5);
        let tied = i % 2 == 0;
        tied_sets += usize::from(tied);
        let mut draw = |shift: f64| {
            if tied {
                f64::from(rng.gen_range(0..levels)) / 4.0
            } else {
                rng.gen_range(0.0..1.0) + shift
            }
        };
        let pos: Vec<f64> = (0..p).map(|_| draw(0.25)).collect();
        let neg: Vec<f64> = (0..n).map(|_| draw(0.0)).collect();
        let fast = auc_from_scores(&pos, &neg).map_err(|e| e.to_string())?;
        let slow = brute_force_auc(&pos, &neg);
        ensure!(fast == slow, "set {i}: rank AUC {fast} vs brute force {slow}");
    }
    let perfect = auc_from_scores(&[0.9, 0.8, 0.71], &[0.7, 0.1]).map_err(|e| e.to_string())?;
    ensure!(perfect == 1.0, "perfect separation gives {perfect}");
    let constant = auc_from_scores(&[0.3; 40], &[0.3; 25]).map_err(|e| e.to_string())?;
    ensure!(constant == 0.5, "constant scores give {constant}");
    Ok(format!("200 sets ({tied_sets} heavily tied) equal brute force exactly; separation 1.0, constant 0.5"))
}

fn texture(seed: u64) -> breechmark::SurfaceMatrix {
    band_limited_surface(224, 224, 0.75, seed, 1e-6)
}

fn cmc_correctness() -> Outcome {
    let p = CmcParams::default();
    let a = texture(1);
    let own = cmc_score(&a, &a, &p).map_err(|e| e.to_string())?.score;
    ensure!(own == 1.0, "self-comparison scores {own}");

    let mut rotated = Vec::new();
    for (seed, theta) in [(2, -15.0), (3, 6.0), (4, 21.0)] {
        let t = texture(seed);
        let s = cmc_score(&t, &rotate_surface(&t, theta), &p).map_err(|e| e.to_string())?.score;
        ensure!(s >= 0.9, "rotation by {theta} scores {s}");
        rotated.push(format!("{theta}:{s:.3}"));
    }

    let mut low = 0;
    for k in 0..50 {
        let c = cmc_score(&texture(100 + 2 * k), &texture(101 + 2 * k), &p).map_err(|e| e.to_string())?;
        low += usize::from(c.score <= 10.0 / 128.0);
    }
    ensure!(low >= 48, "only {low}/50 independent pairs score <= 10/128");

    let scans: Vec<ScanRecord> = (0..6)
        .map(|i| {
            let t = texture(500 + i / 2);
            let t = if i % 2 == 1 { rotate_surface(&t, 3.0) } else { t };
            ScanRecord::new(t, format!("g{}", i / 2), format!("c{i}"), "").expect("record")
        })
        .collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut texts = Vec::new();
    for workers in [1, 8] {
        let path = dir.path().join(format!("w{workers}.csv"));
        cmc_score_all_pairs(&scans, &p, workers)
            .and_then(|s| s.write_csv(&path))
            .map_err(|e| e.to_string())?;
        texts.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure!(texts[0] == texts[1], "serial and 8-worker CSVs differ");
    Ok(format!(
        "self 1.0; rotations {}; {low}/50 independent pairs <= 10/128; 8-worker CSV identical to serial",
        rotated.join(" ")
    ))
}

fn breechmark(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_breechmark"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`breechmark {}` failed:\n{}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

const DESK_CONFIG: &str = r#"
output_dir = "run"
seed = 0
holdout_guns = 8

[synth]
guns = 48
casings_per_gun = 8
noise_sigma = 0.3
seed = 7

[model]
variant = "reference"
width = 16

[train]
epochs = 2000
eval_every = 1
smooth_window = 10
guns_per_batch = 8
casings_per_gun_per_batch = 2
learning_rate = 1e-3
runs = 1
target_smoothed_auc = 0.85
"#;

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn untrained_auc(run: &Path) -> Result<f64, String> {
    let manifest = read_manifest(&run.join("preprocessed/eval.csv")).map_err(|e| e.to_string())?;
    let mut images = Vec::new();
    for e in &manifest.entries {
        images.push(LabeledImage {
            casing_id: e.casing_id.clone(),
            gun_id: e.gun_id.clone(),
            image: PolarImage::read(&e.path.with_extension("bmkp")).map_err(|e| e.to_string())?,
        });
    }
    let model = build_model(&ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    evaluate_auc(&model, &images).map_err(|e| e.to_string())
}

fn desk_experiment() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    std::fs::write(dir.join("desk.toml"), DESK_CONFIG).map_err(|e| e.to_string())?;
    let run = dir.join("run");
    let step = |args: &[&str]| {
        let mut all = vec!["--config", "desk.toml"];
        all.extend_from_slice(args);
        breechmark(dir, &all)
    };
    step(&["synth"])?;
    step(&["preprocess"])?;
    let eval_casings = read_manifest(&run.join("preprocessed/eval.csv")).map_err(|e| e.to_string())?.entries.len();
    ensure!(eval_casings == 64, "{eval_casings} held-out casings");
    let untrained = untrained_auc(&run)?;
    step(&["train"])?;
    step(&["score", "--method", "contrastive"])?;
    step(&["score", "--method", "cmc"])?;
    step(&["report"])?;
    let secs = start.elapsed().as_secs_f64();

    let summary = read_json(&run.join("train/summary.json"))?;
    let smoothed = summary["runs"]["avg_smoothed_max_auc"].as_f64().ok_or("summary lacks smoothed AUC")?;
    let epochs = summary["best_epochs"][0].as_u64().unwrap_or(0);
    let log = std::fs::read_to_string(run.join("train/run1/log.csv")).map_err(|e| e.to_string())?;
    let trained_epochs = log.lines().count() - 1;
    ensure!(smoothed >= 0.85, "smoothed-max held-out AUC {smoothed:.4}");

    let cmc = ScoreSet::read_csv(&run.join("scores/cmc.csv")).map_err(|e| e.to_string())?;
    let (pos, neg) = cmc.split_by_label();
    let cmc_auc = auc_from_scores(&pos, &neg).map_err(|e| e.to_string())?;
    ensure!(cmc.len() == 64 * 63 / 2, "{} CMC pairs", cmc.len());
    ensure!(cmc_auc >= 0.80, "CMC AUC {cmc_auc:.4}");

    for f in ["roc.svg", "hist_contrastive.svg", "hist_cmc.svg", "scatter.svg", "table.csv"] {
        ensure!(run.join("report").join(f).is_file(), "report/{f} missing");
    }
    ensure!(secs < 1800.0, "took {:.1} min", secs / 60.0);
    Ok(format!(
        "smoothed-max AUC {smoothed:.4} after {trained_epochs} epochs (best epoch {epochs}; untrained model {untrained:.4}), \
         CMC AUC {cmc_auc:.4} over {} pairs, report artifacts present, {:.1} min",
        cmc.len(),
        secs / 60.0
    ))
}

fn protocol() -> Outcome {
    let cfg = TrainConfig::default();
    ensure!(
        (cfg.epochs, cfg.eval_every, cfg.smooth_window) == (20_000, 20, 10),
        "default protocol is {}/{}/{}",
        cfg.epochs,
        cfg.eval_every,
        cfg.smooth_window
    );
    let records: Vec<TrainRecord> = (1..=cfg.record_count())
        .map(|i| TrainRecord { epoch: i * cfg.eval_every, roc_auc: (i % 13) as f64 / 13.0, loss: 0.0 })
        .collect();
    ensure!(records.len() == 1000, "{} records", records.len());
    let smoothed = smooth_records(&records, cfg.smooth_window).map_err(|e| e.to_string())?;
    ensure!(smoothed.len() == 991, "{} smoothed points", smoothed.len());

    let runs: Vec<RunSummary> = [0.897, 0.873, 0.899, 0.901, 0.890]
        .iter()
        .map(|&m| RunSummary { max_auc: m, smoothed_max_auc: m, best_epoch: 0, records: Vec::new() })
        .collect();
    let summary = summarize_runs(&runs).map_err(|e| e.to_string())?;
    ensure!((summary.avg_max_auc - 0.892).abs() < 1e-12, "mean {}", summary.avg_max_auc);
    let table = summary.table();
    ensure!(table.lines().nth(1).is_some_and(|l| l.ends_with(",0.892")), "table:\n{table}");
    Ok(format!("1000 records, 991 smoothed points, five-run mean {:.3}", summary.avg_max_auc))
}

const BENCH_CONFIG: &str = r#"
output_dir = "run"

[synth]
guns = 12
casings_per_gun = 12
seed = 9
"#;

fn throughput() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    std::fs::write(dir.join("bench.toml"), BENCH_CONFIG).map_err(|e| e.to_string())?;
    breechmark(dir, &["--config", "bench.toml", "bench-cmc", "--pairs", "24", "--project-workers", "8"])?;
    let bench = read_json(&dir.join("run/bench/cmc_benchmark.json"))?;
    let total = bench["total_pairs"].as_u64().unwrap_or(0);
    ensure!(total == 10_296, "{total} pairs in the 144-scan set");
    ensure!(bench["failed_pairs"].as_u64() == Some(0), "failed pairs: {}", bench["failed_pairs"]);
    let rate = bench["pairs_per_sec"].as_f64().ok_or("benchmark JSON lacks pairs_per_sec")?;
    let projected = bench["projected_total_seconds"].as_f64().ok_or("benchmark JSON lacks a projection")?;
    ensure!(rate > 0.0, "pairs/sec {rate}");
    ensure!(projected < 4.0 * 3600.0, "projected {:.2} h on 8 workers", projected / 3600.0);
    Ok(format!(
        "{} pairs timed at {rate:.2} pairs/s on {} worker(s); all 10296 pairs projected at {:.2} h on 8 workers",
        bench["measured_pairs"],
        bench["workers"],
        projected / 3600.0
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradients),
        ("loss-form equivalence", loss_forms),
        ("angular shift invariance", shift_invariance),
        ("architecture table", architecture),
        ("ROC AUC oracle", auc_oracle),
        ("CMC correctness", cmc_correctness),
        ("desk-scale experiment", desk_experiment),
        ("protocol fidelity", protocol),
        ("CMC throughput", throughput),
    ];
    let only: Option<Vec<usize>> = std::env::var("BREECHMARK_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

//! Per-command output directories and their `run.json` records.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
struct Timing {
    step: String,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    args: Vec<String>,
    version: &'static str,
    config_sha256: String,
    config: &'a RunConfig,
    started_unix: u64,
    workers: usize,
    timings: &'a [Timing],
    total_seconds: f64,
    outputs: Vec<String>,
}

/// Bookkeeping for one subcommand writing into `<output_dir>/<subdir>`.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub dir: PathBuf,
    pub workers: usize,
    command: &'static str,
    started: Instant,
    started_unix: u64,
    step_start: Instant,
    timings: Vec<Timing>,
    outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    pub fn start(cfg: &'a RunConfig, command: &'static str, subdir: &str, workers: usize) -> anyhow::Result<Self> {
        let dir = cfg.output_dir.join(subdir);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let now = Instant::now();
        Ok(Self {
            cfg,
            dir,
            workers,
            command,
            started: now,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            step_start: now,
            timings: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Path of an output file inside this command's directory, recorded in run.json.
    pub fn output(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let p = self.dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    /// Closes the current timing step.
    pub fn step(&mut self, name: &str) {
        let now = Instant::now();
        self.timings.push(Timing {
            step: name.to_string(),
            seconds: (now - self.step_start).as_secs_f64(),
        });
        self.step_start = now;
    }

    pub fn finish(self) -> anyhow::Result<()> {
        let record = RunRecord {
            command: self.command,
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: self.cfg.hash(),
            config: self.cfg,
            started_unix: self.started_unix,
            workers: self.workers,
            timings: &self.timings,
            total_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let path = self.dir.join("run.json");
        let text = serde_json::to_string_pretty(&record)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        log::info!("{} finished in {:.1} s; outputs in {}", self.command, record.total_seconds, self.dir.display());
        Ok(())
    }
}

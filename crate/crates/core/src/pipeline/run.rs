//! Output-directory plumbing shared by the command-line tools.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{write_samples, GraphSample};

use super::ops::{summarize_block, BlockSummary, OperatorBundle};
use super::sample::Sampler;
use super::train::{effective_schedule, load_dataset, Checkpoint, StepReport, Trainer};
use super::trees::{evaluate_vun, MetricsReport};

pub const CONFIG_ECHO: &str = "config.txt";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the resolved config (seed included) to `dir`.
pub fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_text())
}

/// One line of `train_log.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub wall_seconds: f64,
    pub cg_warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub cg_warnings: usize,
    pub checkpoint: PathBuf,
}

/// Trains into `dir`: config echo, `train_log.csv`, periodic
/// `checkpoint_<step>.json` and a final `checkpoint.json`. With `resume`,
/// continues that run until `cfg.train.steps` updates in total.
pub fn train_to_dir(cfg: &RunConfig, dir: &Path, resume: Option<&Checkpoint>) -> Result<TrainSummary> {
    create_dir(dir)?;
    let mut trainer = match resume {
        Some(ck) => {
            let ck_cfg = ck.run_config()?;
            let mut t = Trainer::resume(ck, load_dataset(&ck_cfg)?)?;
            t.config.train.steps = cfg.train.steps;
            t
        }
        None => Trainer::new(cfg.clone(), load_dataset(cfg)?)?,
    };
    echo_config(dir, &trainer.config)?;
    let remaining = trainer.config.train.steps.saturating_sub(trainer.step);

    let log_path = dir.join("train_log.csv");
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    if resume.is_none() {
        writeln!(log, "step,loss,wall_seconds,cg_warnings").map_err(io)?;
    }

    let start = Instant::now();
    let (log_every, ck_every) = (trainer.config.train.log_every.max(1), trainer.config.train.checkpoint_every);
    let mut total_warnings = 0;
    let reports = trainer.run(remaining, |t, r: &StepReport| {
        total_warnings += r.cg_warnings;
        let row = LogRow {
            step: r.step,
            loss: r.loss,
            wall_seconds: start.elapsed().as_secs_f64(),
            cg_warnings: r.cg_warnings,
        };
        writeln!(log, "{},{},{:.3},{}", row.step, row.loss, row.wall_seconds, row.cg_warnings).map_err(io)?;
        if r.step.is_multiple_of(log_every) {
            info!("step {} loss {:.6} ({:.1}s)", r.step, r.loss, row.wall_seconds);
        }
        if ck_every > 0 && r.step.is_multiple_of(ck_every) {
            t.checkpoint().save(dir.join(format!("checkpoint_{}.json", r.step)))?;
        }
        Ok(())
    })?;
    log.flush().map_err(io)?;

    let path = dir.join("checkpoint.json");
    trainer.checkpoint().save(&path)?;
    Ok(TrainSummary {
        steps_run: remaining,
        final_step: trainer.step,
        first_loss: reports.first().map(|r| r.loss),
        last_loss: reports.last().map(|r| r.loss),
        cg_warnings: total_warnings,
        checkpoint: path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRun {
    pub metrics: MetricsReport,
    pub flagged: usize,
}

/// Samples `count` graphs into `dir/samples.jsonl` and writes
/// `dir/metrics.json` against the checkpoint's training set.
pub fn sample_to_dir(ck: &Checkpoint, count: usize, seed: u64, steps: Option<usize>, dir: &Path) -> Result<(Vec<GraphSample>, MetricsReport)> {
    create_dir(dir)?;
    let mut cfg = ck.run_config()?;
    cfg.seed = seed;
    cfg.sample_count = count;
    if let Some(t) = steps {
        cfg.schedule.steps = t;
    }
    echo_config(dir, &cfg)?;
    let mut sampler = Sampler::from_checkpoint(ck)?;
    if let Some(t) = steps {
        sampler = sampler.with_steps(t)?;
    }
    let outcomes = sampler.sample(count, seed)?;
    let flagged = outcomes.iter().filter(|o| o.flagged).count();
    let graphs: Vec<GraphSample> = outcomes.into_iter().map(|o| o.graph).collect();
    write_samples(dir.join("samples.jsonl"), &ck.meta, &graphs)?;

    let mut train_cfg = ck.run_config()?;
    train_cfg.seed = ck.seed;
    let train = load_dataset(&train_cfg)?;
    let metrics = evaluate_vun(&graphs, &train.graphs)?;
    let run = SampleRun {
        metrics: metrics.clone(),
        flagged,
    };
    let path = dir.join("metrics.json");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(file, &run)?;
    Ok((graphs, metrics))
}

#[derive(Debug, Clone, Serialize)]
pub struct PrecisionReport {
    pub layout: String,
    pub n: usize,
    pub max_n: usize,
    pub blocks: Vec<BlockSummary>,
}

/// Operator summary for the largest graph size in the configured dataset.
pub fn inspect_precision(cfg: &RunConfig) -> Result<PrecisionReport> {
    let data = load_dataset(cfg)?;
    let n = data.graphs.iter().map(|g| g.n).max().ok_or_else(|| Error::invalid("dataset is empty"))?;
    let d_x = data.graphs[0].nodes.dim();
    let bundle = OperatorBundle::build(n, data.meta.max_n, d_x, cfg.data.mask_diag_edges, &cfg.precision, cfg.solver.dense_cap)?;
    let schedule = effective_schedule(cfg);
    let blocks = bundle
        .blocks
        .iter()
        .map(|b| summarize_block(b, schedule.beta_at(b.channel, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrecisionReport {
        layout: cfg.precision.layout.to_string(),
        n,
        max_n: data.meta.max_n,
        blocks,
    })
}

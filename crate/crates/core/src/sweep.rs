//! Ablation sweeps: one shared warm-up, then every variant trained and scored
//! under the same stage-2 schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::{Ablation, RunConfig};
use crate::data::open;
use crate::error::{io_err, Error, Result};
use crate::eval::{evaluate, held_out_batches};
use crate::losses::LossReport;
use crate::train::{Checkpoint, Trainer};

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub variants: Vec<Ablation>,
    /// Held-out tuples scored per variant.
    pub eval_tuples: usize,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub l1: f64,
    pub perceptual: f64,
    pub fid: f64,
    /// 1 for the lowest FID.
    pub fid_rank: usize,
    /// Per-tuple perceptual distances, in held-out order.
    #[serde(skip)]
    pub per_tuple: Vec<f64>,
}

/// Parses a comma-separated variant list, rejecting unknown and repeated names.
pub fn parse_variants(list: &str) -> Result<Vec<Ablation>> {
    let mut out: Vec<Ablation> = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: Ablation = name.parse()?;
        if out.contains(&v) {
            return Err(Error::Config(format!("variant `{name}` listed twice")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    Ok(out)
}

/// Stage-1 warm-up with the full variant; the warm-up never touches the
/// fusion path, so every variant can start from it.
pub fn warm_up(config: &RunConfig, base: &Path, run_dir: &Path) -> Result<(Checkpoint, Vec<LossReport>)> {
    let mut cfg = config.clone();
    cfg.train.ablation = Ablation::Full;
    let size = (cfg.generator.image_height, cfg.generator.image_width);
    let (train, _) = open(&cfg.data, base, size)?;
    let mut t = Trainer::new(cfg, train, Some(run_dir.to_path_buf()))?;
    let reports = t.train_stage1()?;
    Ok((t.checkpoint(), reports))
}

/// Runs the sweep under `run_dir`; data paths resolve against `base`.
pub fn run(config: &RunConfig, base: &Path, run_dir: &Path, opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let (warm, _) = warm_up(config, base, &run_dir.join("stage1"))?;
    run_from(config, &warm, base, run_dir, opts)
}

/// Runs the stage-2 part of the sweep from a finished warm-up. Each variant's
/// run directory is `run_dir/<variant>`.
pub fn run_from(config: &RunConfig, warm: &Checkpoint, base: &Path, run_dir: &Path, opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let size = (config.generator.image_height, config.generator.image_width);
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let (_, test) = open(&config.data, base, size)?;
    let k = config.generator.sources;
    let batches = held_out_batches(test.as_ref(), k, opts.eval_tuples, config.train.batch_size, opts.eval_seed)?;

    let mut rows = Vec::new();
    for &variant in &opts.variants {
        log::info!("ablation variant {}", variant.name());
        let mut cfg = config.clone();
        cfg.train.ablation = variant;
        let (train, _) = open(&config.data, base, size)?;
        let mut t = Trainer::resume(cfg, warm, train, Some(run_dir.join(variant.name())))?;
        t.start_stage2(false)?;
        t.train_stage2()?;
        let scores = evaluate(&t.generator, &batches, k, variant, t.provider())?;
        rows.push(SweepRow {
            variant: variant.name().to_string(),
            l1: scores.mean_l1(),
            perceptual: scores.mean_perceptual(),
            fid: scores.fid()?,
            fid_rank: 0,
            per_tuple: scores.perceptual,
        });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].fid.total_cmp(&rows[b].fid));
    for (rank, i) in order.into_iter().enumerate() {
        rows[i].fid_rank = rank + 1;
    }

    let table = format_table(&rows);
    let path = run_dir.join("ablation.txt");
    fs::write(&path, &table).map_err(io_err(&path))?;
    let path = run_dir.join("ablation.json");
    fs::write(&path, serde_json::to_string_pretty(&rows)? + "\n").map_err(io_err(&path))?;
    Ok(rows)
}

/// Fixed-width comparison table.
pub fn format_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:<10} {:>10} {:>12} {:>12} {:>8}\n", "variant", "l1", "perceptual", "fid", "fid_rank");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>10.6} {:>12.6} {:>12.6} {:>8}",
            r.variant, r.l1, r.perceptual, r.fid, r.fid_rank
        );
    }
    s
}

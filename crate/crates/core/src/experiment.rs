//! Multi-seed experiment runners behind the `run`, `ablate` and `sweep-tau` subcommands.
//!
//! Every runner writes plain files (CSV, JSON, JSON lines, checkpoints) under the
//! configured output directory and returns the same numbers it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::adapters::{self, AllocationKind, ParamCount};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, ReportExtras, Summary};
use crate::model::{pretrain_base, BiModalSegmenter, PretrainReport};
use crate::rng::{stream_rng, Stream};
use crate::taskgen::{self, TaskData};
use crate::trainer::{self, epoch_csv, ContinualState, Mode, RunOutput};

pub const STATE_KIND: &str = "continual-state";
pub const MODEL_KIND: &str = "pretrained-model";
pub const AGGREGATE_VERSION: u32 = 1;

/// Threshold grid of the allocation sweep, in report order.
pub const TAU_GRID: [f64; 4] = [0.3, 0.5, 0.75, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Stat {
        let n = values.len() as f64;
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / n };
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std, values }
    }
}

/// Generates the task data named by the config.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskData>> {
    cfg.suite.specs()?.iter().map(taskgen::generate).collect()
}

fn pretrain_key(cfg: &ExperimentConfig) -> Result<String> {
    let bytes = serde_json::to_vec(&(&cfg.model, &cfg.pretrain))?;
    Ok(hex::encode(&Sha256::digest(bytes)[..8]))
}

/// Loads the pretrained base from `dir/pretrained-<key>.ckpt`, training and caching it on a
/// miss. The key hashes the model and pretraining settings.
pub fn pretrained_model(cfg: &ExperimentConfig, dir: &Path) -> Result<BiModalSegmenter> {
    let path = dir.join(format!("pretrained-{}.ckpt", pretrain_key(cfg)?));
    if path.exists() {
        match checkpoint::load::<BiModalSegmenter>(&path, MODEL_KIND) {
            Ok((model, _)) if model.config() == &cfg.model => return Ok(model),
            Ok(_) => log::warn!("{}: model config mismatch, retraining", path.display()),
            Err(e) => log::warn!("{}: {e}, retraining", path.display()),
        }
    }
    log::info!("pretraining base ({} steps)", cfg.pretrain.steps);
    let (model, report) = pretrain_base(cfg.model.clone(), &cfg.pretrain)?;
    let PretrainReport { val_dice, final_loss } = report;
    log::info!("pretext val Dice {val_dice:.4}");
    checkpoint::save(&path, MODEL_KIND, json!({"val_dice": val_dice, "final_loss": final_loss}), &model)?;
    Ok(model)
}

/// Per-task trainable accounting for a finished (or partial) run.
pub fn param_counts(state: &ContinualState) -> Vec<ParamCount> {
    state
        .records
        .iter()
        .filter_map(|r| state.bank.adapters.get(&r.adapter))
        .map(|a| adapters::trainable_count(&state.model, a))
        .collect()
}

/// Writes the full record of one seed into `dir`.
pub fn write_seed_outputs(out: &RunOutput, seed: u64, dir: &Path) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    let state = &out.state;
    let allocations = state
        .allocations
        .iter()
        .map(serde_json::to_value)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut lines = String::new();
    for a in &state.allocations {
        lines.push_str(&serde_json::to_string(a)?);
        lines.push('\n');
    }
    fs::write(dir.join("allocations.jsonl"), lines)?;
    fs::write(dir.join("epochs.csv"), epoch_csv(&out.epochs))?;
    let mut mem = String::from("task,buffer_size,fisher_avg,replay_weight\n");
    for r in &state.records {
        mem.push_str(&format!(
            "{},{},{:?},{:?}\n",
            r.task,
            r.memory.entries.len(),
            r.memory.fisher_avg,
            r.memory.replay_weight
        ));
    }
    fs::write(dir.join("memory.csv"), mem)?;
    let extras = ReportExtras {
        mode: state.mode.to_string(),
        seed,
        param_counts: param_counts(state),
        allocations,
        wall_clock_secs: out.wall_clock_secs,
    };
    metrics::emit_report(&state.results, extras, dir)
}

/// One seed of one mode, checkpointing after every task.
pub fn run_seed(
    model: &BiModalSegmenter,
    tasks: &[TaskData],
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
    dir: &Path,
) -> Result<(RunOutput, Summary)> {
    let train = trainer::TrainConfig { seed, ..cfg.train.clone() };
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("state.ckpt");
    let out = trainer::run_sequence_with(model, tasks, &train, mode, |state, report| {
        log::info!("{mode} seed {seed}: task {} done in {:.1}s", report.task, report.wall_clock_secs);
        checkpoint::save(&ckpt, STATE_KIND, json!({"completed_tasks": state.t_current()}), state)
    })?;
    let summary = write_seed_outputs(&out, seed, dir)?;
    Ok((out, summary))
}

pub fn load_state(path: &Path) -> Result<ContinualState> {
    Ok(checkpoint::load(path, STATE_KIND)?.0)
}

/// Mean and spread across seeds for one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub version: u32,
    pub suite: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub avg_dice: Stat,
    pub avg_fr: Stat,
}

/// Runs every seed of `mode` into `dir/seed-<s>` and writes `dir/aggregate.json`.
pub fn run_mode(model: &BiModalSegmenter, tasks: &[TaskData], cfg: &ExperimentConfig, mode: Mode, dir: &Path) -> Result<(Aggregate, Vec<RunOutput>)> {
    let mut outs = Vec::new();
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let (out, summary) = run_seed(model, tasks, cfg, mode, seed, &dir.join(format!("seed-{seed}")))?;
        outs.push(out);
        summaries.push(summary);
    }
    let agg = Aggregate {
        version: AGGREGATE_VERSION,
        suite: cfg.suite.to_string(),
        mode: mode.to_string(),
        seeds: cfg.seeds.clone(),
        avg_dice: Stat::of(summaries.iter().map(|s| s.avg_dice).collect()),
        avg_fr: Stat::of(summaries.iter().map(|s| s.avg_fr).collect()),
    };
    fs::write(dir.join("aggregate.json"), serde_json::to_string_pretty(&agg)? + "\n")?;
    Ok((agg, outs))
}

fn prepare(cfg: &ExperimentConfig) -> Result<(PathBuf, BiModalSegmenter, Vec<TaskData>)> {
    cfg.validate()?;
    let out = cfg.resolved_out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let tasks = load_tasks(cfg)?;
    if tasks.len() < 2 {
        return Err(Error::Config("suite: a sequence needs at least two tasks".into()));
    }
    let model = pretrained_model(cfg, &out)?;
    Ok((out, model, tasks))
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Aggregate> {
    let (out, model, tasks) = prepare(cfg)?;
    Ok(run_mode(&model, &tasks, cfg, cfg.mode, &out)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub mode: String,
    pub avg_dice: f64,
    /// Dice gain over the sequential row, in Dice points (×100).
    pub delta_dice: f64,
    pub avg_fr: f64,
    /// FR change against the sequential row, in percentage points.
    pub delta_fr: f64,
    pub dice_std: f64,
    pub fr_std: f64,
}

/// Builds the ladder table from per-mode aggregates given in [`Mode::LADDER`] order.
pub fn ladder_rows(aggs: &[Aggregate]) -> Result<Vec<LadderRow>> {
    let base = aggs.first().ok_or_else(|| Error::Empty("no ladder rows".into()))?;
    Ok(aggs
        .iter()
        .map(|a| LadderRow {
            mode: a.mode.clone(),
            avg_dice: a.avg_dice.mean,
            delta_dice: 100.0 * (a.avg_dice.mean - base.avg_dice.mean),
            avg_fr: a.avg_fr.mean,
            delta_fr: a.avg_fr.mean - base.avg_fr.mean,
            dice_std: a.avg_dice.std,
            fr_std: a.avg_fr.std,
        })
        .collect())
}

pub fn ladder_markdown(rows: &[LadderRow]) -> String {
    let mut s = String::from("| mode | avg Dice | Δ | avg FR (%) | Δ |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.2} ± {:.2} | {:+.2} | {:.2} ± {:.2} | {:+.2} |\n",
            r.mode,
            100.0 * r.avg_dice,
            100.0 * r.dice_std,
            r.delta_dice,
            r.avg_fr,
            r.fr_std,
            r.delta_fr
        ));
    }
    s
}

/// Runs the five ladder modes on the same suite and seeds.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<LadderRow>> {
    let (out, model, tasks) = prepare(cfg)?;
    let mut aggs = Vec::new();
    for mode in Mode::LADDER {
        aggs.push(run_mode(&model, &tasks, cfg, mode, &out.join("ablation").join(mode.name()))?.0);
    }
    let rows = ladder_rows(&aggs)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    fs::write(out.join("ablation.md"), ladder_markdown(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    /// Fraction of all tasks (first included) that created an adapter, averaged over seeds.
    pub new_fraction: f64,
    pub reuse_fraction: f64,
    pub avg_dice: f64,
    pub avg_fr: f64,
}

pub fn new_fraction(state: &ContinualState) -> f64 {
    let n = state.allocations.len().max(1) as f64;
    state.allocations.iter().filter(|a| a.kind == "new").count() as f64 / n
}

/// Decisions only, without training: the allocation each task would get in sequence.
pub fn allocation_kinds(model: &BiModalSegmenter, prompts: &[&str], tau: f64) -> Result<Vec<AllocationKind>> {
    let mut bank = adapters::AdapterBank::new();
    let mut kinds = Vec::new();
    for (t, p) in prompts.iter().enumerate() {
        let e = model.embed_text(p)?;
        let d = adapters::allocate(&e, &bank, tau)?;
        let mut rng = stream_rng(0, Stream::AdapterInit, d.adapter() as u64);
        bank.commit(t, e, &d, model, adapters::DEFAULT_RANK, adapters::DEFAULT_ALPHA, &mut rng)?;
        kinds.push(d.kind);
    }
    Ok(kinds)
}

/// Full mode at each threshold; allocation fractions, Dice and FR per row.
pub fn cmd_sweep_tau(cfg: &ExperimentConfig, taus: &[f64]) -> Result<Vec<TauRow>> {
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("taus: {t} is outside (0, 1)")));
    }
    if taus.is_empty() {
        return Err(Error::Config("taus: at least one threshold is required".into()));
    }
    let (out, model, tasks) = prepare(cfg)?;
    let mut rows = Vec::new();
    for &tau in taus {
        let mut c = cfg.clone();
        c.train.tau = tau;
        c.train.validate()?;
        let (agg, outs) = run_mode(&model, &tasks, &c, Mode::Full, &out.join("sweep").join(format!("tau-{tau}")))?;
        let nf = outs.iter().map(|o| new_fraction(&o.state)).sum::<f64>() / outs.len() as f64;
        rows.push(TauRow {
            tau,
            new_fraction: nf,
            reuse_fraction: 1.0 - nf,
            avg_dice: agg.avg_dice.mean,
            avg_fr: agg.avg_fr.mean,
        });
    }
    fs::write(out.join("sweep_tau.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(Stat::of(vec![5.0]).std, 0.0);
    }

    #[test]
    fn ladder_deltas_are_against_the_first_row() {
        let agg = |mode: &str, d: f64, f: f64| Aggregate {
            version: 1,
            suite: "mixed".into(),
            mode: mode.into(),
            seeds: vec![43],
            avg_dice: Stat::of(vec![d]),
            avg_fr: Stat::of(vec![f]),
        };
        let rows = ladder_rows(&[agg("sequential", 0.5, 40.0), agg("ewc", 0.56, 10.0)]).unwrap();
        assert_eq!(rows[0].delta_dice, 0.0);
        assert!((rows[1].delta_dice - 6.0).abs() < 1e-9);
        assert_eq!(rows[1].delta_fr, -30.0);
        assert_eq!(ladder_markdown(&rows).lines().count(), 4);
    }
}

//! Continual training over a task sequence.
//!
//! Each task runs: adapter allocation, an epoch loop over mixed current/replay batches with
//! early stopping on validation Dice, then consolidation (difficulty scoring, hard buffer,
//! Fisher, anchor, replay weights) and evaluation of every task seen so far.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterBank, AdapterId, AllocationDecision, AllocationKind, LoraAdapter, TaskId};
use crate::consolidation::{self, Anchor, FisherMap};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::per_item_losses;
use crate::memory::{self, BufferEntry, ReplayPolicy, TaskMemory};
use crate::metrics::ResultsMatrix;
use crate::model::{self, stack_patches, BiModalSegmenter};
use crate::optim::AdamW;
use crate::rng::{stream_rng, Stream};
use crate::taskgen::{Sample, TaskData};
use crate::tensor::{ParamId, ParamStore, Tensor, TensorError};
use crate::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub r_replay: f64,
    pub lambda_ewc: f64,
    pub seed: u64,
    pub tau: f64,
    pub r_memory: f64,
    pub boost_alpha: f64,
    pub rank: usize,
    pub alpha: f64,
    /// Force every task onto one adapter regardless of mode.
    pub single_adapter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 8e-4,
            weight_decay: 8e-5,
            batch_size: 16,
            max_epochs: 30,
            early_stop_patience: 5,
            r_replay: 0.4,
            lambda_ewc: 500.0,
            seed: 43,
            tau: adapters::DEFAULT_TAU,
            r_memory: memory::DEFAULT_R_MEMORY,
            boost_alpha: memory::DEFAULT_BOOST_ALPHA,
            rank: adapters::DEFAULT_RANK,
            alpha: adapters::DEFAULT_ALPHA,
            single_adapter: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.r_replay) {
            return bad("r_replay", "must lie in [0, 1)");
        }
        if !(self.lambda_ewc >= 0.0 && self.lambda_ewc.is_finite()) {
            return bad("lambda_ewc", "must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau", "must lie in (0, 1)");
        }
        if !(self.r_memory > 0.0 && self.r_memory < 1.0) {
            return bad("r_memory", "must lie in (0, 1)");
        }
        if !(self.boost_alpha >= 0.0) {
            return bad("boost_alpha", "must be non-negative");
        }
        if self.rank == 0 {
            return bad("rank", "must be at least 1");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be positive");
        }
        Ok(())
    }

    /// Replay samples per batch when memories exist; at least one current sample remains.
    pub fn replay_count(&self) -> usize {
        ((self.batch_size as f64 * self.r_replay).round() as usize).min(self.batch_size - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Sequential,
    Ewc,
    Replay,
    Fisher,
    Bidirectional,
}

/// Where a task's Fisher map comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherSource {
    None,
    /// A uniform random subset of the training split, unit weights.
    UniformSubset,
    /// The hard-sample buffer with difficulty weights.
    HardBuffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub allocation: bool,
    pub ewc: bool,
    pub replay: Option<ReplayPolicy>,
    pub fisher: FisherSource,
}

impl Mode {
    /// Ablation order, each rung adding one component to the previous.
    pub const LADDER: [Mode; 5] = [Mode::Sequential, Mode::Ewc, Mode::Replay, Mode::Fisher, Mode::Bidirectional];

    pub fn components(self) -> Components {
        let (allocation, ewc, replay, fisher) = match self {
            Mode::Sequential => (false, false, None, FisherSource::None),
            Mode::Ewc => (false, true, None, FisherSource::UniformSubset),
            Mode::Replay => (false, true, Some(ReplayPolicy::Uniform), FisherSource::UniformSubset),
            Mode::Fisher => (false, true, Some(ReplayPolicy::Weighted), FisherSource::UniformSubset),
            Mode::Full | Mode::Bidirectional => (true, true, Some(ReplayPolicy::Weighted), FisherSource::HardBuffer),
        };
        Components {
            allocation,
            ewc,
            replay,
            fisher,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Sequential => "sequential",
            Mode::Ewc => "ewc",
            Mode::Replay => "replay",
            Mode::Fisher => "fisher",
            Mode::Bidirectional => "bidirectional",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Mode::Full, Mode::Sequential, Mode::Ewc, Mode::Replay, Mode::Fisher, Mode::Bidirectional]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("mode: unknown mode `{s}`")))
    }
}

/// Everything kept about a completed task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: TaskId,
    pub name: String,
    pub prompt: String,
    pub adapter: AdapterId,
    pub memory: TaskMemory,
    pub fisher: Option<FisherMap>,
    pub anchor: Anchor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationLog {
    pub task: TaskId,
    pub kind: String,
    pub adapter: AdapterId,
    pub k_star: Option<TaskId>,
    pub similarity: Option<f64>,
    pub all_similarities: BTreeMap<TaskId, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: TaskId,
    pub epoch: usize,
    pub seg_loss: f64,
    pub dice_loss: f64,
    pub ewc_penalty: f64,
    pub val_dice: f64,
    pub replay_histogram: BTreeMap<TaskId, usize>,
}

pub const EPOCH_CSV_HEADER: &str = "task,epoch,seg_loss,dice_loss,ewc_penalty,val_dice,replay_histogram";

pub fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_CSV_HEADER}\n");
    for l in logs {
        let hist: Vec<String> = l.replay_histogram.iter().map(|(t, n)| format!("{t}:{n}")).collect();
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{}\n",
            l.task,
            l.epoch,
            l.seg_loss,
            l.dice_loss,
            l.ewc_penalty,
            l.val_dice,
            hist.join(";")
        ));
    }
    out
}

/// Continuously asserted structural invariants: frozen base, adapter locality, inactive
/// adapters untouched, and replay routing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantMonitor {
    base_reference: ParamStore,
    probe: Tensor,
    pub checks: usize,
    pub violations: Vec<String>,
}

impl InvariantMonitor {
    pub fn new(model: &BiModalSegmenter) -> Self {
        let mut rng = stream_rng(0, Stream::ModelInit, u64::MAX);
        InvariantMonitor {
            base_reference: model.base().clone(),
            probe: model::random_image(&mut rng),
            checks: 0,
            violations: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            let msg = what();
            log::error!("invariant violated: {msg}");
            self.violations.push(msg);
        }
    }

    pub fn check_freeze(&mut self, model: &BiModalSegmenter, when: &str) {
        let ok = model.base().bit_equal(&self.base_reference);
        self.record(ok, || format!("base weights changed ({when})"));
    }

    /// Forward with adapter k, then every other adapter j, then k again: outputs for k must be
    /// bit-identical.
    pub fn check_locality(&mut self, model: &BiModalSegmenter, bank: &AdapterBank, prompt: &str) -> Result<()> {
        for (k, ak) in &bank.adapters {
            let first = model.forward(&self.probe, prompt, Some(ak))?;
            for (j, aj) in &bank.adapters {
                if j != k {
                    model.forward(&self.probe, prompt, Some(aj))?;
                }
            }
            let again = model.forward(&self.probe, prompt, Some(ak))?;
            let ok = first.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            self.record(ok, || format!("adapter {k} output changed after using other adapters"));
        }
        Ok(())
    }

    pub fn check_untouched(&mut self, before: &BTreeMap<AdapterId, ParamStore>, bank: &AdapterBank) {
        for (id, params) in before {
            let ok = bank.adapters.get(id).is_some_and(|a| a.params().bit_equal(params));
            self.record(ok, || format!("inactive adapter {id} was modified"));
        }
    }

    pub fn check_routing(&mut self, task: TaskId, used: AdapterId, records: &[TaskRecord], bank: &AdapterBank) {
        let assigned = bank.task_assignment.get(&task).copied();
        let recorded = records.get(task).map(|r| r.adapter);
        let owned = bank.adapters.get(&used).is_some_and(|a| a.owner_tasks.contains(&task));
        let ok = assigned == Some(used) && recorded == Some(used) && owned;
        self.record(ok, || {
            format!("replay sample of task {task} routed through adapter {used} (assigned {assigned:?})")
        });
    }
}

/// Full experiment state between tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualState {
    pub config: TrainConfig,
    pub mode: Mode,
    pub model: BiModalSegmenter,
    pub bank: AdapterBank,
    pub records: Vec<TaskRecord>,
    pub results: ResultsMatrix,
    pub allocations: Vec<AllocationLog>,
    pub monitor: InvariantMonitor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: TaskId,
    pub decision: AllocationDecision,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct StepStats {
    seg: f64,
    dice: f64,
    ewc: f64,
}

fn divergence(e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Divergence(format!("non-finite value in `{op}`")),
        other => other,
    }
}

impl ContinualState {
    pub fn new(model: BiModalSegmenter, config: TrainConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        let monitor = InvariantMonitor::new(&model);
        Ok(ContinualState {
            config,
            mode,
            model,
            bank: AdapterBank::new(),
            records: Vec::new(),
            results: ResultsMatrix::default(),
            allocations: Vec::new(),
            monitor,
        })
    }

    /// Number of completed tasks.
    pub fn t_current(&self) -> usize {
        self.records.len()
    }

    pub fn memories(&self) -> Vec<TaskMemory> {
        self.records.iter().map(|r| r.memory.clone()).collect()
    }

    fn anchors_and_fishers(&self) -> (Vec<Anchor>, Vec<FisherMap>) {
        self.records
            .iter()
            .filter_map(|r| r.fisher.as_ref().map(|f| (r.anchor.clone(), f.clone())))
            .unzip()
    }

    /// The adapter decision for the next task.
    pub fn decide(&self, prompt: &str) -> Result<AllocationDecision> {
        let embedding = self.model.embed_text(prompt)?;
        let mut decision = adapters::allocate(&embedding, &self.bank, self.config.tau)?;
        let forced_single = self.config.single_adapter || !self.mode.components().allocation;
        if forced_single && !self.bank.adapters.is_empty() {
            let similarity = decision.all_similarities.get(&0).copied().unwrap_or(0.0);
            decision.kind = AllocationKind::Reuse {
                adapter: self.bank.task_assignment[&0],
                task: 0,
                similarity,
            };
        }
        Ok(decision)
    }

    /// Trains `tasks[t_current]`, consolidates it, and evaluates `tasks[..=t_current]`.
    pub fn train_task(&mut self, tasks: &[TaskData], epoch_log: &mut Vec<EpochLog>) -> Result<TaskReport> {
        let started = Instant::now();
        let task = self.t_current();
        let data = tasks
            .get(task)
            .ok_or_else(|| Error::InvalidArgument(format!("no task data for task {task}")))?;
        if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
            return Err(Error::Empty(format!("task {} has an empty split", data.spec.name)));
        }
        let cfg = self.config.clone();
        let comps = self.mode.components();
        let prompt = data.spec.prompt.clone();

        // (1) allocation
        let decision = self.decide(&prompt)?;
        let embedding = self.model.embed_text(&prompt)?;
        let mut init_rng = stream_rng(cfg.seed, Stream::AdapterInit, decision.adapter() as u64);
        let adapter_id = self
            .bank
            .commit(task, embedding, &decision, &self.model, cfg.rank, cfg.alpha, &mut init_rng)?;
        self.allocations.push(allocation_log(task, &decision));
        log::info!("task {task} ({}): {:?}", data.spec.name, decision.kind);

        let inactive: BTreeMap<AdapterId, ParamStore> = self
            .bank
            .adapters
            .iter()
            .filter(|(id, _)| **id != adapter_id)
            .map(|(id, a)| (*id, a.params().clone()))
            .collect();

        // (2) epoch loop
        let memories = self.memories();
        let replay_policy = comps.replay.filter(|_| memories.iter().any(|m| !m.entries.is_empty()));
        let n_replay = if replay_policy.is_some() { cfg.replay_count() } else { 0 };
        let n_current = cfg.batch_size - n_replay;
        let (anchors, fishers) = if comps.ewc && cfg.lambda_ewc > 0.0 {
            self.anchors_and_fishers()
        } else {
            (Vec::new(), Vec::new())
        };
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
        let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle, task as u64);
        let mut replay_rng = stream_rng(cfg.seed, Stream::Replay, task as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let snapshot = |s: &Self| (s.model.shared().clone(), s.bank.adapters[&adapter_id].params().clone());
        let mut best = (f64::NEG_INFINITY, 0usize, snapshot(self));
        let mut since_best = 0;
        let mut epochs_run = 0;
        for epoch in 0..cfg.max_epochs {
            epochs_run += 1;
            order.shuffle(&mut shuffle_rng);
            let mut totals = StepStats::default();
            let mut steps = 0usize;
            let mut histogram = BTreeMap::new();
            for chunk in order.chunks(n_current) {
                let current: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
                let replay = match replay_policy {
                    Some(policy) => memory::sample_replay(&memories, n_replay, policy, &mut replay_rng)?,
                    None => Vec::new(),
                };
                for e in &replay {
                    *histogram.entry(e.task).or_insert(0) += 1;
                }
                let stats = self
                    .train_step(task, adapter_id, &prompt, &current, &replay, &anchors, &fishers, &mut opt)
                    .map_err(divergence)?;
                totals.seg += stats.seg;
                totals.dice += stats.dice;
                totals.ewc += stats.ewc;
                steps += 1;
            }
            let val_dice = self.model.evaluate_dice(&data.val, &prompt, Some(&self.bank.adapters[&adapter_id]))?;
            epoch_log.push(EpochLog {
                task,
                epoch,
                seg_loss: totals.seg / steps as f64,
                dice_loss: totals.dice / steps as f64,
                ewc_penalty: totals.ewc / steps as f64,
                val_dice,
                replay_histogram: histogram,
            });
            log::debug!("task {task} epoch {epoch}: val Dice {val_dice:.4}");
            if val_dice > best.0 {
                best = (val_dice, epoch, snapshot(self));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
        let (best_val, best_epoch, (shared, adapter_params)) = best;
        *self.model.shared_mut() = shared;
        *self.bank.adapters.get_mut(&adapter_id).unwrap().params_mut() = adapter_params;

        // (3) consolidation
        let adapter = &self.bank.adapters[&adapter_id];
        let scores = memory::score_all(&self.model, Some(adapter), &prompt, &data.train)?;
        let mut task_memory = memory::build_buffer(task, &data.train, &scores, cfg.r_memory)?;
        let trainable = |id: &ParamId| BiModalSegmenter::is_shared(id) || adapter.params().contains(id);
        let fisher = match comps.fisher {
            FisherSource::None => None,
            FisherSource::HardBuffer => {
                let samples: Vec<&Sample> = task_memory.entries.iter().map(|e| &e.sample).collect();
                let losses: Vec<f64> = task_memory.entries.iter().map(|e| e.difficulty).collect();
                let weights = consolidation::difficulty_weights(&losses)?;
                Some(consolidation::compute_fisher(
                    &self.model,
                    Some(adapter),
                    &prompt,
                    &samples,
                    &weights,
                    &trainable,
                    task,
                )?)
            }
            FisherSource::UniformSubset => {
                let k = task_memory.entries.len();
                let mut rng = stream_rng(cfg.seed, Stream::FisherSubset, task as u64);
                let mut idx = rand::seq::index::sample(&mut rng, data.train.len(), k).into_vec();
                idx.sort_unstable();
                let samples: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
                Some(consolidation::compute_fisher(
                    &self.model,
                    Some(adapter),
                    &prompt,
                    &samples,
                    &vec![1.0; k],
                    &trainable,
                    task,
                )?)
            }
        };
        task_memory.fisher_avg = match &fisher {
            Some(f) => memory::average_fisher(f)?,
            None => 0.0,
        };
        let anchor = consolidation::snapshot_anchor(&self.model, Some(adapter), task);
        self.records.push(TaskRecord {
            task,
            name: data.spec.name.clone(),
            prompt: prompt.clone(),
            adapter: adapter_id,
            memory: task_memory,
            fisher,
            anchor,
        });
        let t_current = self.t_current();
        for r in &mut self.records {
            r.memory.replay_weight = memory::replay_weight(r.task, t_current, r.memory.fisher_avg, cfg.boost_alpha)?;
        }

        self.monitor.check_freeze(&self.model, &format!("after task {task}"));
        self.monitor.check_untouched(&inactive, &self.bank);
        self.monitor.check_locality(&self.model, &self.bank, &prompt)?;

        // (4) evaluation of all seen tasks
        if self.results.tasks.len() < tasks.len() {
            self.results.tasks = tasks.iter().map(|t| t.spec.name.clone()).collect();
        }
        let row = self.evaluate_seen(tasks)?;
        self.results.push_stage(row)?;

        Ok(TaskReport {
            task,
            decision,
            epochs_run,
            best_epoch,
            best_val_dice: best_val,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Test Dice of every completed task, each through its own adapter and prompt.
    pub fn evaluate_seen(&self, tasks: &[TaskData]) -> Result<Vec<f64>> {
        self.records
            .iter()
            .map(|r| {
                let data = tasks
                    .get(r.task)
                    .ok_or_else(|| Error::InvalidArgument(format!("no task data for task {}", r.task)))?;
                self.model.evaluate_dice(&data.test, &r.prompt, self.bank.adapters.get(&r.adapter))
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &mut self,
        task: TaskId,
        adapter_id: AdapterId,
        prompt: &str,
        current: &[&Sample],
        replay: &[&BufferEntry],
        anchors: &[Anchor],
        fishers: &[FisherMap],
        opt: &mut AdamW,
    ) -> Result<StepStats> {
        let batch = (current.len() + replay.len()) as f64;
        // group samples by the task whose adapter and prompt they go through
        let mut groups: BTreeMap<TaskId, Vec<&Sample>> = BTreeMap::new();
        groups.insert(task, current.to_vec());
        for e in replay {
            let used = self.records[e.task].adapter;
            self.monitor.check_routing(e.task, used, &self.records, &self.bank);
            groups.entry(e.task).or_default().push(&e.sample);
        }

        let mut store = self.model.all_params();
        for t in groups.keys() {
            let a = if *t == task { adapter_id } else { self.records[*t].adapter };
            store.extend_from(self.bank.adapters[&a].params());
        }
        let active = &self.bank.adapters[&adapter_id];
        let trainable = |id: &ParamId| BiModalSegmenter::is_shared(id) || active.params().contains(id);
        let mut g = Graph::new();
        let vars = g.bind(&store, trainable);
        let mut seg_terms = Vec::new();
        let mut dice_terms = Vec::new();
        for (t, samples) in &groups {
            let (adapter, group_prompt) = if *t == task {
                (active, prompt)
            } else {
                let r = &self.records[*t];
                (&self.bank.adapters[&r.adapter], r.prompt.as_str())
            };
            let tokens = vocab::tokenize(group_prompt);
            let (x, y) = stack_patches(samples.iter().copied())?;
            let w = self.model.bind_weights(&mut g, &vars, Some(adapter))?;
            let xv = g.constant(x);
            let logits = self.model.forward_graph(&mut g, &w, &tokens, xv)?;
            let terms = per_item_losses(&mut g, logits, &y)?;
            seg_terms.push(g.sum(terms.seg)?);
            dice_terms.push(g.sum(terms.dice)?);
        }
        let seg = sum_vars(&mut g, &seg_terms)?;
        let seg = g.scale(seg, 1.0 / batch)?;
        let dice = sum_vars(&mut g, &dice_terms)?;
        let dice = g.scale(dice, 1.0 / batch)?;
        let mut loss = g.add(seg, dice)?;
        let mut ewc_value = 0.0;
        if let Some(pen) = consolidation::ewc_penalty_graph(&mut g, &vars, anchors, fishers)? {
            ewc_value = g.scalar_value(pen);
            let scaled = g.scale(pen, self.config.lambda_ewc)?;
            loss = g.add(loss, scaled)?;
        }
        let stats = StepStats {
            seg: g.scalar_value(seg),
            dice: g.scalar_value(dice),
            ewc: ewc_value,
        };
        if !g.scalar_value(loss).is_finite() {
            return Err(Error::Divergence(format!("loss is not finite on task {task}")));
        }
        let grads = g.backward(loss)?;
        let adapter = self.bank.adapters.get_mut(&adapter_id).unwrap();
        opt.step(&mut [self.model.shared_mut(), adapter.params_mut()], &grads);
        Ok(stats)
    }
}

fn sum_vars(g: &mut Graph, vars: &[crate::graph::Var]) -> Result<crate::graph::Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn allocation_log(task: TaskId, d: &AllocationDecision) -> AllocationLog {
    match d.kind {
        AllocationKind::Reuse {
            adapter,
            task: k,
            similarity,
        } => AllocationLog {
            task,
            kind: "reuse".into(),
            adapter,
            k_star: Some(k),
            similarity: Some(similarity),
            all_similarities: d.all_similarities.clone(),
        },
        AllocationKind::New { adapter } => AllocationLog {
            task,
            kind: "new".into(),
            adapter,
            k_star: d
                .all_similarities
                .iter()
                .fold(None, |best: Option<(TaskId, f64)>, (&t, &s)| match best {
                    Some((_, b)) if b >= s => best,
                    _ => Some((t, s)),
                })
                .map(|p| p.0),
            similarity: d
                .all_similarities
                .values()
                .copied()
                .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s)))),
            all_similarities: d.all_similarities.clone(),
        },
    }
}

/// Output of one full sequence.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: ContinualState,
    pub epochs: Vec<EpochLog>,
    pub reports: Vec<TaskReport>,
    pub wall_clock_secs: f64,
}

/// Trains every task in order starting from the pretrained `model`.
pub fn run_sequence(model: &BiModalSegmenter, tasks: &[TaskData], config: &TrainConfig, mode: Mode) -> Result<RunOutput> {
    run_sequence_with(model, tasks, config, mode, |_, _| Ok(()))
}

/// [`run_sequence`] with a hook called after every task (checkpointing, progress).
pub fn run_sequence_with(
    model: &BiModalSegmenter,
    tasks: &[TaskData],
    config: &TrainConfig,
    mode: Mode,
    mut after_task: impl FnMut(&ContinualState, &TaskReport) -> Result<()>,
) -> Result<RunOutput> {
    if tasks.len() < 2 {
        return Err(Error::InvalidArgument("a sequence needs at least two tasks".into()));
    }
    let started = Instant::now();
    let mut state = ContinualState::new(model.clone(), config.clone(), mode)?;
    state.results = ResultsMatrix::new(tasks.iter().map(|t| t.spec.name.clone()).collect());
    let mut epochs = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..tasks.len() {
        let report = state.train_task(tasks, &mut epochs)?;
        after_task(&state, &report)?;
        reports.push(report);
    }
    Ok(RunOutput {
        state,
        epochs,
        reports,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Wrapper used by tests and diagnostics: loss terms for a fixed batch without updating.
pub fn total_loss(
    model: &BiModalSegmenter,
    adapter: Option<&LoraAdapter>,
    prompt: &str,
    samples: &[&Sample],
    anchors: &[Anchor],
    fishers: &[FisherMap],
    lambda_ewc: f64,
) -> Result<f64> {
    let store = model.param_store_with(adapter);
    let mut g = Graph::new();
    let vars = g.bind(&store, |id| {
        BiModalSegmenter::is_shared(id) || adapter.is_some_and(|a| a.params().contains(id))
    });
    let w = model.bind_weights(&mut g, &vars, adapter)?;
    let (x, y) = stack_patches(samples.iter().copied())?;
    let xv = g.constant(x);
    let logits = model.forward_graph(&mut g, &w, &vocab::tokenize(prompt), xv)?;
    let terms = per_item_losses(&mut g, logits, &y)?;
    let seg = g.mean(terms.seg)?;
    let dice = g.mean(terms.dice)?;
    let mut loss = g.add(seg, dice)?;
    if let Some(p) = consolidation::ewc_penalty_graph(&mut g, &vars, anchors, fishers)? {
        let p = g.scale(p, lambda_ewc)?;
        loss = g.add(loss, p)?;
    }
    Ok(g.scalar_value(loss))
}

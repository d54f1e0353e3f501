//! Built-in oracle checks behind `clforge selftest`.
//!
//! Each check compares library code against an independent computation and returns a
//! [`Check`] instead of panicking, so callers can print a full report.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use crate::adapters::{self, AllocationKind, LoraAdapter};
use crate::consolidation::{compute_fisher, difficulty_weight, difficulty_weights, ewc_penalty, Anchor, FisherMap};
use crate::error::Result;
use crate::experiment::allocation_kinds;
use crate::fdcheck;
use crate::graph::Graph;
use crate::loss::per_item_losses;
use crate::memory::{self, average_fisher, replay_weight, BufferEntry, ReplayPolicy, TaskMemory};
use crate::metrics::{self, ResultsMatrix};
use crate::model::{stack_patches, BiModalSegmenter};
use crate::rng::{stream_rng, Stream};
use crate::taskgen::{default_suite, pretext_sample, Sample, SuiteName};
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::vocab;

/// Finite-difference step of the whole-model gradient check.
pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_TIME_LIMIT: Duration = Duration::from_secs(120);
pub const FISHER_TOLERANCE: f64 = 1e-6;
pub const FORMULA_TOLERANCE: f64 = 1e-12;
pub const REPLAY_DRAWS: usize = 100_000;
pub const REPLAY_TOLERANCE: f64 = 0.01;
pub const ALLOCATION_TAU: f64 = 0.75;
pub const TRAINABLE_FRACTION_LIMIT: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(criterion: u8, name: &str, passed: bool, detail: String) -> Check {
        Check {
            criterion,
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.detail
        )
    }
}

/// An adapter with random, nonzero factors, so both LoRA paths carry gradient.
pub fn random_adapter(model: &BiModalSegmenter, seed: u64) -> Result<LoraAdapter> {
    let mut rng = stream_rng(seed, Stream::Selftest, 0);
    let mut adapter = LoraAdapter::new(0, &model.lora_targets(), adapters::DEFAULT_RANK, adapters::DEFAULT_ALPHA, &mut rng)?;
    for (_, t) in adapter.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
    }
    Ok(adapter)
}

fn fixture_samples(seed: u64, n: usize) -> Vec<Sample> {
    (0..n).map(|i| pretext_sample(seed, 1_000_000 + i)).collect()
}

const FIXTURE_PROMPT: &str = "one small bright round disc left";

/// Criterion 1: autodiff against central differences over every model and adapter element.
pub fn gradient_check(model: &BiModalSegmenter, seed: u64) -> Result<Check> {
    let adapter = random_adapter(model, seed)?;
    let samples = fixture_samples(seed, 10);
    let started = Instant::now();
    let report = fdcheck::check_model(model, Some(&adapter), FIXTURE_PROMPT, &samples, FD_STEP)?;
    let elapsed = started.elapsed();
    let expected = model.total_params() + adapter.element_count();
    let passed = report.max_rel_error < FD_TOLERANCE && elapsed < FD_TIME_LIMIT && report.elements_checked == expected;
    Ok(Check::new(
        1,
        "gradient correctness",
        passed,
        format!(
            "{} elements on 10 samples, max rel err {:.2e} (< {FD_TOLERANCE:e}, worst {}[{}]), {:.1}s (< {}s)",
            report.elements_checked,
            report.max_rel_error,
            report.worst_param.map(|p| p.to_string()).unwrap_or_default(),
            report.worst_index,
            elapsed.as_secs_f64(),
            FD_TIME_LIMIT.as_secs()
        ),
    ))
}

/// Per-sample BCE written out directly, for the difficulty weights of the Fisher oracle.
fn oracle_bce(model: &BiModalSegmenter, adapter: &LoraAdapter, sample: &Sample) -> Result<f64> {
    let logits = model.forward(&sample.image, FIXTURE_PROMPT, Some(adapter))?;
    let mut total = 0.0;
    for (&z, &y) in logits.data().iter().zip(sample.mask.data()) {
        let p = 1.0 / (1.0 + (-z).exp());
        total -= y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln();
    }
    Ok(total / logits.numel() as f64)
}

/// Criterion 2: compute_fisher against a separately written per-sample loop.
pub fn fisher_oracle(model: &BiModalSegmenter, seed: u64) -> Result<Check> {
    let adapter = random_adapter(model, seed)?;
    let samples = fixture_samples(seed ^ 0x5eed, 5);
    let trainable = |id: &ParamId| BiModalSegmenter::is_shared(id) || adapter.params().contains(id);

    let scores = memory::score_all(model, Some(&adapter), FIXTURE_PROMPT, &samples)?;
    let weights = difficulty_weights(&scores)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let fisher = compute_fisher(model, Some(&adapter), FIXTURE_PROMPT, &refs, &weights, &trainable, 0)?;

    let losses: Vec<f64> = samples.iter().map(|s| oracle_bce(model, &adapter, s)).collect::<Result<_>>()?;
    let max = losses.iter().copied().fold(0.0, f64::max);
    let store = model.param_store_with(Some(&adapter));
    let tokens = vocab::tokenize(FIXTURE_PROMPT);
    let mut acc: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
    let mut wsum = 0.0;
    for (sample, loss) in samples.iter().zip(&losses) {
        let w = 1.0 + loss / max;
        wsum += w;
        let mut g = Graph::new();
        let vars = g.bind(&store, |id| trainable(id));
        let wts = model.bind_weights(&mut g, &vars, Some(&adapter))?;
        let (x, y) = stack_patches(std::slice::from_ref(sample))?;
        let xv = g.constant(x);
        let logits = model.forward_graph(&mut g, &wts, &tokens, xv)?;
        let terms = per_item_losses(&mut g, logits, &y)?;
        let l = g.add(terms.seg, terms.dice)?;
        let l = g.sum(l)?;
        for (id, grad) in g.backward(l)? {
            if !trainable(&id) {
                continue;
            }
            let slot = acc.entry(id).or_insert_with(|| vec![0.0; grad.numel()]);
            slot.iter_mut().zip(grad.data()).for_each(|(a, g)| *a += w * g * g);
        }
    }
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    let mut ids_match = true;
    for (id, oracle) in &acc {
        let Some(got) = fisher.values.get(id) else {
            ids_match = false;
            continue;
        };
        for (a, b) in got.data().iter().zip(oracle) {
            let b = b / wsum;
            let rel = if a == &b { 0.0 } else { (a - b).abs() / b.abs().max(f64::MIN_POSITIVE) };
            worst = worst.max(rel);
            elements += 1;
        }
    }
    ids_match &= fisher.values.ids().count() == acc.len();
    let weight_err = weights.iter().zip(&losses).map(|(w, l)| (w - (1.0 + l / max)).abs()).fold(0.0, f64::max);
    Ok(Check::new(
        2,
        "Fisher oracle",
        ids_match && worst < FISHER_TOLERANCE && weight_err < 1e-9,
        format!(
            "{elements} elements over a 5-sample buffer, max rel err {worst:.2e} (< {FISHER_TOLERANCE:e}), difficulty weight err {weight_err:.1e}"
        ),
    ))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= FORMULA_TOLERANCE
}

/// Criterion 3: closed-form examples of every formula, exact to 1e-12.
pub fn formula_suite(model: &BiModalSegmenter) -> Result<Check> {
    let mut failures = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    // low-rank update
    let mut rng = stream_rng(0, Stream::Selftest, 3);
    let zero_b = LoraAdapter::new(0, &model.lora_targets(), 8, 16.0, &mut rng)?;
    let applied = adapters::apply(&zero_b, model)?;
    expect("B=0 leaves W unchanged", applied.iter().all(|(id, w)| model.base().get(id) == Some(w)));
    let image = fixture_samples(1, 1).remove(0).image;
    expect(
        "B=0 logits equal base logits",
        model.forward(&image, FIXTURE_PROMPT, Some(&zero_b))? == model.forward(&image, FIXTURE_PROMPT, None)?,
    );
    expect("alpha/r = 2 for r=8, alpha=16", zero_b.scale() == 2.0);
    let t = [(ParamId::from("w"), [1, 1])];
    let mut one = LoraAdapter::new(0, &t, 1, 1.0, &mut rng)?;
    let (a_id, b_id) = (one.a_id(&t[0].0), one.b_id(&t[0].0));
    one.params_mut().insert(a_id, Tensor::new(vec![1, 1], vec![4.0])?);
    one.params_mut().insert(b_id, Tensor::new(vec![1, 1], vec![3.0])?);
    expect("1x1 W'=[13]", close(1.0 + one.delta(&t[0].0)?.data()[0], 13.0));

    // replay weight
    expect("replay weight 0.75", close(replay_weight(1, 3, 1.0, 0.5)?, 0.75));
    expect("replay weight 1.0", close(replay_weight(2, 3, 0.0, 0.5)?, 1.0));

    // flat Fisher mean
    let mut values = ParamStore::new();
    values.insert("a".into(), Tensor::new(vec![2], vec![0.5, 1.5])?);
    values.insert("b".into(), Tensor::new(vec![1, 3], vec![2.0, 0.0, 4.0])?);
    let fm = FisherMap {
        values,
        source_task: 0,
        sample_count: 1,
    };
    expect("flat Fisher mean", close(average_fisher(&fm)?, 8.0 / 5.0));
    let mut constant = fm.clone();
    constant
        .values
        .iter_mut()
        .for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.3));
    expect("constant Fisher mean", close(average_fisher(&constant)?, 0.3));

    // difficulty weights
    expect(
        "w_diff endpoints",
        difficulty_weight(0.6, 0.6)? == 2.0 && difficulty_weight(0.0, 0.6)? == 1.0,
    );
    expect("w_diff 1.5", close(difficulty_weight(0.3, 0.6)?, 1.5));

    // consolidation penalty
    let scalar = |v: f64| {
        let mut s = ParamStore::new();
        s.insert("p".into(), Tensor::scalar(v));
        s
    };
    let anchor = |task, v| Anchor { task, values: scalar(v) };
    let fisher = |task, f| FisherMap {
        values: scalar(f),
        source_task: task,
        sample_count: 1,
    };
    expect(
        "penalty zero at anchor",
        ewc_penalty(&scalar(0.4), &[anchor(0, 0.4)], &[fisher(0, 1.0)])? == 0.0,
    );
    expect(
        "penalty 0.01",
        close(ewc_penalty(&scalar(0.1), &[anchor(0, 0.0)], &[fisher(0, 1.0)])?, 0.01),
    );
    let two = ewc_penalty(&scalar(0.2), &[anchor(0, 0.1), anchor(1, 0.0)], &[fisher(0, 1.0), fisher(1, 1.0)])?;
    expect("penalty additivity 0.05", close(two, 0.05));

    // Dice
    let p = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    let g = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    expect("Dice 0.5 overlap", close(metrics::dice(&p, &g)?, 0.5));
    expect("Dice identical", metrics::dice(&p, &p)? == 1.0);

    // forgetting
    let m = ResultsMatrix::from_entries(vec!["a".into(), "b".into()], &[(0, 0, 0.8), (1, 0, 0.72), (1, 1, 0.9)])?;
    expect("FR 10%", close(metrics::forgetting_rate(&m)?.average, 10.0));

    let passed = failures.is_empty();
    Ok(Check::new(
        3,
        "formula unit suite",
        passed,
        if passed {
            format!("all examples exact to {FORMULA_TOLERANCE:e}")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    ))
}

/// Criterion 4: empirical task frequencies of weighted replay against normalized weights.
pub fn replay_distribution(seed: u64) -> Result<Check> {
    let sample = pretext_sample(seed, 0);
    let fisher_avgs = [0.4, 2.0, 0.0];
    let t_current = fisher_avgs.len();
    let memories: Vec<TaskMemory> = fisher_avgs
        .iter()
        .enumerate()
        .map(|(t, &f)| {
            Ok(TaskMemory {
                task: t,
                entries: (0..3)
                    .map(|i| BufferEntry {
                        sample: sample.clone(),
                        task: t,
                        index: i,
                        difficulty: 0.1,
                    })
                    .collect(),
                fisher_avg: f,
                replay_weight: replay_weight(t, t_current, f, memory::DEFAULT_BOOST_ALPHA)?,
            })
        })
        .collect::<Result<_>>()?;
    // expected probabilities straight from the formula
    let raw: Vec<f64> = fisher_avgs
        .iter()
        .enumerate()
        .map(|(t, f)| (1.0 + memory::DEFAULT_BOOST_ALPHA * f) / (t_current - t) as f64)
        .collect();
    let total: f64 = raw.iter().sum();
    let mut rng = stream_rng(seed, Stream::Selftest, 4);
    let draws = memory::sample_replay(&memories, REPLAY_DRAWS, ReplayPolicy::Weighted, &mut rng)?;
    let mut counts = vec![0usize; t_current];
    draws.iter().for_each(|e| counts[e.task] += 1);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (t, c) in counts.iter().enumerate() {
        let freq = *c as f64 / REPLAY_DRAWS as f64;
        let expected = raw[t] / total;
        worst = worst.max((freq - expected).abs());
        parts.push(format!("task{t} {freq:.4}/{expected:.4}"));
    }
    Ok(Check::new(
        4,
        "replay sampler distribution",
        draws.len() == REPLAY_DRAWS && worst <= REPLAY_TOLERANCE,
        format!(
            "{REPLAY_DRAWS} draws, {}; max abs dev {worst:.4} (<= {REPLAY_TOLERANCE})",
            parts.join(", ")
        ),
    ))
}

fn reuse_count(kinds: &[AllocationKind]) -> usize {
    kinds.iter().filter(|k| matches!(k, AllocationKind::Reuse { .. })).count()
}

/// Committed prompts grouped by shape family, across all suites.
pub fn prompt_families() -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for suite in [SuiteName::Homogeneous, SuiteName::Heterogeneous, SuiteName::Mixed] {
        for spec in default_suite(suite) {
            let family = format!("{:?}", spec.family);
            let prompts = out.entry(family).or_default();
            if !prompts.contains(&spec.prompt) {
                prompts.push(spec.prompt);
            }
        }
    }
    out
}

/// Smallest within-family and largest cross-family cosine over distinct committed prompts.
pub fn family_separation(model: &BiModalSegmenter) -> Result<(f64, f64)> {
    let mut tagged = Vec::new();
    for (family, prompts) in prompt_families() {
        for p in prompts {
            tagged.push((family.clone(), model.embed_text(&p)?));
        }
    }
    let (mut within, mut cross) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..tagged.len() {
        for j in i + 1..tagged.len() {
            let s = adapters::cosine_similarity(&tagged[i].1, &tagged[j].1)?;
            if tagged[i].0 == tagged[j].0 {
                within = within.min(s);
            } else {
                cross = cross.max(s);
            }
        }
    }
    Ok((within, cross))
}

/// Criterion 5: allocation decisions on the committed suites and at the threshold limits.
pub fn allocation_behaviour(model: &BiModalSegmenter) -> Result<Check> {
    let prompts = |s| default_suite(s).into_iter().map(|t| t.prompt).collect::<Vec<_>>();
    let kinds = |s, tau| {
        let p = prompts(s);
        let refs: Vec<&str> = p.iter().map(String::as_str).collect();
        allocation_kinds(model, &refs, tau)
    };
    let hetero = kinds(SuiteName::Heterogeneous, ALLOCATION_TAU)?;
    let homo = kinds(SuiteName::Homogeneous, ALLOCATION_TAU)?;
    let hetero_new = hetero.len() - reuse_count(&hetero);
    let homo_reuse = reuse_count(&homo);
    let mut limits_ok = true;
    for s in [SuiteName::Homogeneous, SuiteName::Heterogeneous, SuiteName::Mixed] {
        let low = kinds(s, 0.001)?;
        let high = kinds(s, 0.999)?;
        limits_ok &= reuse_count(&low) == low.len() - 1 && reuse_count(&high) == 0;
    }
    let (within, cross) = family_separation(model)?;
    let passed = hetero_new == hetero.len() && homo_reuse >= 3 && limits_ok && within > cross;
    Ok(Check::new(
        5,
        "allocation behavior",
        passed,
        format!(
            "heterogeneous {hetero_new}/{} New, homogeneous {homo_reuse}/4 later tasks Reuse at tau={ALLOCATION_TAU}; tau limits {}; within-family min cos {within:.3} > cross-family max {cross:.3}",
            hetero.len(),
            if limits_ok { "ok" } else { "violated" }
        ),
    ))
}

/// Criterion 8: closed-form adapter size and trainable fraction per task.
pub fn parameter_efficiency(model: &BiModalSegmenter) -> Result<Check> {
    let mut rng = stream_rng(0, Stream::Selftest, 8);
    let adapter = LoraAdapter::new(0, &model.lora_targets(), adapters::DEFAULT_RANK, adapters::DEFAULT_ALPHA, &mut rng)?;
    let closed: usize = model.lora_targets().iter().map(|(_, [d, k])| adapters::DEFAULT_RANK * (d + k)).sum();
    let count = adapters::trainable_count(model, &adapter);
    let exact = adapter.element_count() == closed && count.adapter == closed;
    let passed = exact && count.fraction < TRAINABLE_FRACTION_LIMIT;
    Ok(Check::new(
        8,
        "parameter efficiency",
        passed,
        format!(
            "adapter {} elements = closed form {closed} ({}); trainable {} of {} = {:.2}% (limit {:.0}%; adapter alone {:.2}%)",
            adapter.element_count(),
            if exact { "exact" } else { "MISMATCH" },
            count.trainable,
            count.total,
            100.0 * count.fraction,
            100.0 * TRAINABLE_FRACTION_LIMIT,
            100.0 * count.adapter as f64 / count.total as f64
        ),
    ))
}

/// Every offline check, in criterion order.
pub fn run_all(model: &BiModalSegmenter, seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        gradient_check(model, seed)?,
        fisher_oracle(model, seed)?,
        formula_suite(model)?,
        replay_distribution(seed)?,
        allocation_behaviour(model)?,
        parameter_efficiency(model)?,
    ])
}

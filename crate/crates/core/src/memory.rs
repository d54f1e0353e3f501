//! Hard-sample memory, Fisher-boosted replay weights, and replay sampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{LoraAdapter, TaskId};
use crate::consolidation::FisherMap;
use crate::error::{Error, Result};
use crate::loss::bce;
use crate::model::{patchify, stack_patches, BiModalSegmenter, PATCH_DIM, TOKENS};
use crate::taskgen::{Sample, PIXELS};
use crate::tensor::Tensor;

pub const DEFAULT_R_MEMORY: f64 = 0.15;
pub const DEFAULT_BOOST_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub sample: Sample,
    pub task: TaskId,
    /// Index of the sample in its task's training split.
    pub index: usize,
    pub difficulty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMemory {
    pub task: TaskId,
    pub entries: Vec<BufferEntry>,
    pub fisher_avg: f64,
    pub replay_weight: f64,
}

impl TaskMemory {
    pub fn max_difficulty(&self) -> f64 {
        self.entries.iter().map(|e| e.difficulty).fold(0.0, f64::max)
    }
}

/// `⌊n·r⌋`, at least 1 and at most `n`. The small epsilon keeps products such as
/// `100 × 0.15` from flooring to 14 through representation error.
pub fn buffer_size(n: usize, r_memory: f64) -> usize {
    (((n as f64) * r_memory + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Mean pixel cross-entropy of the model's prediction for one sample.
pub fn score_difficulty(model: &BiModalSegmenter, adapter: Option<&LoraAdapter>, prompt: &str, sample: &Sample) -> Result<f64> {
    Ok(score_all(model, adapter, prompt, std::slice::from_ref(sample))?[0])
}

/// Batched [`score_difficulty`].
pub fn score_all(model: &BiModalSegmenter, adapter: Option<&LoraAdapter>, prompt: &str, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let (x, y) = stack_patches(chunk)?;
        let logits = model.predict_patches(&x, prompt, adapter)?;
        for (lz, m) in logits.data().chunks(PIXELS).zip(y.data().chunks(PIXELS)) {
            out.push(bce(lz, m));
        }
    }
    Ok(out)
}

/// Keeps the `buffer_size(N, r_memory)` highest-scoring samples, hardest first; ties go to
/// the lower dataset index.
pub fn build_buffer(task: TaskId, samples: &[Sample], scores: &[f64], r_memory: f64) -> Result<TaskMemory> {
    if samples.is_empty() {
        return Err(Error::Empty("cannot build a buffer from an empty dataset".into()));
    }
    if !(r_memory > 0.0 && r_memory < 1.0) {
        return Err(Error::InvalidArgument(format!("r_memory must lie in (0, 1), got {r_memory}")));
    }
    if scores.len() != samples.len() || scores.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("one finite non-negative score per sample required".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let entries = order
        .into_iter()
        .take(buffer_size(samples.len(), r_memory))
        .map(|i| BufferEntry {
            sample: samples[i].clone(),
            task,
            index: i,
            difficulty: scores[i],
        })
        .collect();
    Ok(TaskMemory {
        task,
        entries,
        fisher_avg: 0.0,
        replay_weight: 0.0,
    })
}

/// Flat mean of every element of every tensor in the map.
pub fn average_fisher(fisher: &FisherMap) -> Result<f64> {
    let n = fisher.values.numel();
    if n == 0 {
        return Err(Error::Empty("Fisher map has no elements".into()));
    }
    let sum: f64 = fisher.values.iter().flat_map(|(_, t)| t.data().iter()).sum();
    Ok(sum / n as f64)
}

/// `(1 / (t_current − t)) · (1 + boost_alpha · fisher_avg)`.
pub fn replay_weight(t: TaskId, t_current: usize, fisher_avg: f64, boost_alpha: f64) -> Result<f64> {
    if t >= t_current {
        return Err(Error::InvalidArgument(format!("task {t} is not in the past of T_current = {t_current}")));
    }
    if !(fisher_avg >= 0.0) {
        return Err(Error::InvalidArgument(format!("average Fisher must be non-negative, got {fisher_avg}")));
    }
    Ok((1.0 / (t_current - t) as f64) * (1.0 + boost_alpha * fisher_avg))
}

/// Normalized task probabilities from the stored replay weights; tasks with empty buffers
/// get zero.
pub fn task_probabilities(memories: &[TaskMemory]) -> Result<Vec<f64>> {
    let raw: Vec<f64> = memories
        .iter()
        .map(|m| if m.entries.is_empty() { 0.0 } else { m.replay_weight })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Empty("no task has a positive replay weight and a non-empty buffer".into()));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayPolicy {
    /// Tasks and entries uniformly at random.
    Uniform,
    /// Tasks by replay weight, entries by `1 + difficulty / max_difficulty`.
    Weighted,
}

/// Draws `n` entries with replacement.
pub fn sample_replay<'a, R: Rng + ?Sized>(memories: &'a [TaskMemory], n: usize, policy: ReplayPolicy, rng: &mut R) -> Result<Vec<&'a BufferEntry>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let task_w = match policy {
        ReplayPolicy::Weighted => task_probabilities(memories)?,
        ReplayPolicy::Uniform => memories.iter().map(|m| (!m.entries.is_empty()) as u8 as f64).collect(),
    };
    let tasks = WeightedIndex::new(&task_w).map_err(|_| Error::Empty("all replay memories are empty".into()))?;
    let within: Vec<Option<WeightedIndex<f64>>> = memories
        .iter()
        .map(|m| {
            if m.entries.is_empty() {
                return None;
            }
            let max = m.max_difficulty();
            let w: Vec<f64> = m
                .entries
                .iter()
                .map(|e| match policy {
                    ReplayPolicy::Uniform => 1.0,
                    ReplayPolicy::Weighted if max > 0.0 => 1.0 + e.difficulty / max,
                    ReplayPolicy::Weighted => 1.0,
                })
                .collect();
            WeightedIndex::new(w).ok()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = tasks.sample(rng);
        let e = within[t].as_ref().expect("drawn task has entries").sample(rng);
        out.push(&memories[t].entries[e]);
    }
    Ok(out)
}

/// Replay entries as `[n, 64, 16]` patch tensors.
pub fn stack_entries(entries: &[&BufferEntry]) -> Result<(Tensor, Tensor)> {
    let mut x = Vec::with_capacity(entries.len() * PIXELS);
    let mut y = Vec::with_capacity(entries.len() * PIXELS);
    for e in entries {
        x.extend(patchify(e.sample.image.data()));
        y.extend(patchify(e.sample.mask.data()));
    }
    let shape = vec![entries.len(), TOKENS, PATCH_DIM];
    Ok((Tensor::new(shape.clone(), x)?, Tensor::new(shape, y)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn dummy(task: TaskId, i: usize) -> Sample {
        Sample {
            image: Tensor::filled(&[32, 32], i as f64 / 100.0),
            mask: Tensor::zeros(&[32, 32]),
            task: format!("t{task}"),
        }
    }

    fn memory(task: TaskId, difficulties: &[f64], weight: f64) -> TaskMemory {
        TaskMemory {
            task,
            entries: difficulties
                .iter()
                .enumerate()
                .map(|(i, &d)| BufferEntry {
                    sample: dummy(task, i),
                    task,
                    index: i,
                    difficulty: d,
                })
                .collect(),
            fisher_avg: 0.0,
            replay_weight: weight,
        }
    }

    #[test]
    fn difficulty_ranking_matches_pixelwise_ce_oracle() {
        use crate::model::ModelConfig;
        let model = BiModalSegmenter::init(ModelConfig::default(), 21);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let samples: Vec<Sample> = (0..20)
            .map(|i| {
                let mut s = crate::taskgen::pretext_sample(23, i);
                s.image
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = (*v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0));
                s
            })
            .collect();
        let prompt = "object";
        let scores = score_all(&model, None, prompt, &samples).unwrap();
        let oracle: Vec<f64> = samples
            .iter()
            .map(|s| {
                let z = model.forward(&s.image, prompt, None).unwrap();
                let mut ce = 0.0;
                for (&z, &y) in z.data().iter().zip(s.mask.data()) {
                    let p = 1.0 / (1.0 + (-z).exp());
                    ce -= if y > 0.5 { p.ln() } else { (1.0 - p).ln() };
                }
                ce / 1024.0
            })
            .collect();
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
            idx
        };
        assert_eq!(rank(&scores), rank(&oracle));
        for (a, b) in scores.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(score_difficulty(&model, None, prompt, &samples[3]).unwrap(), scores[3]);
    }

    #[test]
    fn buffer_sizes() {
        assert_eq!(buffer_size(100, 0.15), 15);
        assert_eq!(buffer_size(5, 0.15), 1);
        assert_eq!(buffer_size(200, 0.15), 30);
        assert_eq!(buffer_size(3, 0.99), 2);
    }

    #[test]
    fn buffer_keeps_hardest_with_index_tiebreak() {
        let samples: Vec<Sample> = (0..100).map(|i| dummy(0, i)).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut scores: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        scores[7] = scores[3];
        let m = build_buffer(0, &samples, &scores, 0.15).unwrap();
        assert_eq!(m.entries.len(), 15);
        // independent oracle: full sort of (−score, index) pairs
        let mut oracle: Vec<(f64, usize)> = scores.iter().enumerate().map(|(i, &s)| (-s, i)).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let got: Vec<usize> = m.entries.iter().map(|e| e.index).collect();
        let want: Vec<usize> = oracle.iter().take(15).map(|p| p.1).collect();
        assert_eq!(got, want);
        assert!(build_buffer(0, &[], &[], 0.15).is_err());
        assert_eq!(build_buffer(0, &samples[..5], &scores[..5], 0.15).unwrap().entries.len(), 1);
    }

    #[test]
    fn average_fisher_examples() {
        let mut values = ParamStore::new();
        values.insert("a".into(), Tensor::filled(&[2, 3], 0.0));
        let mut f = FisherMap {
            values,
            source_task: 0,
            sample_count: 1,
        };
        assert_eq!(average_fisher(&f).unwrap(), 0.0);
        f.values.insert("a".into(), Tensor::filled(&[2, 3], 0.25));
        f.values.insert("b".into(), Tensor::filled(&[5], 0.25));
        assert_eq!(average_fisher(&f).unwrap(), 0.25);
        f.values.insert("b".into(), Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let flat = [0.25; 6].iter().sum::<f64>() + 4.0;
        assert!((average_fisher(&f).unwrap() - flat / 8.0).abs() < 1e-15);
        assert!(average_fisher(&FisherMap {
            values: ParamStore::new(),
            source_task: 0,
            sample_count: 0
        })
        .is_err());
    }

    #[test]
    fn replay_weight_examples() {
        assert_eq!(replay_weight(2, 3, 0.0, 0.5).unwrap(), 1.0);
        assert_eq!(replay_weight(1, 3, 1.0, 0.5).unwrap(), 0.75);
        assert!(replay_weight(3, 3, 0.0, 0.5).is_err());
        assert!(replay_weight(1, 3, 0.2, 0.5).unwrap() < replay_weight(1, 3, 0.3, 0.5).unwrap());
    }

    #[test]
    fn single_task_and_zero_weight() {
        let mems = vec![memory(0, &[0.1, 0.2], 1.0)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let draws = sample_replay(&mems, 50, ReplayPolicy::Weighted, &mut rng).unwrap();
        assert!(draws.iter().all(|e| e.task == 0));
        let mems = vec![memory(0, &[0.1], 0.0), memory(1, &[0.1], 1.0)];
        let draws = sample_replay(&mems, 500, ReplayPolicy::Weighted, &mut rng).unwrap();
        assert!(draws.iter().all(|e| e.task == 1));
        assert!(sample_replay(&[memory(0, &[], 1.0)], 1, ReplayPolicy::Weighted, &mut rng).is_err());
        assert!(sample_replay(&[memory(0, &[], 1.0)], 0, ReplayPolicy::Weighted, &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn empirical_task_frequencies() {
        let mems = vec![memory(0, &[0.5, 0.1], 0.75), memory(1, &[0.3], 0.25)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let draws = sample_replay(&mems, 100_000, ReplayPolicy::Weighted, &mut rng).unwrap();
        let f0 = draws.iter().filter(|e| e.task == 0).count() as f64 / 1e5;
        assert!((f0 - 0.75).abs() < 0.01, "{f0}");
        // within task 0: weights 2 and 1.2
        let hard = draws.iter().filter(|e| e.task == 0 && e.index == 0).count() as f64;
        let all0 = draws.iter().filter(|e| e.task == 0).count() as f64;
        assert!((hard / all0 - 2.0 / 3.2).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn probabilities_normalized_and_monotone(
            favg in prop::collection::vec(0.0f64..5.0, 2..6),
            bump in 0.0f64..5.0,
            which in 0usize..6,
        ) {
            let t_current = favg.len();
            let build = |f: &[f64]| -> Vec<TaskMemory> {
                f.iter().enumerate().map(|(t, &fa)| {
                    let mut m = memory(t, &[0.1], 0.0);
                    m.fisher_avg = fa;
                    m.replay_weight = replay_weight(t, t_current, fa, 0.5).unwrap();
                    m
                }).collect()
            };
            let p = task_probabilities(&build(&favg)).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let k = which % favg.len();
            let mut raised = favg.clone();
            raised[k] += bump;
            let q = task_probabilities(&build(&raised)).unwrap();
            prop_assert!(q[k] >= p[k] - 1e-15);
        }

        #[test]
        fn buffer_size_bounds(n in 1usize..500, r in 0.001f64..0.999) {
            let k = buffer_size(n, r);
            prop_assert!(k >= 1 && k <= n);
            prop_assert!(k == 1 || k == ((n as f64) * r + 1e-9).floor() as usize);
        }
    }
}

//! Low-rank adapters and the prompt-similarity allocation policy.
//!
//! A new task is compared against every learned task's prompt embedding by cosine
//! similarity. If the best match exceeds `tau`, the new task shares that task's adapter;
//! otherwise a fresh adapter is created with `B = 0`, so it starts as an exact no-op.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BiModalSegmenter, PromptEmbedding};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const DEFAULT_TAU: f64 = 0.75;

pub type AdapterId = usize;
pub type TaskId = usize;

/// Low-rank factors for every target matrix: `ΔW = (alpha / rank) · B · A` with
/// `B: d×r`, `A: r×k` for a `d×k` target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub id: AdapterId,
    pub rank: usize,
    pub alpha: f64,
    pub owner_tasks: Vec<TaskId>,
    targets: Vec<ParamId>,
    params: ParamStore,
}

impl LoraAdapter {
    /// `A ~ U(-1/√k, 1/√k)`, `B = 0`.
    pub fn new<R: Rng + ?Sized>(id: AdapterId, targets: &[(ParamId, [usize; 2])], rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("LoRA rank must be >= 1".into()));
        }
        let mut params = ParamStore::new();
        for (target, [d, k]) in targets {
            let bound = 1.0 / (*k as f64).sqrt();
            params.insert(Self::factor_id(id, target, 'a'), Tensor::uniform(&[rank, *k], bound, rng));
            params.insert(Self::factor_id(id, target, 'b'), Tensor::zeros(&[*d, rank]));
        }
        Ok(LoraAdapter {
            id,
            rank,
            alpha,
            owner_tasks: Vec::new(),
            targets: targets.iter().map(|(t, _)| t.clone()).collect(),
            params,
        })
    }

    fn factor_id(id: AdapterId, target: &ParamId, which: char) -> ParamId {
        ParamId::new(format!("adapter{id}.{target}.lora_{which}"))
    }

    pub fn a_id(&self, target: &ParamId) -> ParamId {
        Self::factor_id(self.id, target, 'a')
    }

    pub fn b_id(&self, target: &ParamId) -> ParamId {
        Self::factor_id(self.id, target, 'b')
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets(&self) -> &[ParamId] {
        &self.targets
    }

    pub fn targets_matrix(&self, target: &ParamId) -> bool {
        self.targets.contains(target)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Σ_targets r·(d + k)
    pub fn element_count(&self) -> usize {
        self.params.numel()
    }

    /// `(alpha / r) · B · A` for one target.
    pub fn delta(&self, target: &ParamId) -> Result<Tensor> {
        let a = self.params.get(&self.a_id(target)).ok_or_else(|| missing(target))?;
        let b = self.params.get(&self.b_id(target)).ok_or_else(|| missing(target))?;
        let mut ba = b.matmul(a)?;
        let s = self.scale();
        ba.data_mut().iter_mut().for_each(|v| *v *= s);
        Ok(ba)
    }
}

fn missing(target: &ParamId) -> Error {
    Error::InvalidArgument(format!("adapter has no factors for target {target}"))
}

/// Effective target weights `W' = W + (α/r)·B·A`; the base model is not modified.
pub fn apply(adapter: &LoraAdapter, base: &BiModalSegmenter) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for target in adapter.targets() {
        let w = base
            .base()
            .get(target)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no matrix {target}")))?;
        let delta = adapter.delta(target)?;
        if delta.shape() != w.shape() {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "lora_apply",
                lhs: w.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            }));
        }
        let data = w.data().iter().zip(delta.data()).map(|(x, d)| x + d).collect();
        out.insert(target.clone(), Tensor::new(w.shape().to_vec(), data)?);
    }
    Ok(out)
}

pub fn cosine_similarity(a: &PromptEmbedding, b: &PromptEmbedding) -> Result<f64> {
    let (va, vb) = (a.vector(), b.vector());
    if va.len() != vb.len() {
        return Err(Error::InvalidArgument("embedding length mismatch".into()));
    }
    let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("zero-norm embedding".into()));
    }
    let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AllocationKind {
    Reuse { adapter: AdapterId, task: TaskId, similarity: f64 },
    New { adapter: AdapterId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationDecision {
    pub kind: AllocationKind,
    pub all_similarities: BTreeMap<TaskId, f64>,
}

impl AllocationDecision {
    pub fn adapter(&self) -> AdapterId {
        match self.kind {
            AllocationKind::Reuse { adapter, .. } | AllocationKind::New { adapter } => adapter,
        }
    }

    pub fn is_reuse(&self) -> bool {
        matches!(self.kind, AllocationKind::Reuse { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterBank {
    pub adapters: BTreeMap<AdapterId, LoraAdapter>,
    pub task_assignment: BTreeMap<TaskId, AdapterId>,
    pub task_prompts: BTreeMap<TaskId, PromptEmbedding>,
    next_id: AdapterId,
}

impl AdapterBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_adapter_id(&self) -> AdapterId {
        self.next_id
    }

    pub fn adapter_for_task(&self, task: TaskId) -> Option<&LoraAdapter> {
        self.task_assignment.get(&task).and_then(|a| self.adapters.get(a))
    }

    /// Applies an allocation decision for `task`: creates the adapter on `New`, records the
    /// assignment and the task's representative prompt. Existing adapters are only touched to
    /// append an owner on `Reuse`.
    #[allow(clippy::too_many_arguments)]
    pub fn commit<R: Rng + ?Sized>(
        &mut self,
        task: TaskId,
        prompt: PromptEmbedding,
        decision: &AllocationDecision,
        model: &BiModalSegmenter,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<AdapterId> {
        let id = match decision.kind {
            AllocationKind::New { adapter } => {
                if self.adapters.contains_key(&adapter) {
                    return Err(Error::InvalidArgument(format!("adapter {adapter} already exists")));
                }
                let created = LoraAdapter::new(adapter, &model.lora_targets(), rank, alpha, rng)?;
                self.adapters.insert(adapter, created);
                self.next_id = self.next_id.max(adapter + 1);
                adapter
            }
            AllocationKind::Reuse { adapter, .. } => {
                if !self.adapters.contains_key(&adapter) {
                    return Err(Error::InvalidArgument(format!("adapter {adapter} does not exist")));
                }
                adapter
            }
        };
        self.adapters.get_mut(&id).unwrap().owner_tasks.push(task);
        self.task_assignment.insert(task, id);
        self.task_prompts.insert(task, prompt);
        Ok(id)
    }
}

/// Reuse the adapter of `argmax_k s(new, k)` when that similarity exceeds `tau`; ties go to
/// the lowest task id. An empty bank always yields `New`.
pub fn allocate(new_prompt: &PromptEmbedding, bank: &AdapterBank, tau: f64) -> Result<AllocationDecision> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let mut all = BTreeMap::new();
    let mut best: Option<(TaskId, f64)> = None;
    for (&task, prompt) in &bank.task_prompts {
        let s = cosine_similarity(new_prompt, prompt)?;
        all.insert(task, s);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((task, s));
        }
    }
    let kind = match best {
        Some((task, s)) if s > tau => AllocationKind::Reuse {
            adapter: bank.task_assignment[&task],
            task,
            similarity: s,
        },
        _ => AllocationKind::New {
            adapter: bank.next_adapter_id(),
        },
    };
    Ok(AllocationDecision { kind, all_similarities: all })
}

/// Trainable-parameter accounting for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub adapter: usize,
    pub shared: usize,
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Active adapter plus shared trainables, against base + shared + active adapter.
pub fn trainable_count(model: &BiModalSegmenter, adapter: &LoraAdapter) -> ParamCount {
    let adapter_n = adapter.element_count();
    let shared = model.shared().numel();
    let trainable = adapter_n + shared;
    let total = model.base().numel() + shared + adapter_n;
    ParamCount {
        adapter: adapter_n,
        shared,
        trainable,
        total,
        fraction: trainable as f64 / total as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn emb(v: &[f64]) -> PromptEmbedding {
        PromptEmbedding::from_raw(v.to_vec()).unwrap()
    }

    fn bank_with(prompts: &[&[f64]]) -> AdapterBank {
        let mut bank = AdapterBank::new();
        for (t, p) in prompts.iter().enumerate() {
            bank.task_prompts.insert(t, emb(p));
            bank.task_assignment.insert(t, t);
        }
        bank.next_id = prompts.len();
        bank
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&emb(&[0.6, 0.8]), &emb(&[0.6, 0.8])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine_similarity(&emb(&[0.6, 0.8]), &emb(&[1.0, 0.0])).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn empty_bank_allocates_new() {
        let d = allocate(&emb(&[1.0, 0.0]), &AdapterBank::new(), 0.75).unwrap();
        assert_eq!(d.kind, AllocationKind::New { adapter: 0 });
    }

    #[test]
    fn reuses_most_similar_above_threshold() {
        // similarities 0.9 and 0.4 against t0 and t1
        let s = |c: f64| [c, (1.0 - c * c).sqrt()];
        let bank = bank_with(&[&s(0.9), &s(0.4)]);
        let d = allocate(&emb(&[1.0, 0.0]), &bank, 0.75).unwrap();
        match d.kind {
            AllocationKind::Reuse { adapter, task, similarity } => {
                assert_eq!((adapter, task), (0, 0));
                assert!((similarity - 0.9).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        let bank = bank_with(&[&s(0.7)]);
        assert!(!allocate(&emb(&[1.0, 0.0]), &bank, 0.75).unwrap().is_reuse());
    }

    #[test]
    fn ties_go_to_lowest_task() {
        let bank = bank_with(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let d = allocate(&emb(&[1.0, 0.0]), &bank, 0.5).unwrap();
        assert!(matches!(d.kind, AllocationKind::Reuse { task: 0, .. }));
    }

    #[test]
    fn tau_outside_unit_interval_rejected() {
        assert!(allocate(&emb(&[1.0]), &AdapterBank::new(), 1.0).is_err());
        assert!(allocate(&emb(&[1.0]), &AdapterBank::new(), 0.0).is_err());
    }

    #[test]
    fn one_by_one_apply_example() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let target = ParamId::from("w");
        let mut a = LoraAdapter::new(0, &[(target.clone(), [1, 1])], 1, 1.0, &mut rng).unwrap();
        let (a_id, b_id) = (a.a_id(&target), a.b_id(&target));
        a.params_mut().insert(a_id, Tensor::scalar(4.0).reshaped(&[1, 1]).unwrap());
        a.params_mut().insert(b_id, Tensor::scalar(3.0).reshaped(&[1, 1]).unwrap());
        assert_eq!(a.delta(&target).unwrap().data(), &[12.0]);
        assert_eq!(1.0 + a.delta(&target).unwrap().item(), 13.0);
    }

    #[test]
    fn element_count_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = [(ParamId::from("w"), [32, 32])];
        let a8 = LoraAdapter::new(0, &t, 8, 16.0, &mut rng).unwrap();
        assert_eq!(a8.element_count(), 512);
        assert_eq!(a8.scale(), 2.0);
        let a16 = LoraAdapter::new(0, &t, 16, 16.0, &mut rng).unwrap();
        assert_eq!(a16.element_count(), 2 * a8.element_count());
        // fresh adapter is a no-op
        assert!(a8.delta(&t[0].0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    fn raw_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 4).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
    }

    proptest! {
        #[test]
        fn allocation_invariant_to_rescaling(p in raw_vec(), q in raw_vec(), r in raw_vec(), c in 0.01f64..100.0) {
            let bank = bank_with(&[&q, &r]);
            let scaled: Vec<f64> = p.iter().map(|x| x * c).collect();
            let d1 = allocate(&emb(&p), &bank, 0.6).unwrap();
            let d2 = allocate(&emb(&scaled), &bank, 0.6).unwrap();
            prop_assert_eq!(d1.is_reuse(), d2.is_reuse());
            prop_assert_eq!(d1.adapter(), d2.adapter());
        }

        #[test]
        fn self_prompt_is_reused(p in raw_vec(), q in raw_vec(), tau in 0.01f64..0.99) {
            let bank = bank_with(&[&q, &p]);
            let d = allocate(&emb(&p), &bank, tau).unwrap();
            prop_assert!(d.is_reuse());
        }

        #[test]
        fn raising_tau_only_flips_reuse_to_new(p in raw_vec(), q in raw_vec(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let bank = bank_with(&[&q]);
            let d_lo = allocate(&emb(&p), &bank, lo).unwrap();
            let d_hi = allocate(&emb(&p), &bank, hi).unwrap();
            prop_assert!(!(d_hi.is_reuse() && !d_lo.is_reuse()));
        }

        #[test]
        fn cosine_symmetric(p in raw_vec(), q in raw_vec()) {
            let a = cosine_similarity(&emb(&p), &emb(&q)).unwrap();
            let b = cosine_similarity(&emb(&q), &emb(&p)).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}

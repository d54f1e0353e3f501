//! Diagonal Fisher importance over stored samples and the EWC drift penalty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{LoraAdapter, TaskId};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamVars, Var};
use crate::loss::per_item_losses;
use crate::model::{stack_patches, BiModalSegmenter};
use crate::taskgen::Sample;
use crate::tensor::{ParamId, ParamStore, Tensor, TensorError};
use crate::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherMap {
    pub values: ParamStore,
    pub source_task: TaskId,
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub task: TaskId,
    pub values: ParamStore,
}

/// `1 + loss / max_loss`; all samples weigh 1 when `max_loss` is zero.
pub fn difficulty_weight(loss: f64, max_loss: f64) -> Result<f64> {
    if max_loss == 0.0 {
        return Ok(1.0);
    }
    if !(max_loss > 0.0 && (0.0..=max_loss).contains(&loss)) {
        return Err(Error::InvalidArgument(format!("difficulty {loss} outside [0, {max_loss}]")));
    }
    Ok(1.0 + loss / max_loss)
}

/// Difficulty weights for a list of per-sample losses.
pub fn difficulty_weights(losses: &[f64]) -> Result<Vec<f64>> {
    let max = losses.iter().copied().fold(0.0, f64::max);
    losses.iter().map(|&l| difficulty_weight(l, max)).collect()
}

/// Gradient of the per-sample seg + dice loss for every trainable parameter.
pub fn sample_gradients(
    model: &BiModalSegmenter,
    adapter: Option<&LoraAdapter>,
    prompt: &str,
    sample: &Sample,
    trainable: &dyn Fn(&ParamId) -> bool,
) -> Result<BTreeMap<ParamId, Tensor>> {
    let tokens = vocab::tokenize(prompt);
    let (x, y) = stack_patches(std::iter::once(sample))?;
    let store = model.param_store_with(adapter);
    let mut g = Graph::new();
    let vars = g.bind(&store, trainable);
    let w = model.bind_weights(&mut g, &vars, adapter)?;
    let xv = g.constant(x);
    let logits = model.forward_graph(&mut g, &w, &tokens, xv)?;
    let terms = per_item_losses(&mut g, logits, &y)?;
    let loss = g.add(terms.seg, terms.dice)?;
    let loss = g.sum(loss)?;
    let mut grads = g.backward(loss)?;
    grads.retain(|id, _| trainable(id));
    Ok(grads)
}

/// `F_i = Σ_x w(x)·(∂L(x)/∂θ_i)² / Σ_x w(x)` over `samples`, for the parameters selected by
/// `trainable`.
pub fn compute_fisher(
    model: &BiModalSegmenter,
    adapter: Option<&LoraAdapter>,
    prompt: &str,
    samples: &[&Sample],
    weights: &[f64],
    trainable: &dyn Fn(&ParamId) -> bool,
    task: TaskId,
) -> Result<FisherMap> {
    if samples.is_empty() {
        return Err(Error::Empty("Fisher needs at least one stored sample".into()));
    }
    if weights.len() != samples.len() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("one positive weight per sample required".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut values = ParamStore::new();
    for (sample, &w) in samples.iter().zip(weights) {
        let grads = sample_gradients(model, adapter, prompt, sample, trainable)?;
        for (id, grad) in grads {
            let acc = values.get_mut(&id);
            let acc = match acc {
                Some(t) => t,
                None => {
                    values.insert(id.clone(), Tensor::zeros(grad.shape()));
                    values.get_mut(&id).unwrap()
                }
            };
            for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += w * g * g;
            }
        }
    }
    for (_, t) in values.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= total);
    }
    Ok(FisherMap {
        values,
        source_task: task,
        sample_count: samples.len(),
    })
}

/// Deep copy of the parameters trainable during `task`: its adapter plus the shared head.
pub fn snapshot_anchor(model: &BiModalSegmenter, adapter: Option<&LoraAdapter>, task: TaskId) -> Anchor {
    let mut values = model.shared().clone();
    if let Some(a) = adapter {
        values.extend_from(a.params());
    }
    Anchor { task, values }
}

fn check_alignment(anchors: &[Anchor], fishers: &[FisherMap]) -> Result<()> {
    if anchors.len() != fishers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} anchors vs {} Fisher maps",
            anchors.len(),
            fishers.len()
        )));
    }
    for (a, f) in anchors.iter().zip(fishers) {
        if a.task != f.source_task {
            return Err(Error::InvalidArgument(format!(
                "anchor for task {} paired with Fisher of task {}",
                a.task, f.source_task
            )));
        }
        for (id, fv) in f.values.iter() {
            match a.values.get(id) {
                Some(av) if av.shape() == fv.shape() => {}
                other => {
                    return Err(Error::Tensor(TensorError::ShapeMismatch {
                        op: "ewc_anchor",
                        lhs: fv.shape().to_vec(),
                        rhs: other.map(|t| t.shape().to_vec()).unwrap_or_default(),
                    }))
                }
            }
        }
    }
    Ok(())
}

/// `Σ_t Σ_i F_i^t (θ_i − θ_i^t)²` evaluated on plain parameter values. Parameters absent from
/// `live` contribute nothing.
pub fn ewc_penalty(live: &ParamStore, anchors: &[Anchor], fishers: &[FisherMap]) -> Result<f64> {
    check_alignment(anchors, fishers)?;
    let mut total = 0.0;
    for (a, f) in anchors.iter().zip(fishers) {
        for (id, fv) in f.values.iter() {
            let Some(theta) = live.get(id) else { continue };
            if theta.shape() != fv.shape() {
                return Err(Error::Tensor(TensorError::ShapeMismatch {
                    op: "ewc_penalty",
                    lhs: theta.shape().to_vec(),
                    rhs: fv.shape().to_vec(),
                }));
            }
            let anchor = a.values.get(id).unwrap();
            for ((t, a0), fi) in theta.data().iter().zip(anchor.data()).zip(fv.data()) {
                total += fi * (t - a0) * (t - a0);
            }
        }
    }
    Ok(total)
}

/// Graph form of [`ewc_penalty`] over the parameters bound in `vars`. Returns `None` when no
/// Fisher entry touches a bound parameter.
pub fn ewc_penalty_graph(g: &mut Graph, vars: &ParamVars, anchors: &[Anchor], fishers: &[FisherMap]) -> Result<Option<Var>> {
    check_alignment(anchors, fishers)?;
    let mut terms = Vec::new();
    for (a, f) in anchors.iter().zip(fishers) {
        for (id, fv) in f.values.iter() {
            let Some(&theta) = vars.get(id) else { continue };
            let anchor = g.constant(a.values.get(id).unwrap().clone());
            let fisher = g.constant(fv.clone());
            let d = g.sub(theta, anchor)?;
            let d2 = g.square(d)?;
            let wd = g.mul(d2, fisher)?;
            terms.push(g.sum(wd)?);
        }
    }
    let mut iter = terms.into_iter();
    let Some(mut acc) = iter.next() else { return Ok(None) };
    for t in iter {
        acc = g.add(acc, t)?;
    }
    Ok(Some(acc))
}

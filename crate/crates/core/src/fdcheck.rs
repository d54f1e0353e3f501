//! Whole-model finite-difference check.
//!
//! Checking every element of the segmenter with central differences takes two loss
//! evaluations per element. A full forward pass per evaluation is far too slow for that,
//! so [`StagedEvaluator`] caches every intermediate of the unperturbed pass and, for a
//! single perturbed element, recomputes only what that element can reach. Perturbations
//! enter as exact rank-1 updates: a single weight, bias or LoRA factor element changes its
//! effective matrix by `a ⊗ b`, so the affected pre-activation changes by `(X·a) ⊗ b`.
//!
//! The evaluator is plain slice arithmetic written independently of the autodiff graph,
//! which keeps it usable as an oracle for it.

use std::collections::BTreeMap;

use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_with, FdReport};
use crate::graph::Graph;
use crate::loss::per_item_losses;
use crate::model::{stack_patches, BiModalSegmenter, PATCH_DIM, TOKENS};
use crate::taskgen::Sample;
use crate::tensor::{matmul_into, ParamId, ParamStore, Tensor, TensorResult};
use crate::vocab;

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;
const LOG_FLOOR: f64 = 1e-12;
const DICE_EPS: f64 = 1.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    x * sigmoid(2.0 * GELU_C * (x + GELU_K * x * x * x))
}

fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    matmul_into(a, b, &mut out, rows, inner, cols);
    out
}

/// `M · v` for row-major `M` of shape `[rows, cols]`.
fn mat_vec(m: &[f64], v: &[f64], cols: usize) -> Vec<f64> {
    m.chunks_exact(cols).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// `v · M` for row-major `M` of shape `[v.len(), cols]`.
fn vec_mat(v: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (x, row) in v.iter().zip(m.chunks_exact(cols)) {
        if *x != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, w)| *o += x * w);
        }
    }
    out
}

fn add_outer(m: &mut [f64], c: &[f64], r: &[f64]) {
    for (row, &ci) in m.chunks_exact_mut(r.len()).zip(c) {
        if ci != 0.0 {
            row.iter_mut().zip(r).for_each(|(x, rj)| *x += ci * rj);
        }
    }
}

fn add_rows(m: &mut [f64], bias: &[f64]) {
    for row in m.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
    }
}

/// Perturbation of an `[rows, cols]` activation.
enum Delta {
    Rank1 { c: Vec<f64>, r: Vec<f64> },
    Dense(Vec<f64>),
}

/// Where a perturbed element sits in the effective weight it feeds.
struct Effect {
    /// `ΔW = a ⊗ b`.
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Clone)]
struct Block {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

struct Cache {
    film: (Vec<f64>, Vec<f64>),
    /// `h[b]` is the input of vision block `b`; `h[L]` feeds FiLM.
    h: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    logits: Vec<f64>,
    loss: f64,
}

/// Cached forward pass of one model, adapter and batch.
pub struct StagedEvaluator {
    dv: usize,
    dt: usize,
    n: usize,
    tokens: Vec<usize>,
    counts: Vec<f64>,
    x: Vec<f64>,
    masks: Vec<f64>,
    original: ParamStore,
    /// LoRA scale and the factor ids of every target, keyed by target.
    lora: BTreeMap<ParamId, (ParamId, ParamId)>,
    scale: f64,
    blocks: Vec<Block>,
    text: Block,
    cache: Option<Cache>,
}

fn get<'a>(store: &'a ParamStore, id: &str) -> Result<&'a [f64]> {
    store
        .get(&ParamId::from(id))
        .map(Tensor::data)
        .ok_or_else(|| Error::InvalidArgument(format!("parameter {id} missing")))
}

impl StagedEvaluator {
    pub fn new(model: &BiModalSegmenter, adapter: Option<&LoraAdapter>, prompt: &str, samples: &[Sample]) -> Result<Self> {
        let tokens = vocab::tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::Empty("prompt has no words".into()));
        }
        let mut counts = vec![0.0; vocab::vocab_size()];
        for &t in &tokens {
            counts[t] += 1.0 / tokens.len() as f64;
        }
        let (x, y) = stack_patches(samples)?;
        let mut lora = BTreeMap::new();
        if let Some(a) = adapter {
            for t in a.targets() {
                lora.insert(t.clone(), (a.a_id(t), a.b_id(t)));
            }
        }
        let mut ev = StagedEvaluator {
            dv: model.config().d_vision,
            dt: model.config().d_text,
            n: samples.len(),
            tokens,
            counts,
            x: x.data().to_vec(),
            masks: y.data().to_vec(),
            original: model.param_store_with(adapter),
            lora,
            scale: adapter.map_or(0.0, LoraAdapter::scale),
            blocks: Vec::new(),
            text: Block {
                w1: vec![],
                b1: vec![],
                w2: vec![],
                b2: vec![],
            },
            cache: None,
        };
        let store = ev.original.clone();
        ev.text = ev.block_weights(&store, "text.block")?;
        ev.blocks = (0..model.config().vision_blocks)
            .map(|b| ev.block_weights(&store, &format!("vision.block{b}")))
            .collect::<Result<_>>()?;
        Ok(ev)
    }

    pub fn params(&self) -> &ParamStore {
        &self.original
    }

    fn rows(&self) -> usize {
        self.n * TOKENS
    }

    fn effective(&self, store: &ParamStore, target: &str) -> Result<Vec<f64>> {
        let id = ParamId::from(target);
        let w = store
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {target} missing")))?;
        let mut out = w.data().to_vec();
        if let Some((a_id, b_id)) = self.lora.get(&id) {
            let (a, b) = (&store.get(a_id).expect("factor"), &store.get(b_id).expect("factor"));
            let (d, r, k) = (b.shape()[0], b.shape()[1], a.shape()[1]);
            let ba = matmul(b.data(), a.data(), d, r, k);
            out.iter_mut().zip(ba).for_each(|(o, v)| *o += self.scale * v);
        }
        Ok(out)
    }

    fn block_weights(&self, store: &ParamStore, prefix: &str) -> Result<Block> {
        Ok(Block {
            w1: self.effective(store, &format!("{prefix}.w1"))?,
            b1: get(store, &format!("{prefix}.b1"))?.to_vec(),
            w2: self.effective(store, &format!("{prefix}.w2"))?,
            b2: get(store, &format!("{prefix}.b2"))?.to_vec(),
        })
    }

    fn film(&self, store: &ParamStore, e: &[f64], text: &Block) -> Result<(Vec<f64>, Vec<f64>)> {
        let (dt, dv) = (self.dt, self.dv);
        let mut u = vec_mat(e, &text.w1, 2 * dt);
        u.iter_mut().zip(&text.b1).for_each(|(x, b)| *x = gelu(*x + b));
        let mut t = vec_mat(&u, &text.w2, dt);
        t.iter_mut().zip(&text.b2).zip(e).for_each(|((x, b), e)| *x = e + (*x + b));
        let mut f = vec_mat(&t, get(store, "fusion.w")?, 2 * dv);
        f.iter_mut().zip(get(store, "fusion.b")?).for_each(|(x, b)| *x += b);
        let gamma = f[..dv].iter().map(|v| v + 1.0).collect();
        Ok((gamma, f[dv..].to_vec()))
    }

    fn text_input(&self, store: &ParamStore) -> Result<Vec<f64>> {
        Ok(vec_mat(&self.counts, get(store, "text.embed")?, self.dt))
    }

    fn block_forward(&self, b: usize, h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (rows, dv) = (self.rows(), self.dv);
        let w = &self.blocks[b];
        let mut u = matmul(h, &w.w1, rows, dv, 2 * dv);
        add_rows(&mut u, &w.b1);
        let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
        let mut out = matmul(&g, &w.w2, rows, 2 * dv, dv);
        add_rows(&mut out, &w.b2);
        out.iter_mut().zip(h).for_each(|(o, x)| *o += x);
        (u, g, out)
    }

    fn logits(&self, store: &ParamStore, h: &[f64], film: &(Vec<f64>, Vec<f64>)) -> Result<Vec<f64>> {
        let dv = self.dv;
        let mut hf = h.to_vec();
        for row in hf.chunks_exact_mut(dv) {
            row.iter_mut().zip(&film.0).zip(&film.1).for_each(|((x, g), b)| *x = *x * g + b);
        }
        let mut z = matmul(&hf, get(store, "decoder.w")?, self.rows(), dv, PATCH_DIM);
        add_rows(&mut z, get(store, "decoder.b")?);
        Ok(z)
    }

    /// Mean over samples of BCE plus soft-Dice loss, as in training.
    fn loss(&self, logits: &[f64]) -> f64 {
        let per = TOKENS * PATCH_DIM;
        let mut total = 0.0;
        for (z, m) in logits.chunks_exact(per).zip(self.masks.chunks_exact(per)) {
            let (mut ll, mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0, 0.0);
            for (&zi, &mi) in z.iter().zip(m) {
                let p = sigmoid(zi);
                ll += mi * p.max(LOG_FLOOR).ln() + (1.0 - mi) * (1.0 - p).max(LOG_FLOOR).ln();
                inter += p * mi;
                sp += p;
                sg += mi;
            }
            total += -ll / per as f64 + 1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS);
        }
        total / self.n as f64
    }

    fn full(&self, store: &ParamStore) -> Result<Cache> {
        let e = self.text_input(store)?;
        let film = self.film(store, &e, &self.text)?;
        let (rows, dv) = (self.rows(), self.dv);
        let mut h0 = matmul(&self.x, get(store, "vision.patch.w")?, rows, PATCH_DIM, dv);
        add_rows(&mut h0, get(store, "vision.patch.b")?);
        add_rows(&mut h0, get(store, "vision.pos")?);
        let mut h = vec![h0];
        let (mut us, mut gs) = (Vec::new(), Vec::new());
        for b in 0..self.blocks.len() {
            let (u, g, out) = self.block_forward(b, &h[b]);
            us.push(u);
            gs.push(g);
            h.push(out);
        }
        let logits = self.logits(store, h.last().expect("h"), &film)?;
        let loss = self.loss(&logits);
        Ok(Cache {
            film,
            h,
            u: us,
            g: gs,
            logits,
            loss,
        })
    }

    /// Single changed element of `id` relative to the original store: `(index, delta)`.
    fn changed(&self, store: &ParamStore, id: &ParamId) -> Result<Option<(usize, f64)>> {
        let now = store.get(id).ok_or_else(|| Error::InvalidArgument(format!("parameter {id} missing")))?;
        let was = self
            .original
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {id} missing")))?;
        let mut found = None;
        for (i, (a, b)) in now.data().iter().zip(was.data()).enumerate() {
            if a.to_bits() != b.to_bits() {
                if found.is_some() {
                    return Err(Error::InvalidArgument(format!("more than one element of {id} changed")));
                }
                found = Some((i, a - b));
            }
        }
        Ok(found)
    }

    /// `ΔW = a ⊗ b` of the effective matrix `target` when element `i` of `id` moves by `d`.
    fn effect(&self, id: &ParamId, target: &ParamId, i: usize, d: f64) -> Effect {
        let shape = self.original.get(id).expect("checked").shape().to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        let (r, c) = (i / cols, i % cols);
        let unit = |n: usize, at: usize, v: f64| {
            let mut e = vec![0.0; n];
            e[at] = v;
            e
        };
        match self.lora.get(target) {
            Some((a_id, _)) if a_id == id => {
                // A is [rank, k]: column c of W moves by s·d·B[:, r]
                let b = self.original.get(&self.lora[target].1).expect("factor");
                let col: Vec<f64> = b.data().chunks_exact(b.shape()[1]).map(|row| self.scale * d * row[r]).collect();
                Effect {
                    a: col,
                    b: unit(cols, c, 1.0),
                }
            }
            Some((_, b_id)) if b_id == id => {
                // B is [d, rank]: row r of W moves by s·d·A[c, :]
                let a = self.original.get(&self.lora[target].0).expect("factor");
                let k = a.shape()[1];
                let row = a.data()[c * k..(c + 1) * k].iter().map(|v| self.scale * d * v).collect();
                Effect {
                    a: unit(rows, r, 1.0),
                    b: row,
                }
            }
            _ => Effect {
                a: unit(rows, r, 1.0),
                b: unit(cols, c, d),
            },
        }
    }

    /// Re-runs blocks `from..` with `h[from]` perturbed by `delta` and returns the loss.
    fn propagate(&self, store: &ParamStore, cache: &Cache, from: usize, delta: Delta) -> Result<f64> {
        let (rows, dv) = (self.rows(), self.dv);
        let mut delta = delta;
        for b in from..self.blocks.len() {
            let w = &self.blocks[b];
            let mut h = cache.h[b].clone();
            let mut u = cache.u[b].clone();
            match &delta {
                Delta::Rank1 { c, r } => {
                    add_outer(&mut h, c, r);
                    add_outer(&mut u, c, &vec_mat(r, &w.w1, 2 * dv));
                }
                Delta::Dense(d) => {
                    h.iter_mut().zip(d).for_each(|(x, v)| *x += v);
                    let du = matmul(d, &w.w1, rows, dv, 2 * dv);
                    u.iter_mut().zip(du).for_each(|(x, v)| *x += v);
                }
            }
            let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
            let mut out = matmul(&g, &w.w2, rows, 2 * dv, dv);
            add_rows(&mut out, &w.b2);
            out.iter_mut().zip(&h).for_each(|(o, x)| *o += x);
            delta = Delta::Dense(out.iter().zip(&cache.h[b + 1]).map(|(a, b)| a - b).collect());
        }
        let logits = match delta {
            Delta::Rank1 { c, r } => {
                let rg: Vec<f64> = r.iter().zip(&cache.film.0).map(|(a, b)| a * b).collect();
                let mut z = cache.logits.clone();
                add_outer(&mut z, &c, &vec_mat(&rg, get(store, "decoder.w")?, PATCH_DIM));
                z
            }
            Delta::Dense(d) => {
                let h: Vec<f64> = cache.h[self.blocks.len()].iter().zip(&d).map(|(a, b)| a + b).collect();
                self.logits(store, &h, &cache.film)?
            }
        };
        Ok(self.loss(&logits))
    }

    /// Perturbation of block `b`'s pre-activation `u` by `c ⊗ r`.
    fn enter_hidden(&self, store: &ParamStore, cache: &Cache, b: usize, c: Vec<f64>, r: Vec<f64>) -> Result<f64> {
        let (rows, dv) = (self.rows(), self.dv);
        let hidden = 2 * dv;
        let support: Vec<usize> = (0..hidden).filter(|&j| r[j] != 0.0).collect();
        let w2 = &self.blocks[b].w2;
        if let [j] = support[..] {
            let dg: Vec<f64> = (0..rows)
                .map(|i| gelu(cache.u[b][i * hidden + j] + c[i] * r[j]) - cache.g[b][i * hidden + j])
                .collect();
            let row = w2[j * dv..(j + 1) * dv].to_vec();
            return self.propagate(store, cache, b + 1, Delta::Rank1 { c: dg, r: row });
        }
        let mut u = cache.u[b].clone();
        add_outer(&mut u, &c, &r);
        let dg: Vec<f64> = u.iter().zip(&cache.g[b]).map(|(&x, g)| gelu(x) - g).collect();
        self.propagate(store, cache, b + 1, Delta::Dense(matmul(&dg, w2, rows, hidden, dv)))
    }

    /// Loss at `store`, which must equal the original store except for at most one element
    /// of `perturbed`. `None` recomputes everything and refreshes the cache.
    pub fn eval(&mut self, store: &ParamStore, perturbed: Option<&ParamId>) -> Result<f64> {
        let Some(id) = perturbed else {
            let cache = self.full(store)?;
            let loss = cache.loss;
            self.cache = Some(cache);
            return Ok(loss);
        };
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("evaluate the unperturbed store first".into()))?;
        let Some((i, d)) = self.changed(store, id)? else {
            return Ok(cache.loss);
        };
        let rows = self.rows();
        let dv = self.dv;
        let name = id.as_str();
        // LoRA factors are routed to the block of their target
        let target = self
            .lora
            .iter()
            .find(|(_, (a, b))| a == id || b == id)
            .map(|(t, _)| t.clone())
            .unwrap_or_else(|| id.clone());
        let tname = target.as_str().to_string();

        if name == "text.embed" {
            let word = i / self.dt;
            if !self.tokens.contains(&word) {
                return Ok(cache.loss);
            }
            let mut e = self.text_input(&self.original)?;
            e[i % self.dt] += self.counts[word] * d;
            let film = self.film(store, &e, &self.text)?;
            return Ok(self.loss(&self.logits(store, &cache.h[self.blocks.len()], &film)?));
        }
        if tname.starts_with("text.block") {
            let text = self.block_weights(store, "text.block")?;
            let film = self.film(store, &self.text_input(store)?, &text)?;
            return Ok(self.loss(&self.logits(store, &cache.h[self.blocks.len()], &film)?));
        }
        if name.starts_with("fusion.") {
            let film = self.film(store, &self.text_input(store)?, &self.text)?;
            return Ok(self.loss(&self.logits(store, &cache.h[self.blocks.len()], &film)?));
        }
        if name == "decoder.w" || name == "decoder.b" {
            let mut z = cache.logits.clone();
            let j = i % PATCH_DIM;
            if name == "decoder.b" {
                z.iter_mut().skip(j).step_by(PATCH_DIM).for_each(|v| *v += d);
            } else {
                let src = i / PATCH_DIM;
                let (gamma, beta) = &cache.film;
                let hl = &cache.h[self.blocks.len()];
                for r in 0..rows {
                    z[r * PATCH_DIM + j] += d * (hl[r * dv + src] * gamma[src] + beta[src]);
                }
            }
            return Ok(self.loss(&z));
        }
        if name == "vision.patch.w" || name == "vision.patch.b" || name == "vision.pos" {
            let j = i % dv;
            let c: Vec<f64> = match name {
                "vision.patch.w" => (0..rows).map(|r| self.x[r * PATCH_DIM + i / dv]).collect(),
                "vision.patch.b" => vec![1.0; rows],
                _ => (0..rows).map(|r| if r % TOKENS == i / dv { 1.0 } else { 0.0 }).collect(),
            };
            let mut r = vec![0.0; dv];
            r[j] = d;
            return self.propagate(store, cache, 0, Delta::Rank1 { c, r });
        }
        let block = (0..self.blocks.len()).find(|b| tname.starts_with(&format!("vision.block{b}.")));
        let Some(b) = block else {
            return Err(Error::InvalidArgument(format!("no stage for parameter {id}")));
        };
        let hidden = 2 * dv;
        match &tname[tname.len() - 2..] {
            "w1" => {
                let Effect { a, b: r } = self.effect(id, &target, i, d);
                let c = mat_vec(&cache.h[b], &a, dv);
                self.enter_hidden(store, cache, b, c, r)
            }
            "b1" => {
                let mut r = vec![0.0; hidden];
                r[i] = d;
                self.enter_hidden(store, cache, b, vec![1.0; rows], r)
            }
            "w2" => {
                let Effect { a, b: r } = self.effect(id, &target, i, d);
                let c = mat_vec(&cache.g[b], &a, hidden);
                self.propagate(store, cache, b + 1, Delta::Rank1 { c, r })
            }
            "b2" => {
                let mut r = vec![0.0; dv];
                r[i] = d;
                self.propagate(store, cache, b + 1, Delta::Rank1 { c: vec![1.0; rows], r })
            }
            _ => Err(Error::InvalidArgument(format!("no stage for parameter {id}"))),
        }
    }
}

/// Autodiff vs central differences over every element of the model and `adapter`.
pub fn check_model(model: &BiModalSegmenter, adapter: Option<&LoraAdapter>, prompt: &str, samples: &[Sample], h: f64) -> Result<FdReport> {
    let mut ev = StagedEvaluator::new(model, adapter, prompt, samples)?;
    let params = ev.params().clone();
    let tokens = vocab::tokenize(prompt);
    let (x, y) = stack_patches(samples)?;
    let f = |g: &mut Graph, vars: &crate::graph::ParamVars| -> TensorResult<crate::graph::Var> {
        let w = model.bind_weights(g, vars, adapter).map_err(to_tensor_error)?;
        let xv = g.constant(x.clone());
        let logits = model.forward_graph(g, &w, &tokens, xv).map_err(to_tensor_error)?;
        let terms = per_item_losses(g, logits, &y)?;
        let seg = g.mean(terms.seg)?;
        let dice = g.mean(terms.dice)?;
        g.add(seg, dice)
    };
    let report = finite_diff_check_with(&params, h, &f, |store, id| ev.eval(store, id).map_err(to_tensor_error))?;
    Ok(report)
}

fn to_tensor_error(e: Error) -> crate::tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => crate::tensor::TensorError::InvalidArgument(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::{stream_rng, Stream};
    use crate::taskgen::pretext_sample;
    use rand::Rng;

    fn setup() -> (BiModalSegmenter, LoraAdapter, Vec<Sample>) {
        let cfg = ModelConfig {
            d_vision: 4,
            d_text: 4,
            vision_blocks: 2,
        };
        let model = BiModalSegmenter::init(cfg, 5);
        let mut rng = stream_rng(5, Stream::AdapterInit, 0);
        let mut adapter = LoraAdapter::new(0, &model.lora_targets(), 2, 4.0, &mut rng).unwrap();
        for (_, t) in adapter.params_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        (model, adapter, (0..2).map(|i| pretext_sample(9, i)).collect())
    }

    #[test]
    fn staged_losses_match_full_recompute() {
        let (model, adapter, samples) = setup();
        let mut ev = StagedEvaluator::new(&model, Some(&adapter), "small bright disc", &samples).unwrap();
        let base = ev.params().clone();
        ev.eval(&base, None).unwrap();
        let mut reference = StagedEvaluator::new(&model, Some(&adapter), "small bright disc", &samples).unwrap();
        for (id, t) in base.iter() {
            for i in (0..t.numel()).step_by(7) {
                let mut s = base.clone();
                s.get_mut(id).unwrap().data_mut()[i] += 1e-3;
                let staged = ev.eval(&s, Some(id)).unwrap();
                let full = reference.eval_fresh(&s).unwrap();
                assert!((staged - full).abs() < 1e-12, "{id}[{i}]: {staged} vs {full}");
            }
        }
    }

    #[test]
    fn small_model_gradients_match() {
        let (model, adapter, samples) = setup();
        let r = check_model(&model, Some(&adapter), "small bright disc", &samples, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.elements_checked, model.total_params() + adapter.element_count());
    }

    #[test]
    fn default_model_on_one_sample() {
        let model = BiModalSegmenter::init(ModelConfig::default(), 8);
        let adapter = crate::selftest::random_adapter(&model, 8).unwrap();
        let r = check_model(&model, Some(&adapter), "one small bright round disc left", &[pretext_sample(8, 0)], 1e-3).unwrap();
        // at init some text-path gradients are ~1e-9, so roundoff sets the floor;
        // the error shrinks as h grows, which rules out a wrong gradient
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        assert_eq!(r.elements_checked, model.total_params() + adapter.element_count());
    }

    impl StagedEvaluator {
        /// Full pass with every weight rebuilt from `store`, bypassing the cache.
        fn eval_fresh(&mut self, store: &ParamStore) -> Result<f64> {
            self.text = self.block_weights(store, "text.block")?;
            self.blocks = (0..self.blocks.len())
                .map(|b| self.block_weights(store, &format!("vision.block{b}")))
                .collect::<Result<_>>()?;
            Ok(self.full(store)?.loss)
        }
    }
}

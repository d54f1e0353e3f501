//! Toy bi-modal segmenter.
//!
//! Vision path: 4×4 patches of a 32×32 image are embedded linearly, get a positional
//! table added, then pass through residual feed-forward blocks. Text path: the mean word
//! embedding of the prompt passes through one residual two-layer MLP. The text feature
//! drives a FiLM projector that scales and shifts every vision channel, and a linear
//! decoder maps each token back to its 16 pixel logits.
//!
//! Base weights are frozen after pretraining. The FiLM projector and the decoder are shared
//! trainables. LoRA targets are the feed-forward matrices of both paths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamVars, Var};
use crate::loss::per_item_losses;
use crate::metrics;
use crate::optim::AdamW;
use crate::rng::{stream_rng, Stream};
use crate::taskgen::{pretext_sample, Sample, IMAGE_SIZE, PIXELS, PRETEXT_PROMPT};
use crate::tensor::{ParamId, ParamStore, Tensor, TensorResult};
use crate::vocab;

pub const PATCH: usize = 4;
pub const GRID: usize = IMAGE_SIZE / PATCH;
pub const TOKENS: usize = GRID * GRID;
pub const PATCH_DIM: usize = PATCH * PATCH;

/// Pretext validation Dice the pretrained base must exceed.
pub const PRETRAIN_DICE_GATE: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_vision: usize,
    pub d_text: usize,
    pub vision_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_vision: 32,
            d_text: 32,
            vision_blocks: 2,
        }
    }
}

/// Unit-norm text embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    vector: Vec<f64>,
}

impl PromptEmbedding {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidArgument("cannot normalize a zero or non-finite embedding".into()));
        }
        Ok(PromptEmbedding {
            vector: raw.into_iter().map(|x| x / norm).collect(),
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }
}

/// Graph handles for every weight used by one forward pass, with any adapter already folded
/// into its target matrices.
pub struct Weights {
    patch_w: Var,
    patch_b: Var,
    pos: Var,
    blocks: Vec<[Var; 4]>,
    text_embed: Var,
    text: [Var; 4],
    fusion_w: Var,
    fusion_b: Var,
    dec_w: Var,
    dec_b: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiModalSegmenter {
    config: ModelConfig,
    base: ParamStore,
    shared: ParamStore,
}

fn pid(s: &str) -> ParamId {
    ParamId::new(s)
}

fn block_id(i: usize, m: &str) -> ParamId {
    ParamId::new(format!("vision.block{i}.{m}"))
}

const SHARED: [&str; 4] = ["fusion.w", "fusion.b", "decoder.w", "decoder.b"];

/// Row-major 32×32 image to `[64, 16]` patch layout.
pub fn patchify(image: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; PIXELS];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let token = (row / PATCH) * GRID + col / PATCH;
            let within = (row % PATCH) * PATCH + col % PATCH;
            out[token * PATCH_DIM + within] = image[row * IMAGE_SIZE + col];
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; PIXELS];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let token = (row / PATCH) * GRID + col / PATCH;
            let within = (row % PATCH) * PATCH + col % PATCH;
            out[row * IMAGE_SIZE + col] = patches[token * PATCH_DIM + within];
        }
    }
    out
}

/// Stacks samples into `([n, 64, 16] images, [n, 64, 16] masks)` in patch layout.
pub fn stack_patches<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> TensorResult<(Tensor, Tensor)> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut n = 0;
    for s in samples {
        images.extend(patchify(s.image.data()));
        masks.extend(patchify(s.mask.data()));
        n += 1;
    }
    Ok((
        Tensor::new(vec![n, TOKENS, PATCH_DIM], images)?,
        Tensor::new(vec![n, TOKENS, PATCH_DIM], masks)?,
    ))
}

impl BiModalSegmenter {
    /// Randomly initialized model: weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::ModelInit, 0);
        let (dv, dt) = (config.d_vision, config.d_text);
        let mut base = ParamStore::new();
        let lin = |store: &mut ParamStore, name: ParamId, fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore| {
            store.insert(name, Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng));
        };
        lin(&mut base, pid("vision.patch.w"), PATCH_DIM, dv, &mut rng);
        base.insert(pid("vision.patch.b"), Tensor::zeros(&[dv]));
        base.insert(pid("vision.pos"), Tensor::uniform(&[TOKENS, dv], 0.1, &mut rng));
        for i in 0..config.vision_blocks {
            lin(&mut base, block_id(i, "w1"), dv, 2 * dv, &mut rng);
            base.insert(block_id(i, "b1"), Tensor::zeros(&[2 * dv]));
            lin(&mut base, block_id(i, "w2"), 2 * dv, dv, &mut rng);
            base.insert(block_id(i, "b2"), Tensor::zeros(&[dv]));
        }
        base.insert(pid("text.embed"), Tensor::uniform(&[vocab::vocab_size(), dt], 1.0, &mut rng));
        lin(&mut base, pid("text.block.w1"), dt, 2 * dt, &mut rng);
        base.insert(pid("text.block.b1"), Tensor::zeros(&[2 * dt]));
        lin(&mut base, pid("text.block.w2"), 2 * dt, dt, &mut rng);
        base.insert(pid("text.block.b2"), Tensor::zeros(&[dt]));

        let mut shared = ParamStore::new();
        // FiLM starts as identity modulation
        shared.insert(pid("fusion.w"), Tensor::uniform(&[dt, 2 * dv], 0.1 / (dt as f64).sqrt(), &mut rng));
        shared.insert(pid("fusion.b"), Tensor::zeros(&[2 * dv]));
        lin(&mut shared, pid("decoder.w"), dv, PATCH_DIM, &mut rng);
        shared.insert(pid("decoder.b"), Tensor::zeros(&[PATCH_DIM]));
        BiModalSegmenter { config, base, shared }
    }

    pub fn from_parts(config: ModelConfig, base: ParamStore, shared: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), 0);
        for (store, expect) in [(&base, &reference.base), (&shared, &reference.shared)] {
            if store.len() != expect.len() {
                return Err(Error::Format("parameter set does not match the model config".into()));
            }
            for (id, t) in expect.iter() {
                match store.get(id) {
                    Some(v) if v.shape() == t.shape() => {}
                    _ => return Err(Error::Format(format!("parameter {id} missing or mis-shaped"))),
                }
            }
        }
        Ok(BiModalSegmenter { config, base, shared })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn base(&self) -> &ParamStore {
        &self.base
    }

    pub fn shared(&self) -> &ParamStore {
        &self.shared
    }

    pub fn shared_mut(&mut self) -> &mut ParamStore {
        &mut self.shared
    }

    pub fn is_shared(id: &ParamId) -> bool {
        SHARED.contains(&id.as_str())
    }

    /// Base and shared parameters in one store.
    pub fn all_params(&self) -> ParamStore {
        let mut all = self.base.clone();
        all.extend_from(&self.shared);
        all
    }

    pub fn total_params(&self) -> usize {
        self.base.numel() + self.shared.numel()
    }

    /// LoRA-targetable matrices with their `[d, k]` shapes.
    pub fn lora_targets(&self) -> Vec<(ParamId, [usize; 2])> {
        let (dv, dt) = (self.config.d_vision, self.config.d_text);
        let mut out = Vec::new();
        for i in 0..self.config.vision_blocks {
            out.push((block_id(i, "w1"), [dv, 2 * dv]));
            out.push((block_id(i, "w2"), [2 * dv, dv]));
        }
        out.push((pid("text.block.w1"), [dt, 2 * dt]));
        out.push((pid("text.block.w2"), [2 * dt, dt]));
        out
    }

    /// Looks up every model weight in `vars` and folds the adapter's low-rank update into
    /// its targets. `vars` must hold the adapter factors when an adapter is given.
    pub fn bind_weights(&self, g: &mut Graph, vars: &ParamVars, adapter: Option<&LoraAdapter>) -> Result<Weights> {
        let get = |id: &ParamId| -> Result<Var> {
            vars.get(id)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("parameter {id} not bound")))
        };
        let target = |g: &mut Graph, id: ParamId| -> Result<Var> {
            let w = get(&id)?;
            match adapter {
                Some(a) if a.targets_matrix(&id) => {
                    let av = get(&a.a_id(&id))?;
                    let bv = get(&a.b_id(&id))?;
                    let ba = g.matmul(bv, av)?;
                    let ba = g.scale(ba, a.scale())?;
                    Ok(g.add(w, ba)?)
                }
                _ => Ok(w),
            }
        };
        let mut blocks = Vec::new();
        for i in 0..self.config.vision_blocks {
            blocks.push([
                target(g, block_id(i, "w1"))?,
                get(&block_id(i, "b1"))?,
                target(g, block_id(i, "w2"))?,
                get(&block_id(i, "b2"))?,
            ]);
        }
        let text = [
            target(g, pid("text.block.w1"))?,
            get(&pid("text.block.b1"))?,
            target(g, pid("text.block.w2"))?,
            get(&pid("text.block.b2"))?,
        ];
        if let Some(a) = adapter {
            for t in a.targets() {
                let shape = self.base.get(t).map(|w| w.shape().to_vec());
                let delta_shape = [a.params().get(&a.b_id(t)), a.params().get(&a.a_id(t))];
                match (shape, delta_shape) {
                    (Some(s), [Some(b), Some(av)]) if s == [b.shape()[0], av.shape()[1]] => {}
                    _ => {
                        return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                            op: "adapter",
                            lhs: self.base.get(t).map(|w| w.shape().to_vec()).unwrap_or_default(),
                            rhs: vec![],
                        }))
                    }
                }
            }
        }
        Ok(Weights {
            patch_w: get(&pid("vision.patch.w"))?,
            patch_b: get(&pid("vision.patch.b"))?,
            pos: get(&pid("vision.pos"))?,
            blocks,
            text_embed: get(&pid("text.embed"))?,
            text,
            fusion_w: get(&pid("fusion.w"))?,
            fusion_b: get(&pid("fusion.b"))?,
            dec_w: get(&pid("decoder.w"))?,
            dec_b: get(&pid("decoder.b"))?,
        })
    }

    fn token_weights(tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Empty("prompt has no words".into()));
        }
        let mut counts = vec![0.0; vocab::vocab_size()];
        for &t in tokens {
            counts[t] += 1.0 / tokens.len() as f64;
        }
        Ok(Tensor::new(vec![1, vocab::vocab_size()], counts)?)
    }

    /// Text encoder output `[1, d_text]` (not normalized).
    pub fn text_feature(&self, g: &mut Graph, w: &Weights, tokens: &[usize]) -> Result<Var> {
        let counts = g.constant(Self::token_weights(tokens)?);
        let e = g.matmul(counts, w.text_embed)?;
        let [w1, b1, w2, b2] = w.text;
        let h = g.matmul(e, w1)?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, w2)?;
        let h = g.add(h, b2)?;
        Ok(g.add(e, h)?)
    }

    /// Logits `[n, 64, 16]` in patch layout for `patches` of shape `[n, 64, 16]`.
    pub fn forward_graph(&self, g: &mut Graph, w: &Weights, tokens: &[usize], patches: Var) -> Result<Var> {
        let dv = self.config.d_vision;
        let text = self.text_feature(g, w, tokens)?;
        let film = g.matmul(text, w.fusion_w)?;
        let film = g.add(film, w.fusion_b)?;
        let film = g.reshape(film, &[2 * dv])?;
        let gamma = g.slice_last(film, 0, dv)?;
        let gamma = g.add_scalar(gamma, 1.0)?;
        let beta = g.slice_last(film, dv, dv)?;

        let h = g.matmul(patches, w.patch_w)?;
        let h = g.add(h, w.patch_b)?;
        let mut h = g.add(h, w.pos)?;
        for &[w1, b1, w2, b2] in &w.blocks {
            let u = g.matmul(h, w1)?;
            let u = g.add(u, b1)?;
            let u = g.gelu(u)?;
            let u = g.matmul(u, w2)?;
            let u = g.add(u, b2)?;
            h = g.add(h, u)?;
        }
        let h = g.mul(h, gamma)?;
        let h = g.add(h, beta)?;
        let out = g.matmul(h, w.dec_w)?;
        Ok(g.add(out, w.dec_b)?)
    }

    /// Model + adapter parameters as one store, the input expected by [`Self::bind_weights`].
    pub fn param_store_with(&self, adapter: Option<&LoraAdapter>) -> ParamStore {
        let mut all = self.all_params();
        if let Some(a) = adapter {
            all.extend_from(a.params());
        }
        all
    }

    /// Evaluation-only forward of a batch; returns `[n, 64, 16]` patch-layout logits.
    pub fn predict_patches(&self, patches: &Tensor, prompt: &str, adapter: Option<&LoraAdapter>) -> Result<Tensor> {
        let tokens = vocab::tokenize(prompt);
        let mut g = Graph::new();
        let store = self.param_store_with(adapter);
        let vars = g.bind(&store, |_| false);
        let w = self.bind_weights(&mut g, &vars, adapter)?;
        let x = g.constant(patches.clone());
        let out = self.forward_graph(&mut g, &w, &tokens, x)?;
        Ok(g.value(out).clone())
    }

    /// Per-pixel logits `[32, 32]` for one image.
    pub fn forward(&self, image: &Tensor, prompt: &str, adapter: Option<&LoraAdapter>) -> Result<Tensor> {
        if image.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "forward",
                lhs: image.shape().to_vec(),
                rhs: vec![IMAGE_SIZE, IMAGE_SIZE],
            }));
        }
        let patches = Tensor::new(vec![1, TOKENS, PATCH_DIM], patchify(image.data()))?;
        let out = self.predict_patches(&patches, prompt, adapter)?;
        Ok(Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], unpatchify(out.data()))?)
    }

    /// Unit-normalized output of the frozen text encoder (no adapter).
    pub fn embed_text(&self, prompt: &str) -> Result<PromptEmbedding> {
        let tokens = vocab::tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::Empty("prompt has no words".into()));
        }
        let mut g = Graph::new();
        let vars = g.bind(&self.all_params(), |_| false);
        let w = self.bind_weights(&mut g, &vars, None)?;
        let t = self.text_feature(&mut g, &w, &tokens)?;
        PromptEmbedding::from_raw(g.value(t).data().to_vec())
    }

    /// Mean per-sample Dice of binarized predictions over `samples`.
    pub fn evaluate_dice(&self, samples: &[Sample], prompt: &str, adapter: Option<&LoraAdapter>) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("no samples to evaluate".into()));
        }
        let mut total = 0.0;
        for chunk in samples.chunks(64) {
            let (x, y) = stack_patches(chunk)?;
            let logits = self.predict_patches(&x, prompt, adapter)?;
            for (lz, m) in logits.data().chunks(PIXELS).zip(y.data().chunks(PIXELS)) {
                let pred = metrics::binarize(lz);
                total += metrics::dice(&pred, m)?;
            }
        }
        Ok(total / samples.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            seed: 43,
            val_size: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub val_dice: f64,
    pub final_loss: f64,
}

/// Trains the vision path, fusion and decoder on the pretext task (any shape vs
/// background, prompt `object`) and returns the result. The text encoder keeps its
/// initialization: a single fixed prompt carries no signal about word similarity, and
/// fitting it only distorts the embedding geometry that adapter routing relies on. Fails if pretext validation Dice does not exceed
/// [`PRETRAIN_DICE_GATE`].
pub fn pretrain_base(model_config: ModelConfig, cfg: &PretrainConfig) -> Result<(BiModalSegmenter, PretrainReport)> {
    let mut model = BiModalSegmenter::init(model_config, cfg.seed);
    let tokens = vocab::tokenize(PRETEXT_PROMPT);
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut final_loss = f64::NAN;
    let mut next = 0usize;
    for _ in 0..cfg.steps {
        let batch: Vec<Sample> = (0..cfg.batch_size).map(|i| pretext_sample(cfg.seed, next + i)).collect();
        next += cfg.batch_size;
        let (x, y) = stack_patches(&batch)?;
        let mut g = Graph::new();
        let all = model.all_params();
        let vars = g.bind(&all, |id| !is_text_param(id));
        let w = model.bind_weights(&mut g, &vars, None)?;
        let xv = g.constant(x);
        let logits = model.forward_graph(&mut g, &w, &tokens, xv)?;
        let terms = per_item_losses(&mut g, logits, &y)?;
        let seg = g.mean(terms.seg)?;
        let dice = g.mean(terms.dice)?;
        let loss = g.add(seg, dice)?;
        final_loss = g.scalar_value(loss);
        if !final_loss.is_finite() {
            return Err(Error::Divergence("pretraining loss is not finite".into()));
        }
        let grads = g.backward(loss)?;
        let BiModalSegmenter { base, shared, .. } = &mut model;
        opt.step(&mut [base, shared], &grads);
    }
    // validation indices are disjoint from anything the training loop can reach
    let val: Vec<Sample> = (0..cfg.val_size).map(|i| pretext_sample(cfg.seed, usize::MAX / 2 + i)).collect();
    let val_dice = model.evaluate_dice(&val, PRETEXT_PROMPT, None)?;
    if val_dice <= PRETRAIN_DICE_GATE {
        return Err(Error::PretrainGate {
            dice: val_dice,
            gate: PRETRAIN_DICE_GATE,
        });
    }
    Ok((model, PretrainReport { val_dice, final_loss }))
}

fn is_text_param(id: &ParamId) -> bool {
    id.as_str().starts_with("text.")
}

/// A random image in [0, 1] for probes and fixtures.
pub fn random_image<R: Rng + ?Sized>(rng: &mut R) -> Tensor {
    Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], (0..PIXELS).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LoraAdapter;
    use rand::SeedableRng;

    #[test]
    fn patchify_roundtrip() {
        let img: Vec<f64> = (0..PIXELS).map(|v| v as f64).collect();
        let p = patchify(&img);
        assert_eq!(&p[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(p[4], 32.0);
        assert_eq!(unpatchify(&p), img);
    }

    #[test]
    fn zero_b_adapter_is_exact_noop() {
        let model = BiModalSegmenter::init(ModelConfig::default(), 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let adapter = LoraAdapter::new(0, &model.lora_targets(), 8, 16.0, &mut rng).unwrap();
        let img = random_image(&mut rng);
        let base = model.forward(&img, "one small bright round disc", None).unwrap();
        let with = model.forward(&img, "one small bright round disc", Some(&adapter)).unwrap();
        assert_eq!(base, with);
    }

    #[test]
    fn zero_image_gives_finite_logits_of_image_shape() {
        let model = BiModalSegmenter::init(ModelConfig::default(), 1);
        let out = model.forward(&Tensor::zeros(&[32, 32]), "object", None).unwrap();
        assert_eq!(out.shape(), &[32, 32]);
        assert!(out.data().iter().all(|v| v.is_finite()));
        let long = model
            .forward(&Tensor::zeros(&[32, 32]), "one small bright round disc located left of the image", None)
            .unwrap();
        assert_eq!(long.shape(), &[32, 32]);
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let model = BiModalSegmenter::init(ModelConfig::default(), 3);
        let a = model.embed_text("bright round disc").unwrap();
        let b = model.embed_text("bright round disc").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.vector().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let s = crate::adapters::cosine_similarity(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(matches!(model.embed_text("   "), Err(Error::Empty(_))));
    }

    /// Pretraining never binds `text.*`, so the encoder at the pretraining seed is the frozen one.
    #[test]
    fn word_overlap_orders_similarity_over_committed_prompts() {
        use crate::taskgen::{default_suite, SuiteName};
        let model = BiModalSegmenter::init(ModelConfig::default(), PretrainConfig::default().seed);
        let mut prompts: Vec<String> = [SuiteName::Homogeneous, SuiteName::Heterogeneous, SuiteName::Mixed]
            .into_iter()
            .flat_map(default_suite)
            .map(|s| s.prompt)
            .collect();
        prompts.sort();
        prompts.dedup();
        let (mut high, mut none) = (Vec::new(), Vec::new());
        for (i, a) in prompts.iter().enumerate() {
            for b in &prompts[i + 1..] {
                let wa: Vec<&str> = a.split_whitespace().collect();
                let shared = b.split_whitespace().filter(|w| wa.contains(w)).count();
                let s = crate::adapters::cosine_similarity(&model.embed_text(a).unwrap(), &model.embed_text(b).unwrap()).unwrap();
                if shared >= 4 {
                    high.push(s);
                } else if shared == 0 {
                    none.push(s);
                }
            }
        }
        assert!(!high.is_empty() && !none.is_empty());
        let lo = high.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = none.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo > hi, "min 4-shared {lo} <= max 0-shared {hi}");
    }

    #[test]
    fn mismatched_adapter_rejected() {
        let model = BiModalSegmenter::init(ModelConfig::default(), 1);
        let small = BiModalSegmenter::init(
            ModelConfig {
                d_vision: 8,
                d_text: 8,
                vision_blocks: 2,
            },
            1,
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let adapter = LoraAdapter::new(0, &small.lora_targets(), 2, 4.0, &mut rng).unwrap();
        assert!(model.forward(&Tensor::zeros(&[32, 32]), "object", Some(&adapter)).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = BiModalSegmenter::init(ModelConfig::default(), 9);
        let b = BiModalSegmenter::init(ModelConfig::default(), 9);
        assert!(a.all_params().bit_equal(&b.all_params()));
    }

    #[test]
    fn zero_step_pretraining_fails_gate() {
        let cfg = PretrainConfig {
            steps: 0,
            val_size: 8,
            ..PretrainConfig::default()
        };
        assert!(matches!(pretrain_base(ModelConfig::default(), &cfg), Err(Error::PretrainGate { .. })));
    }
}

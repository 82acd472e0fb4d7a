//! A small dual-encoder: a patch-token vision tower and a templated text
//! tower, both pre-norm transformer stacks ending in a projection onto the
//! unit sphere.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::peft::Strategy;
use crate::synth::{rng_for, Universe, Vocabulary};
use crate::tensor::{AdamWConfig, Graph, OptimizerState, Registry, Tensor, Var};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const WORD_A: usize = 2;
pub const WORD_PHOTO: usize = 3;
pub const WORD_OF: usize = 4;
pub const TEMPLATE_WORDS: [usize; 4] = [WORD_A, WORD_PHOTO, WORD_OF, WORD_A];
pub const TEXT_LEN: usize = 7;
const N_WORDS: usize = 5;

pub const LOGIT_SCALE: &str = "logit_scale";
pub const LEXICON: &str = "text.embed.lexicon";
pub const PROMPT_CTX: &str = "text.prompt.ctx";
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092; // ln 100

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Word(usize),
    Class(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tower {
    Vision,
    Text,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Vision => "vision",
            Tower::Text => "text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_dim: usize,
    pub vocab: usize,
    pub lex_dim: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { blocks: 2, width: 32, mlp_hidden: 64, grid_h: 2, grid_w: 2, patch_dim: 16, vocab: 128, lex_dim: 16, ln_eps: 1e-5 }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn image_len(&self) -> usize {
        self.patches() * self.patch_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 || self.mlp_hidden == 0 || self.patches() == 0 || self.patch_dim == 0 {
            bail!(Config, "model dimensions must be positive: {self:?}");
        }
        if self.vocab == 0 || self.lex_dim == 0 {
            bail!(Config, "vocabulary must be non-empty");
        }
        if self.ln_eps <= 0.0 {
            bail!(Config, "layer norm epsilon must be positive");
        }
        Ok(())
    }

    /// Scalars in the pretrained registry (lexicon buffer and temperature included).
    pub fn param_count(&self) -> usize {
        let (d, h, e) = (self.width, self.mlp_hidden, self.blocks);
        let block = 2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
        let tower_tail = 2 * d + d * d + d;
        let vision = self.patch_dim * d + d + self.patches() * d + e * block + tower_tail;
        let text = N_WORDS * d + self.lex_dim * d + TEXT_LEN * d + self.vocab * self.lex_dim + e * block + tower_tail;
        vision + text + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraState {
    pub rank: usize,
    pub gamma: f64,
    pub merged: bool,
}

/// Template rendering for a class: `[BOS, a, photo, of, a, <class>, EOS]`.
pub fn token_sequence(class: usize, vocab: usize) -> Result<[Token; TEXT_LEN]> {
    if class >= vocab {
        bail!(Argument, "class {class} not in vocabulary of {vocab}");
    }
    let [a, b, c, d] = TEMPLATE_WORDS;
    Ok([Token::Word(BOS), Token::Word(a), Token::Word(b), Token::Word(c), Token::Word(d), Token::Class(class), Token::Word(EOS)])
}

#[derive(Debug)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub params: Registry,
    pub strategy: Option<Strategy>,
    pub lora: Option<LoraState>,
    pub prompt_len: usize,
    text_calls: AtomicU64,
}

impl Clone for DualEncoder {
    fn clone(&self) -> Self {
        DualEncoder {
            config: self.config.clone(),
            params: self.params.clone(),
            strategy: self.strategy,
            lora: self.lora,
            prompt_len: self.prompt_len,
            text_calls: AtomicU64::new(0),
        }
    }
}

fn block_names(tower: Tower, i: usize, d: usize, h: usize) -> Vec<(String, Vec<usize>)> {
    let p = format!("{}.block{i}", tower.prefix());
    let mut v = Vec::new();
    for ln in ["ln_attn", "ln_mlp"] {
        v.push((format!("{p}.{ln}.ln_gamma"), vec![d]));
        v.push((format!("{p}.{ln}.ln_beta"), vec![d]));
    }
    for t in ["q", "k", "v", "o"] {
        v.push((format!("{p}.attn.w_{t}"), vec![d, d]));
        v.push((format!("{p}.attn.bias_{t}"), vec![d]));
    }
    v.push((format!("{p}.mlp.mlp_w1"), vec![d, h]));
    v.push((format!("{p}.mlp.bias_mlp1"), vec![h]));
    v.push((format!("{p}.mlp.mlp_w2"), vec![h, d]));
    v.push((format!("{p}.mlp.bias_mlp2"), vec![d]));
    v
}

pub(crate) fn last_segment(name: &str) -> &str {
    name.rsplit('.').next().unwrap_or(name)
}

/// Parameters bound into one graph, by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl DualEncoder {
    pub fn new(config: ModelConfig, vocabulary: &Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocabulary.size != config.vocab || vocabulary.dim != config.lex_dim {
            bail!(Config, "vocabulary {}x{} does not match model {}x{}", vocabulary.size, vocabulary.dim, config.vocab, config.lex_dim);
        }
        let (d, h) = (config.width, config.mlp_hidden);
        let mut rng = rng_for(seed, 0x5EED);
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor {
            let n: usize = shape.iter().product();
            let v = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
            Tensor::new(shape, v).expect("shape matches")
        };
        let mut params = Registry::new();
        let mut put = |name: String, t: Tensor| {
            params.insert(name, t);
        };
        for tower in [Tower::Vision, Tower::Text] {
            let pre = tower.prefix();
            for i in 0..config.blocks {
                for (name, shape) in block_names(tower, i, d, h) {
                    let t = match last_segment(&name) {
                        "ln_gamma" => Tensor::new(shape, vec![1.0; d])?,
                        s if s.starts_with("bias_") || s == "ln_beta" => Tensor::zeros(shape),
                        _ => {
                            let fan_in = shape[0] as f64;
                            normal(shape, 1.0 / fan_in.sqrt())
                        }
                    };
                    put(name, t);
                }
            }
            put(format!("{pre}.ln_final.ln_gamma"), Tensor::new(vec![d], vec![1.0; d])?);
            put(format!("{pre}.ln_final.ln_beta"), Tensor::zeros(vec![d]));
            put(format!("{pre}.proj.proj"), normal(vec![d, d], 1.0 / (d as f64).sqrt()));
            put(format!("{pre}.proj.bias_proj"), Tensor::zeros(vec![d]));
        }
        put("vision.embed.patch".into(), normal(vec![config.patch_dim, d], 1.0 / (config.patch_dim as f64).sqrt()));
        put("vision.embed.bias_patch".into(), Tensor::zeros(vec![d]));
        put("vision.embed.pos".into(), normal(vec![config.patches(), d], 0.02));
        put("text.embed.tokens".into(), normal(vec![N_WORDS, d], 0.02));
        put("text.embed.class".into(), normal(vec![config.lex_dim, d], 1.0 / (config.lex_dim as f64).sqrt()));
        put("text.embed.pos".into(), normal(vec![TEXT_LEN, d], 0.02));
        put(LEXICON.into(), Tensor::new(vec![config.vocab, config.lex_dim], vocabulary.features.clone())?);
        put(LOGIT_SCALE.into(), Tensor::new(vec![1], vec![(1.0f64 / 0.07).ln()])?);
        Ok(DualEncoder { config, params, strategy: None, lora: None, prompt_len: 0, text_calls: AtomicU64::new(0) })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Registry, strategy: Option<Strategy>, lora: Option<LoraState>, prompt_len: usize) -> Self {
        DualEncoder { config, params, strategy, lora, prompt_len, text_calls: AtomicU64::new(0) }
    }

    pub fn tau(&self) -> f64 {
        self.params[LOGIT_SCALE].values[0].exp()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Number of class texts pushed through the text tower since creation or
    /// the last reset.
    pub fn text_encoder_calls(&self) -> u64 {
        self.text_calls.load(Ordering::Relaxed)
    }

    pub fn reset_text_encoder_calls(&self) {
        self.text_calls.store(0, Ordering::Relaxed);
    }

    /// Every registry tensor as a graph leaf; names in `trainable` track gradients.
    pub fn bind(&self, g: &mut Graph, trainable: &BTreeSet<String>) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let (r, c) = t.matrix_shape();
            let v = g.leaf(r, c, t.values.clone(), trainable.contains(name))?;
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Like [`DualEncoder::bind`] but only for the given tower (plus shared scalars).
    fn bind_tower(&self, g: &mut Graph, tower: Tower) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            if name.starts_with(tower.prefix()) || name == LOGIT_SCALE {
                let (r, c) = t.matrix_shape();
                vars.insert(name.clone(), g.constant(r, c, t.values.clone())?);
            }
        }
        Ok(Bound { vars })
    }

    fn linear(&self, g: &mut Graph, b: &Bound, x: Var, w: &str, bias: &str) -> Result<Var> {
        let y = g.matmul(x, b.var(w))?;
        g.add_row(y, b.var(bias))
    }

    fn attn_proj(&self, g: &mut Graph, b: &Bound, x: Var, pre: &str, t: &str) -> Result<Var> {
        let y = self.linear(g, b, x, &format!("{pre}.attn.w_{t}"), &format!("{pre}.attn.bias_{t}"))?;
        match self.lora {
            Some(LoraState { gamma, merged: false, .. }) => {
                let a = b.var(&format!("{pre}.attn.lora_a_{t}"));
                let bb = b.var(&format!("{pre}.attn.lora_b_{t}"));
                let down = g.matmul_nt(x, a)?;
                let up = g.matmul_nt(down, bb)?;
                let up = g.scale(up, gamma)?;
                g.add(y, up)
            }
            _ => Ok(y),
        }
    }

    fn ln(&self, g: &mut Graph, b: &Bound, x: Var, pre: &str) -> Result<Var> {
        g.layer_norm(x, b.var(&format!("{pre}.ln_gamma")), b.var(&format!("{pre}.ln_beta")), self.config.ln_eps)
    }

    fn tower(&self, g: &mut Graph, b: &Bound, tower: Tower, mut x: Var, seq: usize) -> Result<Var> {
        let tp = tower.prefix();
        for i in 0..self.config.blocks {
            let pre = format!("{tp}.block{i}");
            let a = self.ln(g, b, x, &format!("{pre}.ln_attn"))?;
            let q = self.attn_proj(g, b, a, &pre, "q")?;
            let k = self.attn_proj(g, b, a, &pre, "k")?;
            let v = self.attn_proj(g, b, a, &pre, "v")?;
            let o = g.attention(q, k, v, seq)?;
            let o = self.linear(g, b, o, &format!("{pre}.attn.w_o"), &format!("{pre}.attn.bias_o"))?;
            x = g.add(x, o)?;
            let m = self.ln(g, b, x, &format!("{pre}.ln_mlp"))?;
            let m = self.linear(g, b, m, &format!("{pre}.mlp.mlp_w1"), &format!("{pre}.mlp.bias_mlp1"))?;
            let m = g.gelu(m)?;
            let m = self.linear(g, b, m, &format!("{pre}.mlp.mlp_w2"), &format!("{pre}.mlp.bias_mlp2"))?;
            x = g.add(x, m)?;
        }
        let x = self.ln(g, b, x, &format!("{tp}.ln_final"))?;
        let x = g.mean_pool(x, seq)?;
        let x = self.linear(g, b, x, &format!("{tp}.proj.proj"), &format!("{tp}.proj.bias_proj"))?;
        g.l2_normalize(x)
    }

    /// Unit-norm image embeddings, one row per image.
    pub fn image_graph(&self, g: &mut Graph, b: &Bound, images: &[&[f64]]) -> Result<Var> {
        let c = &self.config;
        let p = c.patches();
        let mut data = Vec::with_capacity(images.len() * c.image_len());
        for x in images {
            if x.len() != c.image_len() {
                bail!(Dimension, "image has {} values, expected {}x{}x{}", x.len(), c.grid_h, c.grid_w, c.patch_dim);
            }
            data.extend_from_slice(x);
        }
        if images.is_empty() {
            bail!(Argument, "no images to encode");
        }
        let x = g.constant(images.len() * p, c.patch_dim, data)?;
        let x = self.linear(g, b, x, "vision.embed.patch", "vision.embed.bias_patch")?;
        let x = g.add_tiled(x, b.var("vision.embed.pos"))?;
        self.tower(g, b, Tower::Vision, x, p)
    }

    /// Unit-norm text embeddings for the templated prompt of each class.
    pub fn text_graph(&self, g: &mut Graph, b: &Bound, classes: &[usize]) -> Result<Var> {
        if classes.is_empty() {
            bail!(Argument, "no classes to encode");
        }
        if let Some(c) = classes.iter().find(|&&c| c >= self.config.vocab) {
            bail!(Argument, "class {c} not in vocabulary of {}", self.config.vocab);
        }
        self.text_calls.fetch_add(classes.len() as u64, Ordering::Relaxed);
        let ctx = self.prompt_len;
        let mut table = b.var("text.embed.tokens");
        if ctx > 0 {
            table = g.concat_rows(table, b.var(PROMPT_CTX))?;
        }
        let lex = g.gather_rows(b.var(LEXICON), classes)?;
        let cls = g.matmul(lex, b.var("text.embed.class"))?;
        let table = g.concat_rows(table, cls)?;
        let first_class = N_WORDS + ctx;
        let mut idx = Vec::with_capacity(classes.len() * TEXT_LEN);
        for i in 0..classes.len() {
            idx.push(BOS);
            for (j, &w) in TEMPLATE_WORDS.iter().enumerate() {
                idx.push(if j < ctx { N_WORDS + j } else { w });
            }
            idx.push(first_class + i);
            idx.push(EOS);
        }
        let x = g.gather_rows(table, &idx)?;
        let x = g.add_tiled(x, b.var("text.embed.pos"))?;
        self.tower(g, b, Tower::Text, x, TEXT_LEN)
    }

    pub fn encode_images(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let chunks: Vec<Result<Vec<Vec<f64>>>> = images
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let b = self.bind_tower(&mut g, Tower::Vision)?;
                let e = self.image_graph(&mut g, &b, chunk)?;
                Ok(g.value(e).chunks(self.config.width).map(<[f64]>::to_vec).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_images(&[x])?.remove(0))
    }

    pub fn encode_texts(&self, classes: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let b = self.bind_tower(&mut g, Tower::Text)?;
        let e = self.text_graph(&mut g, &b, classes)?;
        Ok(g.value(e).chunks(self.config.width).map(<[f64]>::to_vec).collect())
    }

    pub fn encode_text(&self, class: usize) -> Result<Vec<f64>> {
        Ok(self.encode_texts(&[class])?.remove(0))
    }

    /// Bitwise digest of every registry tensor whose name satisfies `keep`.
    pub fn registry_hash(&self, keep: impl Fn(&str) -> bool) -> String {
        registry_hash(&self.params, keep)
    }
}

pub fn registry_hash(params: &Registry, keep: impl Fn(&str) -> bool) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in params {
        if !keep(name) {
            continue;
        }
        h.update(name.as_bytes());
        h.update([0]);
        for s in &t.shape {
            h.update((*s as u64).to_le_bytes());
        }
        for v in &t.values {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Argmax of cosine similarity between the image and each class text; ties
/// go to the lowest class id.
pub fn zero_shot_predict(x: &[f64], classes: &[usize], model: &DualEncoder) -> Result<usize> {
    if classes.is_empty() {
        bail!(Argument, "empty candidate set");
    }
    let img = model.encode_image(x)?;
    let mut ids = classes.to_vec();
    ids.sort_unstable();
    let texts = model.encode_texts(&ids)?;
    let scores: Vec<f64> = texts.iter().map(|t| crate::tensor::dot(&img, t)).collect();
    Ok(ids[argmax(&scores)])
}

/// Index of the largest value, first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// distinct classes per batch
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// per-class samples withheld from training for the zero-shot check
    pub holdout: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 1500, batch: 32, lr: 2e-3, weight_decay: 0.01, holdout: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub zero_shot_acc: f64,
    pub tau: f64,
}

fn contrastive_loss(model: &DualEncoder, g: &mut Graph, b: &Bound, images: &[&[f64]], classes: &[usize]) -> Result<Var> {
    let img = model.image_graph(g, b, images)?;
    let txt = model.text_graph(g, b, classes)?;
    let cos = g.matmul_nt(img, txt)?;
    let logits = g.scale_exp(cos, b.var(LOGIT_SCALE))?;
    let labels: Vec<usize> = (0..classes.len()).collect();
    let li = g.cross_entropy(logits, &labels)?;
    let lt = g.transpose(logits)?;
    let lt = g.cross_entropy(lt, &labels)?;
    let sum = g.add(li, lt)?;
    g.scale(sum, 0.5)
}

/// Symmetric image/text contrastive training on every parameter except the
/// lexicon; the temperature is learned and clamped to `[1, 100]`.
pub fn pretrain(model: &mut DualEncoder, universe: &Universe, config: &PretrainConfig) -> Result<PretrainReport> {
    let per_class = universe.config.samples_per_class;
    if universe.class_ids.len() < 2 || per_class < 2 {
        bail!(Config, "pretraining needs at least 2 classes with 2 samples each");
    }
    if config.holdout >= per_class {
        bail!(Config, "holdout {} leaves no training samples out of {per_class}", config.holdout);
    }
    if config.batch < 2 || config.steps == 0 {
        bail!(Config, "pretraining needs batch >= 2 and at least one step");
    }
    if model.strategy.is_some() {
        bail!(State, "cannot pretrain a model with a PEFT strategy attached");
    }
    let batch = config.batch.min(universe.class_ids.len());
    let train_per_class = per_class - config.holdout;
    let names: Vec<String> = model.params.keys().filter(|n| n.as_str() != LEXICON).cloned().collect();
    let trainable: BTreeSet<String> = names.iter().cloned().collect();
    let mut opt = OptimizerState::new(AdamWConfig::new(config.lr, config.weight_decay));
    let mut rng = rng_for(config.seed, 0xC11B);
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 0..config.steps {
        let picks = sample(&mut rng, universe.class_ids.len(), batch).into_vec();
        let classes: Vec<usize> = picks.iter().map(|&i| universe.class_ids[i]).collect();
        let images: Vec<&[f64]> = picks
            .iter()
            .map(|&i| {
                let j = rng.gen_range(0..train_per_class);
                universe.samples[i * per_class + j].x.as_slice()
            })
            .collect();
        let mut g = Graph::new();
        let b = model.bind(&mut g, &trainable)?;
        let loss = contrastive_loss(model, &mut g, &b, &images, &classes)?;
        let lv = g.scalar(loss);
        if step == 0 {
            initial_loss = lv;
        }
        final_loss = lv;
        g.backward(loss)?;
        for name in &names {
            let grad = g.grad(b.var(name)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.params[name].len()]);
            model.params.get_mut(name).expect("bound").set_grad(grad)?;
        }
        opt.step(&mut model.params, &names)?;
        let s = &mut model.params.get_mut(LOGIT_SCALE).expect("present").values[0];
        *s = s.clamp(0.0, MAX_LOGIT_SCALE);
    }
    model.reset_text_encoder_calls();
    let zero_shot_acc = holdout_accuracy(model, universe, config.holdout)?;
    Ok(PretrainReport { initial_loss, final_loss, zero_shot_acc, tau: model.tau() })
}

/// Zero-shot accuracy (percent) on the last `holdout` samples of each class
/// against all classes of the universe.
pub fn holdout_accuracy(model: &DualEncoder, universe: &Universe, holdout: usize) -> Result<f64> {
    let per_class = universe.config.samples_per_class;
    let texts = model.encode_texts(&universe.class_ids)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (ci, _) in universe.class_ids.iter().enumerate() {
        for j in per_class - holdout..per_class {
            images.push(universe.samples[ci * per_class + j].x.as_slice());
            labels.push(ci);
        }
    }
    if images.is_empty() {
        return Ok(0.0);
    }
    let emb = model.encode_images(&images)?;
    let correct = emb
        .iter()
        .zip(&labels)
        .filter(|(e, &l)| argmax(&texts.iter().map(|t| crate::tensor::dot(e, t)).collect::<Vec<_>>()) == l)
        .count();
    Ok(100.0 * correct as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{World, WorldConfig};

    fn tiny() -> DualEncoder {
        let w = World::new(WorldConfig::default()).unwrap();
        DualEncoder::new(ModelConfig::default(), &w.vocabulary(), 3).unwrap()
    }

    #[test]
    fn template_rendering() {
        let t = token_sequence(7, 128).unwrap();
        assert_eq!(t, [Token::Word(BOS), Token::Word(WORD_A), Token::Word(WORD_PHOTO), Token::Word(WORD_OF), Token::Word(WORD_A), Token::Class(7), Token::Word(EOS)]);
        assert!(token_sequence(128, 128).is_err());
    }

    #[test]
    fn layer_norm_instances() {
        let m = tiny();
        let n = m.params.keys().filter(|k| k.ends_with("ln_gamma")).count();
        assert_eq!(n, 2 * (2 * 2 + 1));
    }

    #[test]
    fn param_count_formula() {
        let m = tiny();
        assert_eq!(m.param_count(), m.config.param_count());
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let m = tiny();
        let x: Vec<f64> = (0..m.config.image_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = m.encode_image(&x).unwrap();
        assert_eq!(a, m.encode_image(&x).unwrap());
        assert!((crate::tensor::dot(&a, &a).sqrt() - 1.0).abs() < 1e-9);
        let t = m.encode_text(70).unwrap();
        assert!((crate::tensor::dot(&t, &t).sqrt() - 1.0).abs() < 1e-9);
        assert!(m.encode_text(500).is_err());
        assert!(m.encode_image(&x[1..]).is_err());
    }

    #[test]
    fn batching_does_not_change_embeddings() {
        let m = tiny();
        let xs: Vec<Vec<f64>> = (0..5).map(|k| (0..m.config.image_len()).map(|i| ((i + k * 7) as f64).cos()).collect()).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let all = m.encode_images(&refs).unwrap();
        for (x, e) in refs.iter().zip(&all) {
            assert_eq!(&m.encode_image(x).unwrap(), e);
        }
    }

    #[test]
    fn zero_shot_single_candidate() {
        let m = tiny();
        let x = vec![0.5; m.config.image_len()];
        assert_eq!(zero_shot_predict(&x, &[9], &m).unwrap(), 9);
        assert!(zero_shot_predict(&x, &[], &m).is_err());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

//! A small pre-LN transformer encoder with a pooled classification head.
//!
//! It plays the part of the frozen pretrained model: token embeddings give
//! `e`, prepended prompts are concatenated in front of `e + Q`, and the
//! encoder output is mean-pooled over attended positions into class logits.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_fragment, write_fragment, Manifest};
use crate::error::{Error, Result};
use crate::factorization::ComposedPrompt;
use crate::graph::{Graph, Var};
use crate::optim::{warmup_lr, AdamWConfig, AdamWState};
use crate::taskbench::{gen_task, metric, vocab, Dataset, Example, Label, MetricName, TaskKind};
use crate::tensor::{Scalar, Tensor};

const MASKED: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Architecture descriptor, stored as `arch.json` next to a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_outputs")]
    pub num_outputs: usize,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_outputs() -> usize {
    2
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { d: 64, layers: 2, heads: 4, vocab_size: 128, max_len: 32, ffn_mult: 4, num_outputs: 2 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d={} must split evenly over {} heads", self.d, self.heads)));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.num_outputs == 0 {
            return Err(Error::Config("vocab_size, max_len and num_outputs must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Small preset that pretrains in well under a minute on one core.
    pub fn desk() -> Self {
        Self { d: 32, layers: 2, heads: 4, vocab_size: 16, max_len: 8, ffn_mult: 2, num_outputs: 2 }
    }
}

/// Which parameter groups receive gradients when the model is bound to a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Every parameter trainable (pretraining).
    Full,
    /// Everything frozen except the classifier head.
    HeadOnly,
    Frozen,
}

/// The backbone's parameters bound as leaves of one graph.
pub struct BoundBackbone {
    vars: Vec<Var>,
}

impl BoundBackbone {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel<T> {
    config: BackboneConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    frozen: bool,
    train_head: bool,
}

/// Prompts and embedded tokens laid out as one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput<T> {
    pub values: Tensor<T>,
    pub attention_mask: Vec<bool>,
    pub prompt_len: usize,
}

fn param_names(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dh, f) = (cfg.d, cfg.head_dim(), cfg.d * cfg.ffn_mult);
    let mut out = vec![("embedding".to_string(), vec![cfg.vocab_size, d])];
    for l in 0..cfg.layers {
        out.push((format!("layer{l}.ln1.gamma"), vec![d]));
        out.push((format!("layer{l}.ln1.beta"), vec![d]));
        for h in 0..cfg.heads {
            for p in ["q", "k", "v"] {
                out.push((format!("layer{l}.head{h}.w{p}"), vec![d, dh]));
                out.push((format!("layer{l}.head{h}.b{p}"), vec![dh]));
            }
            out.push((format!("layer{l}.head{h}.wo"), vec![dh, d]));
        }
        out.push((format!("layer{l}.attn.bo"), vec![d]));
        out.push((format!("layer{l}.ln2.gamma"), vec![d]));
        out.push((format!("layer{l}.ln2.beta"), vec![d]));
        out.push((format!("layer{l}.ffn.w1"), vec![d, f]));
        out.push((format!("layer{l}.ffn.b1"), vec![f]));
        out.push((format!("layer{l}.ffn.w2"), vec![f, d]));
        out.push((format!("layer{l}.ffn.b2"), vec![d]));
    }
    out.push(("final_ln.gamma".to_string(), vec![d]));
    out.push(("final_ln.beta".to_string(), vec![d]));
    out.push(("head.w".to_string(), vec![d, cfg.num_outputs]));
    out.push(("head.b".to_string(), vec![cfg.num_outputs]));
    out
}

/// Sinusoidal encoding for token position `pos`.
pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl<T: Scalar> BackboneModel<T> {
    /// Random initialization, deterministic per seed.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_names(&config) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("gamma") {
                vec![1.0; numel]
            } else if shape.len() == 1 {
                vec![0.0; numel]
            } else {
                let std = if name == "embedding" { 1.0 } else { 1.0 / (shape[0] as f64).sqrt() };
                let dist = Normal::new(0.0, std).map_err(|e| Error::Init(e.to_string()))?;
                (0..numel).map(|_| dist.sample(&mut rng)).collect()
            };
            names.push(name);
            tensors.push(Tensor::from_f64(&shape, &data)?);
        }
        Ok(Self::from_parts(config, names, tensors))
    }

    fn from_parts(config: BackboneConfig, names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { config, names, tensors, index, frozen: false, train_head: false }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks θ frozen. `train_head` keeps the classifier head trainable.
    pub fn freeze(&mut self, train_head: bool) {
        self.frozen = true;
        self.train_head = train_head;
    }

    pub fn head_trainable(&self) -> bool {
        self.train_head
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> BackboneModel<U> {
        BackboneModel {
            config: self.config,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            frozen: self.frozen,
            train_head: self.train_head,
        }
    }

    /// SHA-256 over parameter names and raw values, in order.
    pub fn theta_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    pub(crate) fn is_head(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Updates parameters in place. Only called by training code; refuses
    /// to touch frozen groups.
    pub(crate) fn tensor_data_mut(&mut self, i: usize) -> Result<&mut Tensor<T>> {
        if self.frozen && !(self.train_head && Self::is_head(&self.names[i])) {
            return Err(Error::Contract(format!("parameter {} is frozen", self.names[i])));
        }
        Ok(&mut self.tensors[i])
    }

    /// Restores a tuned classifier head tensor; only `head.*` names with
    /// a matching shape are accepted.
    pub fn replace_head_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .filter(|_| Self::is_head(name))
            .ok_or_else(|| Error::Contract(format!("{name} is not a classifier head tensor")))?;
        if value.shape() != self.tensors[i].shape() {
            return Err(Error::shape("replace_head_tensor", self.tensors[i].shape(), value.shape()));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, mode: BindMode) -> BoundBackbone {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let trainable = match mode {
                    BindMode::Full => true,
                    BindMode::HeadOnly => Self::is_head(name),
                    BindMode::Frozen => false,
                };
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundBackbone { vars }
    }

    /// Binding used during prompt adaptation: frozen, except for the head when unfrozen.
    pub fn bind_for_adaptation(&self, g: &mut Graph<T>) -> BoundBackbone {
        self.bind(g, if self.train_head { BindMode::HeadOnly } else { BindMode::Frozen })
    }

    fn var(&self, bound: &BoundBackbone, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn pad_ids(&self, tokens: &[usize], l: usize) -> Result<(Vec<usize>, Vec<bool>)> {
        let mut ids = Vec::with_capacity(l);
        let mut mask = Vec::with_capacity(l);
        for j in 0..l {
            match tokens.get(j) {
                Some(&id) => {
                    if id >= self.config.vocab_size {
                        return Err(Error::Vocab { id, vocab: self.config.vocab_size });
                    }
                    ids.push(id);
                    mask.push(true);
                }
                None => {
                    ids.push(vocab::PAD);
                    mask.push(false);
                }
            }
        }
        Ok((ids, mask))
    }

    /// Word embeddings of `tokens`, padded or truncated to `l` rows.
    pub fn embed(&self, tokens: &[usize], l: usize) -> Result<(Tensor<T>, Vec<bool>)> {
        let (ids, mask) = self.pad_ids(tokens, l)?;
        let table = &self.tensors[self.index["embedding"]];
        let data = ids.iter().flat_map(|&id| table.row(id).iter().copied()).collect();
        Ok((Tensor::new(&[l, self.config.d], data)?, mask))
    }

    /// In-graph counterpart of [`BackboneModel::embed`].
    pub fn embed_var(
        &self,
        g: &mut Graph<T>,
        bound: &BoundBackbone,
        tokens: &[usize],
        l: usize,
    ) -> Result<(Var, Vec<bool>)> {
        let (ids, mask) = self.pad_ids(tokens, l)?;
        let e = g.gather(self.var(bound, "embedding"), &ids)?;
        Ok((e, mask))
    }

    /// Encoder stack, masked mean-pool and head. `x` is `(m+l)×d` with the
    /// first `prompt_len` rows being prepended prompts.
    pub fn forward_var(
        &self,
        g: &mut Graph<T>,
        bound: &BoundBackbone,
        x: Var,
        mask: &[bool],
        prompt_len: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (s, d) = g.value(x).dims2()?;
        if d != cfg.d || mask.len() != s || prompt_len > s {
            return Err(Error::Contract(format!(
                "input {s}x{d} with mask {} and {prompt_len} prompts does not fit d={}",
                mask.len(),
                cfg.d
            )));
        }
        if s - prompt_len > cfg.max_len {
            return Err(Error::Contract(format!("{} token positions exceed max_len {}", s - prompt_len, cfg.max_len)));
        }

        let mut pos = vec![0.0; s * d];
        for j in 0..s - prompt_len {
            pos[(prompt_len + j) * d..(prompt_len + j + 1) * d].copy_from_slice(&positional_encoding(j, d));
        }
        let pos = g.constant(Tensor::from_f64(&[s, d], &pos)?);
        let mut h = g.add(x, pos)?;

        let bias: Vec<f64> = (0..s).flat_map(|_| mask.iter().map(|&m| if m { 0.0 } else { MASKED })).collect();
        let bias = g.constant(Tensor::from_f64(&[s, s], &bias)?);
        let inv_sqrt = 1.0 / (cfg.head_dim() as f64).sqrt();

        for l in 0..cfg.layers {
            let at_layer = |e: Error| match e {
                Error::NonFinite(op) => Error::NonFinite(format!("layer {l}: {op}")),
                other => other,
            };
            h = self.encoder_layer(g, bound, h, bias, inv_sqrt, l).map_err(at_layer)?;
        }

        let at_head = |e: Error| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("layer {}: {op}", cfg.layers)),
            other => other,
        };
        let hf = g
            .layer_norm(h, self.var(bound, "final_ln.gamma"), self.var(bound, "final_ln.beta"), LN_EPS)
            .map_err(at_head)?;
        let count = mask.iter().filter(|&&m| m).count();
        let pool: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
        let pool = g.constant(Tensor::from_f64(&[1, s], &pool)?);
        let pooled = g.matmul(pool, hf).map_err(at_head)?;
        let logits = g.matmul(pooled, self.var(bound, "head.w")).map_err(at_head)?;
        g.add_row(logits, self.var(bound, "head.b")).map_err(at_head)
    }

    fn encoder_layer(
        &self,
        g: &mut Graph<T>,
        bound: &BoundBackbone,
        h: Var,
        bias: Var,
        inv_sqrt: f64,
        l: usize,
    ) -> Result<Var> {
        let v = |name: String| self.var(bound, &name);
        let x = g.layer_norm(h, v(format!("layer{l}.ln1.gamma")), v(format!("layer{l}.ln1.beta")), LN_EPS)?;
        let mut attn: Option<Var> = None;
        for hd in 0..self.config.heads {
            let proj = |g: &mut Graph<T>, p: &str| -> Result<Var> {
                let y = g.matmul(x, v(format!("layer{l}.head{hd}.w{p}")))?;
                g.add_row(y, v(format!("layer{l}.head{hd}.b{p}")))
            };
            let q = proj(g, "q")?;
            let k = proj(g, "k")?;
            let val = proj(g, "v")?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let scores = g.add(scores, bias)?;
            let weights = g.softmax(scores)?;
            let ctx = g.matmul(weights, val)?;
            let out = g.matmul(ctx, v(format!("layer{l}.head{hd}.wo")))?;
            attn = Some(match attn {
                Some(acc) => g.add(acc, out)?,
                None => out,
            });
        }
        let attn = g.add_row(attn.expect("at least one head"), v(format!("layer{l}.attn.bo")))?;
        let h = g.add(h, attn)?;

        let x = g.layer_norm(h, v(format!("layer{l}.ln2.gamma")), v(format!("layer{l}.ln2.beta")), LN_EPS)?;
        let f = g.matmul(x, v(format!("layer{l}.ffn.w1")))?;
        let f = g.add_row(f, v(format!("layer{l}.ffn.b1")))?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, v(format!("layer{l}.ffn.w2")))?;
        let f = g.add_row(f, v(format!("layer{l}.ffn.b2")))?;
        g.add(h, f)
    }

    /// Logits for an already assembled input.
    pub fn forward(&self, input: &AssembledInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, BindMode::Frozen);
        let x = g.constant(input.values.clone());
        let logits = self.forward_var(&mut g, &bound, x, &input.attention_mask, input.prompt_len)?;
        Ok(g.value(logits).clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut arch = serde_json::to_string_pretty(&self.config)?;
        arch.push('\n');
        fs::write(dir.join("arch.json"), arch)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
            write_fragment(dir, name, &Manifest::tensor(t.shape()), &data)?;
        }
        Ok(())
    }

    /// Loads a checkpoint; the result is frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let arch = fs::read_to_string(dir.join("arch.json"))?;
        let config: BackboneConfig =
            serde_json::from_str(&arch).map_err(|e| Error::Format(format!("arch.json: {e}")))?;
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_names(&config) {
            let (manifest, data) = read_fragment(dir, &name)?;
            if manifest.shape()? != shape {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, architecture expects {shape:?}",
                    manifest.shape()?
                )));
            }
            let data = data.into_iter().map(|v| T::from_f64_lossy(f64::from(v))).collect();
            tensors.push(Tensor::new(&shape, data)?);
            names.push(name);
        }
        let mut model = Self::from_parts(config, names, tensors);
        model.freeze(false);
        Ok(model)
    }
}

/// Lays out `[P; e + Q]` with `P` attended at every position.
pub fn assemble_input<T: Scalar>(
    prompt: &ComposedPrompt<T>,
    added: &ComposedPrompt<T>,
    e: &Tensor<T>,
    mask: &[bool],
) -> Result<AssembledInput<T>> {
    let (l, d) = e.dims2()?;
    if added.positions() != l || added.d() != d || mask.len() != l {
        return Err(Error::Contract(format!(
            "added prompt {}x{} and mask {} must match embeddings {l}x{d}",
            added.positions(),
            added.d(),
            mask.len()
        )));
    }
    if prompt.positions() > 0 && prompt.d() != d {
        return Err(Error::shape("assemble_input", &[prompt.positions(), prompt.d()], e.shape()));
    }
    let mut values = prompt.values().to_vec();
    values.extend(e.data().iter().zip(added.values()).map(|(&a, &b)| a + b));
    let mut attention_mask = vec![true; prompt.positions()];
    attention_mask.extend_from_slice(mask);
    Ok(AssembledInput {
        values: Tensor::new(&[prompt.positions() + l, d], values)?,
        attention_mask,
        prompt_len: prompt.positions(),
    })
}

/// In-graph assembly. Either prompt may be absent.
pub fn assemble_var<T: Scalar>(
    g: &mut Graph<T>,
    prompt: Option<Var>,
    added: Option<Var>,
    e: Var,
    mask: &[bool],
) -> Result<(Var, Vec<bool>, usize)> {
    let body = match added {
        Some(q) => g.add(e, q)?,
        None => e,
    };
    match prompt {
        Some(p) => {
            let m = g.value(p).dims2()?.0;
            let x = g.concat_rows(p, body)?;
            let mut full = vec![true; m];
            full.extend_from_slice(mask);
            Ok((x, full, m))
        }
        None => Ok((body, mask.to_vec(), 0)),
    }
}

/// Per-example loss: cross-entropy for class labels, squared error on the
/// first output for real-valued ones.
pub fn example_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, label: Label, regression: bool) -> Result<Var> {
    if regression {
        let pred = g.slice(logits, 0, 1)?;
        g.mse(pred, &[T::from_f64_lossy(label.as_f64())])
    } else {
        match label {
            Label::Class(c) => g.cross_entropy(logits, &[c]),
            Label::Value(v) => Err(Error::Contract(format!("real label {v} for a classification loss"))),
        }
    }
}

/// Argmax class, or the first output for regression.
pub fn predict<T: Scalar>(logits: &[T], regression: bool) -> f64 {
    if regression {
        return logits[0].as_f64();
    }
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as f64
}

/// Multi-task pretraining recipe for the stand-in backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub tasks: Vec<TaskKind>,
    /// Tokens per sequence before the task marker is prepended.
    pub seq_len: usize,
    pub train_per_task: usize,
    pub eval_per_task: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            tasks: vec![TaskKind::TokenMajority, TaskKind::PairMatch, TaskKind::CountRegression],
            seq_len: 7,
            train_per_task: 2000,
            eval_per_task: 200,
            steps: 3000,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
        }
    }
}

impl PretrainConfig {
    /// Pretraining recipe for [`BackboneConfig::desk`].
    pub fn desk() -> Self {
        Self { backbone: BackboneConfig::desk(), train_per_task: 1000, steps: 5000, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Held-out accuracy (pearson for regression) per source task.
    pub task_metrics: Vec<(TaskKind, f64)>,
    pub final_loss: f64,
}

/// Data-seed offsets so source data never coincides with target generators.
const TRAIN_SEED_SALT: u64 = 0x5eed_0001;
const EVAL_SEED_SALT: u64 = 0x5eed_0002;

fn task_data(cfg: &PretrainConfig, kind: TaskKind, n: usize, seed: u64) -> Result<Dataset> {
    let n = if kind.num_classes() == 2 { n + n % 2 } else { n };
    Ok(gen_task(kind, cfg.backbone.vocab_size, cfg.seq_len, n, seed)?.with_marker(kind))
}

/// Trains θ on a mixture of marked source tasks, then freezes it.
pub fn pretrain_backbone(cfg: &PretrainConfig, seed: u64) -> Result<(BackboneModel<f32>, PretrainReport)> {
    if cfg.tasks.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs at least one task and a positive batch".into()));
    }
    if cfg.seq_len + 1 > cfg.backbone.max_len {
        return Err(Error::Config(format!(
            "seq_len {} plus a marker exceeds max_len {}",
            cfg.seq_len, cfg.backbone.max_len
        )));
    }
    let mut model = BackboneModel::<f32>::init(cfg.backbone, seed)?;
    let mut pool: Vec<(Example, bool)> = Vec::new();
    for (i, &kind) in cfg.tasks.iter().enumerate() {
        let ds = task_data(cfg, kind, cfg.train_per_task, seed ^ TRAIN_SEED_SALT.wrapping_add(i as u64))?;
        let regression = ds.is_regression();
        pool.extend(ds.examples.into_iter().map(|e| (e, regression)));
    }

    let opt = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut states: Vec<AdamWState<f32>> = model.tensors.iter().map(|t| AdamWState::new(t.numel())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut last_loss = f64::NAN;
    let l = cfg.backbone.max_len.min(cfg.seq_len + 1);

    for step in 1..=cfg.steps {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, BindMode::Full);
        let mut total: Option<Var> = None;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..pool.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                cursor = 0;
            }
            let (ex, regression) = &pool[order[cursor]];
            cursor += 1;
            let (e, mask) = model.embed_var(&mut g, &bound, &ex.tokens, l)?;
            let logits = model.forward_var(&mut g, &bound, e, &mask, 0)?;
            let loss = example_loss(&mut g, logits, ex.label, *regression)?;
            total = Some(match total {
                Some(t) => g.add(t, loss)?,
                None => loss,
            });
        }
        let loss = g.scale(total.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64)?;
        last_loss = g.value(loss).data()[0] as f64;
        if !last_loss.is_finite() {
            return Err(Error::Training { step, reason: "pretraining loss is not finite".into() });
        }
        let grads = g.backward(loss)?;
        let lr = warmup_lr(cfg.lr, step, cfg.warmup_steps);
        for (i, var) in bound.vars.iter().enumerate() {
            if let Some(grad) = grads.get(*var) {
                let t = &mut model.tensors[i];
                let mut data = std::mem::take(t).into_data();
                states[i].step(&opt, lr, &mut data, grad.data());
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Training { step, reason: format!("{} diverged", model.names[i]) });
                }
                *t = Tensor::new(grad.shape(), data)?;
            }
        }
    }

    let mut task_metrics = Vec::new();
    for (i, &kind) in cfg.tasks.iter().enumerate() {
        let ds = task_data(cfg, kind, cfg.eval_per_task, seed ^ EVAL_SEED_SALT.wrapping_add(i as u64))?;
        task_metrics.push((kind, evaluate_plain(&model, &ds, l)?));
    }
    model.freeze(false);
    Ok((model, PretrainReport { task_metrics, final_loss: last_loss }))
}

/// Accuracy (or pearson) of the bare backbone with no prompts.
pub fn evaluate_plain<T: Scalar>(model: &BackboneModel<T>, ds: &Dataset, l: usize) -> Result<f64> {
    let regression = ds.is_regression();
    let mut preds = Vec::with_capacity(ds.len());
    for ex in &ds.examples {
        let (e, mask) = model.embed(&ex.tokens, l)?;
        let input = AssembledInput { values: e, attention_mask: mask, prompt_len: 0 };
        preds.push(predict(model.forward(&input)?.data(), regression));
    }
    let name = if regression { MetricName::Pearson } else { MetricName::Accuracy };
    metric(name, &preds, &ds.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig { d: 16, layers: 2, heads: 2, vocab_size: 16, max_len: 8, ffn_mult: 2, num_outputs: 2 }
    }

    #[test]
    fn embed_gathers_and_pads() {
        let m = BackboneModel::<f64>::init(tiny(), 0).unwrap();
        let (e, mask) = m.embed(&[5, 7], 4).unwrap();
        let table = m.tensor("embedding").unwrap();
        assert_eq!(e.row(0), table.row(5));
        assert_eq!(e.row(1), table.row(7));
        assert_eq!(e.row(2), table.row(vocab::PAD));
        assert_eq!(mask, vec![true, true, false, false]);
        let (empty, mask) = m.embed(&[], 3).unwrap();
        assert!(mask.iter().all(|&b| !b));
        assert_eq!(empty.row(1), table.row(vocab::PAD));
        assert_eq!(m.embed(&[5, 7], 4).unwrap().0, e);
        assert!(matches!(m.embed(&[16], 4), Err(Error::Vocab { id: 16, .. })));
    }

    #[test]
    fn assembly_shapes() {
        let p = ComposedPrompt::<f32>::zeros(60, 768);
        let q = ComposedPrompt::zeros(256, 768);
        let e = Tensor::zeros(&[256, 768]);
        let a = assemble_input(&p, &q, &e, &vec![false; 256]).unwrap();
        assert_eq!(a.values.shape(), &[316, 768]);
        assert_eq!(a.attention_mask.iter().filter(|&&b| b).count(), 60);
        assert!(assemble_input(&p, &ComposedPrompt::zeros(255, 768), &e, &vec![false; 256]).is_err());
    }

    #[test]
    fn zero_added_prompt_leaves_embeddings() {
        let m = BackboneModel::<f64>::init(tiny(), 1).unwrap();
        let (e, mask) = m.embed(&[6, 7, 8], 5).unwrap();
        let p = ComposedPrompt::new(1, 16, vec![0.5; 16]).unwrap();
        let a = assemble_input(&p, &ComposedPrompt::zeros(5, 16), &e, &mask).unwrap();
        assert_eq!(&a.values.data()[16..], e.data());
        let none = assemble_input(&ComposedPrompt::zeros(0, 16), &ComposedPrompt::zeros(5, 16), &e, &mask).unwrap();
        assert_eq!(none.values, e);
        assert_eq!(none.prompt_len, 0);
    }

    #[test]
    fn padding_rows_do_not_matter() {
        let m = BackboneModel::<f64>::init(tiny(), 2).unwrap();
        let (e, mask) = m.embed(&[6, 9], 6).unwrap();
        let p = ComposedPrompt::new(2, 16, (0..32).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap();
        let q = ComposedPrompt::new(6, 16, (0..96).map(|i| (i as f64 * 0.3).cos() * 0.2).collect()).unwrap();
        let a = assemble_input(&p, &q, &e, &mask).unwrap();
        let base = m.forward(&a).unwrap();
        assert_eq!(base.shape(), &[1, 2]);
        // swap padding rows 4 and 5 of the token block (rows 6, 7 overall)
        let mut swapped = a.values.data().to_vec();
        for j in 0..16 {
            swapped.swap(6 * 16 + j, 7 * 16 + j);
        }
        let b = AssembledInput { values: Tensor::new(&[8, 16], swapped).unwrap(), ..a.clone() };
        assert!(m.forward(&b).unwrap().max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BackboneModel::<f32>::init(tiny(), 3).unwrap();
        m.save(dir.path()).unwrap();
        let back = BackboneModel::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.theta_hash(), m.theta_hash());
        assert!(back.is_frozen());
        assert_eq!(back.tensors(), m.tensors());
    }

    #[test]
    fn frozen_parameters_refuse_updates() {
        let mut m = BackboneModel::<f32>::init(tiny(), 3).unwrap();
        m.freeze(true);
        assert!(m.tensor_data_mut(0).is_err());
        let head = m.names().iter().position(|n| n == "head.w").unwrap();
        assert!(m.tensor_data_mut(head).is_ok());
    }
}

//! Prompt adaptation against a frozen backbone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{assemble_var, example_loss, predict, BackboneModel, BindMode};
use crate::checkpoint::{fragment_exists, read_fragment, write_fragment, FragmentKind, Manifest};
use crate::error::{Error, Result};
use crate::factorization::{init_random, Codebook, ComposedPrompt, PromptDims, ScaleSpec, WeightSet};
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::optim::{warmup_lr, AdamWConfig, AdamWState};
use crate::prompt::{PromptComponent, PromptParams, Role, Slot};
use crate::taskbench::{metric, Dataset, Example, MetricName};
use crate::tensor::{DType, Scalar};

/// Learning rates searched for the prepended component.
pub const SCPP_LR_GRID: [f64; 3] = [3e-1, 4e-1, 5e-1];
/// Learning rates searched for the added component.
pub const SCAP_LR_GRID: [f64; 4] = [1e-4, 5e-4, 1e-3, 5e-3];
/// Larger added-component rates, searched when the base grid is not enough.
pub const SCAP_LR_GRID_EXTENDED: [f64; 3] = [1.0, 5.0, 10.0];

/// Per-tensor learning rates that take precedence over the per-component ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrOverrides {
    pub scpp_codebook: Option<f64>,
    pub scpp_weights: Option<f64>,
    pub scap_codebook: Option<f64>,
    pub scap_weights: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub eval_interval: usize,
    pub lr_scpp: f64,
    pub lr_scap: f64,
    pub lr_overrides: LrOverrides,
    pub seed: u64,
    pub dtype: DType,
    /// Evaluation metric; accuracy (classification) or pearson (regression) when unset.
    pub metric: Option<MetricName>,
    /// Learning rate of the classifier head when the backbone leaves it trainable.
    pub lr_head: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            warmup_steps: 120,
            weight_decay: 0.01,
            eval_interval: 100,
            lr_scpp: 3e-1,
            lr_scap: 5e-3,
            lr_overrides: LrOverrides::default(),
            seed: 0,
            dtype: DType::F32,
            metric: None,
            lr_head: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Ok(());
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be at least 1".into()));
        }
        if self.eval_interval > self.steps {
            return Err(Error::Config(format!("eval_interval {} exceeds steps {}", self.eval_interval, self.steps)));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps)));
        }
        Ok(())
    }

    /// Learning rate for one prompt tensor before warmup scaling.
    pub fn lr_for(&self, role: Role, slot: Slot) -> f64 {
        let o = &self.lr_overrides;
        let over = match (role, slot) {
            (Role::Prepended, Slot::Codebook) => o.scpp_codebook,
            (Role::Prepended, Slot::Weights) => o.scpp_weights,
            (Role::Added, Slot::Codebook) => o.scap_codebook,
            (Role::Added, Slot::Weights) => o.scap_weights,
            (_, Slot::Plain) => None,
        };
        over.unwrap_or(match role {
            Role::Prepended => self.lr_scpp,
            Role::Added => self.lr_scap,
        })
    }

    pub fn metric_for(&self, ds: &Dataset) -> MetricName {
        self.metric.unwrap_or(if ds.is_regression() { MetricName::Pearson } else { MetricName::Accuracy })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: usize,
    pub metric: f64,
    pub checkpoint: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EvalRecord>,
    pub best: Option<BestRecord>,
}

impl RunHistory {
    /// `step,train_loss,eval_metric` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,eval_metric\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.step, r.train_loss, r.eval_metric));
        }
        out
    }

    fn push(&mut self, record: EvalRecord) -> bool {
        self.records.push(record);
        let improved = self.best.as_ref().is_none_or(|b| record.eval_metric > b.metric);
        if improved {
            self.best = Some(BestRecord {
                step: record.step,
                metric: record.eval_metric,
                checkpoint: format!("step-{}", record.step),
            });
        }
        improved
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Prompts after the last step.
    pub prompts: PromptParams<T>,
    /// Prompts at the best evaluation, when any evaluation ran.
    pub best_prompts: Option<PromptParams<T>>,
    pub history: RunHistory,
    /// Mean batch loss of every step.
    pub step_losses: Vec<f64>,
    /// The backbone with its updated head, when the head was trainable.
    pub model: Option<BackboneModel<T>>,
    pub best_model: Option<BackboneModel<T>>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Best prompts, falling back to the final ones.
    pub fn selected(&self) -> &PromptParams<T> {
        self.best_prompts.as_ref().unwrap_or(&self.prompts)
    }
}

/// Sequence length used for every input: the backbone's `max_len`.
pub fn input_len<T: Scalar>(model: &BackboneModel<T>) -> usize {
    model.config().max_len
}

fn prompt_logits<T: Scalar>(
    g: &mut Graph<T>,
    model: &BackboneModel<T>,
    bound: &crate::backbone::BoundBackbone,
    prepended: Option<Var>,
    added: Option<Var>,
    tokens: &[usize],
) -> Result<Var> {
    let l = input_len(model);
    let (e, mask) = model.embed_var(g, bound, tokens, l)?;
    let (x, mask, m) = assemble_var(g, prepended, added, e, &mask)?;
    model.forward_var(g, bound, x, &mask, m)
}

/// Predictions of `model` with `prompts` on every example.
pub fn predict_all<T: Scalar>(model: &BackboneModel<T>, prompts: &PromptParams<T>, ds: &Dataset) -> Result<Vec<f64>> {
    prompts.check_fits(model.config().d, input_len(model))?;
    let regression = ds.is_regression();
    let prepended = prompts.scpp.as_ref().map(PromptComponent::compose).transpose()?;
    let added = prompts.scap.as_ref().map(PromptComponent::compose).transpose()?;
    let mut out = Vec::with_capacity(ds.len());
    for ex in &ds.examples {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, BindMode::Frozen);
        let p = prepended.as_ref().map(|p| g.constant(p.to_tensor()));
        let q = added.as_ref().map(|q| g.constant(q.to_tensor()));
        let logits = prompt_logits(&mut g, model, &bound, p, q, &ex.tokens)?;
        out.push(predict(g.value(logits).data(), regression));
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    model: &BackboneModel<T>,
    prompts: &PromptParams<T>,
    ds: &Dataset,
    name: MetricName,
) -> Result<f64> {
    let preds = predict_all(model, prompts, ds)?;
    metric(name, &preds, &ds.labels())
}

/// Like [`evaluate`], scoring an undefined correlation (constant
/// predictions) as 0.
fn evaluate_for_selection<T: Scalar>(
    model: &BackboneModel<T>,
    prompts: &PromptParams<T>,
    ds: &Dataset,
    name: MetricName,
) -> Result<f64> {
    match evaluate(model, prompts, ds, name) {
        Err(Error::Metric(_)) if name == MetricName::Pearson => Ok(0.0),
        other => other,
    }
}

/// Trains the prompt parameters only. The backbone must be frozen; its head
/// is updated only when the backbone was frozen with a trainable head.
pub fn train<T: Scalar>(
    config: &RunConfig,
    model: &BackboneModel<T>,
    prompts: PromptParams<T>,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if !model.is_frozen() {
        return Err(Error::Contract("prompt adaptation needs a frozen backbone".into()));
    }
    let l = input_len(model);
    prompts.check_fits(model.config().d, l)?;
    let mut prompts = prompts;
    let mut history = RunHistory::default();
    if config.steps == 0 {
        return Ok(TrainOutcome {
            prompts,
            best_prompts: None,
            history,
            step_losses: Vec::new(),
            model: None,
            best_model: None,
        });
    }
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Config("training and evaluation sets must be non-empty".into()));
    }

    let opt = AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() };
    let mut head_model = model.head_trainable().then(|| model.clone());
    let metric_name = config.metric_for(eval_set);
    let regression = train_set.is_regression();
    let mut states: Vec<(Role, Slot, AdamWState<T>)> = Vec::new();
    for role in [Role::Prepended, Role::Added] {
        if let Some(c) = prompts.component(role) {
            for slot in [Slot::Codebook, Slot::Weights, Slot::Plain] {
                let trainable = match (c, slot) {
                    (PromptComponent::Factorized { train_weights, .. }, Slot::Weights) => *train_weights,
                    _ => c.slot_data(slot).is_some(),
                };
                if trainable {
                    let len = c.slot_data(slot).map_or(0, <[T]>::len);
                    states.push((role, slot, AdamWState::new(len)));
                }
            }
        }
    }
    let mut head_states: Vec<(usize, AdamWState<T>)> = match &head_model {
        Some(m) => m
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("head."))
            .map(|(i, _)| (i, AdamWState::new(m.tensors()[i].numel())))
            .collect(),
        None => Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut interval_loss = 0.0;
    let mut interval_steps = 0usize;
    let mut best_prompts = None;
    let mut best_model = None;
    let mut step_losses = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let fail = |e: Error| match e {
            e @ Error::Training { .. } => e,
            other => Error::Training { step, reason: other.to_string() },
        };
        let active = head_model.as_ref().unwrap_or(model);
        let mut g = Graph::new();
        let bound = active.bind_for_adaptation(&mut g);
        let bp = prompts.bind(&mut g).map_err(fail)?;
        let mut total: Option<Var> = None;
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &train_set.examples[order[cursor]];
            cursor += 1;
            let logits = prompt_logits(&mut g, active, &bound, bp.prepended, bp.added, &ex.tokens).map_err(fail)?;
            let loss = example_loss(&mut g, logits, ex.label, regression).map_err(fail)?;
            total = Some(match total {
                Some(t) => g.add(t, loss).map_err(fail)?,
                None => loss,
            });
        }
        let loss = g.scale(total.expect("batch_size >= 1"), 1.0 / config.batch_size as f64).map_err(fail)?;
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Training { step, reason: "loss is not finite".into() });
        }
        step_losses.push(loss_value);
        let mut grads = g.backward(loss).map_err(fail)?;

        for (role, slot, state) in &mut states {
            let var = bp
                .leaves
                .iter()
                .find(|(r, s, _)| r == role && s == slot)
                .map(|(_, _, v)| *v)
                .expect("every optimizer slot is bound");
            let Some(grad) = grads.take(var) else { continue };
            let lr = warmup_lr(config.lr_for(*role, *slot), step, config.warmup_steps);
            let comp = prompts.component_mut(*role).expect("bound component exists");
            let mut data = comp.slot_data(*slot).expect("slot exists").to_vec();
            state.step(&opt, lr, &mut data, grad.data());
            comp.set_slot(*slot, data)
                .map_err(|e| Error::Training { step, reason: format!("{} {slot:?}: {e}", role.prefix()) })?;
        }
        if let Some(hm) = head_model.as_mut() {
            let lr = warmup_lr(config.lr_head.unwrap_or(config.lr_scpp), step, config.warmup_steps);
            for (i, state) in &mut head_states {
                let var = bound.vars()[*i];
                let Some(grad) = grads.take(var) else { continue };
                let t = hm.tensor_data_mut(*i)?;
                let shape = t.shape().to_vec();
                let mut data = std::mem::take(t).into_data();
                state.step(&opt, lr, &mut data, grad.data());
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Training { step, reason: "classifier head diverged".into() });
                }
                *t = crate::tensor::Tensor::new(&shape, data)?;
            }
        }

        interval_loss += loss_value;
        interval_steps += 1;
        if step % config.eval_interval == 0 {
            let active = head_model.as_ref().unwrap_or(model);
            let eval_metric = evaluate_for_selection(active, &prompts, eval_set, metric_name).map_err(fail)?;
            let improved =
                history.push(EvalRecord { step, train_loss: interval_loss / interval_steps as f64, eval_metric });
            if improved {
                best_prompts = Some(prompts.clone());
                best_model = head_model.clone();
            }
            interval_loss = 0.0;
            interval_steps = 0;
        }
    }

    Ok(TrainOutcome { prompts, best_prompts, history, step_losses, model: head_model, best_model })
}

/// Compares the backward pass against central differences for the loss of
/// one example with respect to every prompt tensor (codebooks and weights,
/// frozen or not, or the plain prompt), in role then slot order.
pub fn prompt_grad_check(
    model: &BackboneModel<f64>,
    prompts: &PromptParams<f64>,
    example: &Example,
    regression: bool,
    step: f64,
) -> Result<GradCheckReport> {
    prompts.check_fits(model.config().d, input_len(model))?;
    let mut points = Vec::new();
    let mut factorized = [false; 2];
    for (i, role) in [Role::Prepended, Role::Added].into_iter().enumerate() {
        match prompts.component(role) {
            Some(PromptComponent::Factorized { codebook, weights, .. }) => {
                factorized[i] = true;
                points.push(codebook.to_tensor());
                points.push(weights.to_tensor());
            }
            Some(PromptComponent::Plain(p)) => points.push(p.to_tensor()),
            None => {}
        }
    }
    if points.is_empty() {
        return Err(Error::Contract("no prompt tensors to check".into()));
    }
    let present = [prompts.scpp.is_some(), prompts.scap.is_some()];
    grad_check_many(
        |g, vars| {
            let mut next = vars.iter().copied();
            let mut composed = [None, None];
            for i in 0..2 {
                if !present[i] {
                    continue;
                }
                let first = next.next().expect("one var per point");
                composed[i] = Some(if factorized[i] {
                    let w = next.next().expect("one var per point");
                    g.compose(first, w)?
                } else {
                    first
                });
            }
            let bound = model.bind(g, BindMode::Frozen);
            let logits = prompt_logits(g, model, &bound, composed[0], composed[1], &example.tokens)?;
            example_loss(g, logits, example.label, regression)
        },
        &points,
        step,
    )
}

/// Learning-rate grids for the two components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrGrid {
    pub scpp: Vec<f64>,
    pub scap: Vec<f64>,
}

impl Default for LrGrid {
    fn default() -> Self {
        Self { scpp: SCPP_LR_GRID.to_vec(), scap: SCAP_LR_GRID.to_vec() }
    }
}

impl LrGrid {
    /// The default grid with the larger added-component rates appended.
    pub fn extended() -> Self {
        let mut grid = Self::default();
        grid.scap.extend_from_slice(&SCAP_LR_GRID_EXTENDED);
        grid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr_scpp: f64,
    pub lr_scap: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub lr_scpp: f64,
    pub lr_scap: f64,
    /// One row per trained combination, in grid order (prepended rate outer).
    pub table: Vec<GridCell>,
}

/// Trains every learning-rate pair and keeps the best by evaluation metric,
/// first in grid order on ties. Single-entry grids return without training.
pub fn lr_grid_search<T: Scalar>(
    grid: &LrGrid,
    config: &RunConfig,
    model: &BackboneModel<T>,
    prompts: &PromptParams<T>,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<GridResult> {
    if grid.scpp.is_empty() || grid.scap.is_empty() {
        return Err(Error::Config("learning-rate grids must be non-empty".into()));
    }
    if grid.scpp.len() == 1 && grid.scap.len() == 1 {
        return Ok(GridResult { lr_scpp: grid.scpp[0], lr_scap: grid.scap[0], table: Vec::new() });
    }
    // a component that is absent does not need its rate searched
    let scpp: &[f64] = if prompts.scpp.is_some() { &grid.scpp } else { &grid.scpp[..1] };
    let scap: &[f64] = if prompts.scap.is_some() { &grid.scap } else { &grid.scap[..1] };
    let mut table = Vec::new();
    let mut best: Option<GridCell> = None;
    for &lr_scpp in scpp {
        for &lr_scap in scap {
            let cfg = RunConfig { lr_scpp, lr_scap, ..config.clone() };
            let outcome = train(&cfg, model, prompts.clone(), train_set, eval_set)?;
            let metric = outcome.history.best.map_or(f64::NEG_INFINITY, |b| b.metric);
            let cell = GridCell { lr_scpp, lr_scap, metric };
            if best.is_none_or(|b| cell.metric > b.metric) {
                best = Some(cell);
            }
            table.push(cell);
        }
    }
    let best = best.expect("non-empty grid");
    Ok(GridResult { lr_scpp: best.lr_scpp, lr_scap: best.lr_scap, table })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    IntermediateTask,
    TargetTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitStrategy {
    pub kind: InitKind,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub scale: Option<ScaleSpec>,
}

impl InitStrategy {
    pub fn random() -> Self {
        Self { kind: InitKind::Random, checkpoint: None, scale: None }
    }

    pub fn from_checkpoint(kind: InitKind, path: impl Into<PathBuf>) -> Self {
        Self { kind, checkpoint: Some(path.into()), scale: None }
    }
}

/// Shapes of the components to initialize. `None` leaves a component out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub scpp: Option<PromptDims>,
    pub scap: Option<PromptDims>,
}

impl PromptLayout {
    pub fn dims(&self, role: Role) -> Option<PromptDims> {
        match role {
            Role::Prepended => self.scpp,
            Role::Added => self.scap,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.scpp.map_or(0, |d| d.param_count()) + self.scap.map_or(0, |d| d.param_count())
    }
}

const ADDED_SEED_SALT: u64 = 0xadd0_add0;

/// Initializes prompt parameters. Random init draws both components from
/// `seed`; the other kinds load a checkpoint whose shapes must match `layout`.
pub fn apply_init<T: Scalar>(strategy: &InitStrategy, layout: &PromptLayout, seed: u64) -> Result<PromptParams<T>> {
    match strategy.kind {
        InitKind::Random => {
            let scale = strategy.scale.unwrap_or_default();
            let make = |dims: Option<PromptDims>, s: u64| -> Result<Option<PromptComponent<T>>> {
                dims.map(|d| {
                    let (c, w) = init_random(&d, s, &scale)?;
                    PromptComponent::factorized(c, w)
                })
                .transpose()
            };
            Ok(PromptParams { scpp: make(layout.scpp, seed)?, scap: make(layout.scap, seed ^ ADDED_SEED_SALT)? })
        }
        InitKind::IntermediateTask | InitKind::TargetTask => {
            let path = strategy
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Init(format!("{:?} initialization needs a checkpoint", strategy.kind)))?;
            let (loaded, _) = load_checkpoint(path).map_err(|e| Error::Init(format!("{}: {e}", path.display())))?;
            let mut out = PromptParams { scpp: None, scap: None };
            for role in [Role::Prepended, Role::Added] {
                let Some(want) = layout.dims(role) else { continue };
                let comp = loaded
                    .component(role)
                    .ok_or_else(|| Error::Init(format!("checkpoint has no {} prompt", role.prefix())))?;
                let have = comp.dims();
                if have != Some(want) {
                    return Err(Error::Init(format!(
                        "{} checkpoint dims {have:?} do not match configured {want:?}",
                        role.prefix()
                    )));
                }
                *match role {
                    Role::Prepended => &mut out.scpp,
                    Role::Added => &mut out.scap,
                } = Some(comp.cast());
            }
            Ok(out)
        }
    }
}

/// Trains the prepended and added components separately on one task and
/// writes their best states to `out_dir`, ready for checkpoint initialization.
pub fn pretrain_components<T: Scalar>(
    config: &RunConfig,
    model: &BackboneModel<T>,
    layout: &PromptLayout,
    train_set: &Dataset,
    eval_set: &Dataset,
    out_dir: &Path,
) -> Result<PromptParams<T>> {
    let mut combined = PromptParams { scpp: None, scap: None };
    for role in [Role::Prepended, Role::Added] {
        let Some(dims) = layout.dims(role) else { continue };
        let single = match role {
            Role::Prepended => PromptLayout { scpp: Some(dims), scap: None },
            Role::Added => PromptLayout { scpp: None, scap: Some(dims) },
        };
        let init = apply_init::<T>(&InitStrategy::random(), &single, config.seed)?;
        let outcome = train(config, model, init, train_set, eval_set)?;
        let trained = outcome.selected().component(role).cloned();
        match role {
            Role::Prepended => combined.scpp = trained,
            Role::Added => combined.scap = trained,
        }
    }
    save_checkpoint(out_dir, &combined, None)?;
    Ok(combined)
}

fn fragment_name(role: Role, slot: Slot) -> String {
    let slot = match slot {
        Slot::Codebook => "codebook",
        Slot::Weights => "weights",
        Slot::Plain => "plain",
    };
    format!("{}_{slot}", role.prefix())
}

/// Writes prompts (as `f32`) and optionally the run history to `dir`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, prompts: &PromptParams<T>, history: Option<&RunHistory>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for role in [Role::Prepended, Role::Added] {
        for slot in [Slot::Codebook, Slot::Weights, Slot::Plain] {
            let name = fragment_name(role, slot);
            for ext in ["json", "bin"] {
                let stale = dir.join(format!("{name}.{ext}"));
                if stale.exists() {
                    fs::remove_file(stale)?;
                }
            }
        }
        let Some(comp) = prompts.component(role) else { continue };
        match comp {
            PromptComponent::Factorized { codebook, weights, .. } => {
                let (k, t, r, p) = (codebook.k(), codebook.t(), codebook.r(), weights.positions());
                let to32 = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
                write_fragment(
                    dir,
                    &fragment_name(role, Slot::Codebook),
                    &Manifest::codebook(k, t, r, p),
                    &to32(codebook.entries()),
                )?;
                write_fragment(
                    dir,
                    &fragment_name(role, Slot::Weights),
                    &Manifest::weights(k, t, r, p),
                    &to32(weights.entries()),
                )?;
            }
            PromptComponent::Plain(p) => {
                let data: Vec<f32> = p.values().iter().map(|x| x.as_f64() as f32).collect();
                write_fragment(
                    dir,
                    &fragment_name(role, Slot::Plain),
                    &Manifest::tensor(&[p.positions(), p.d()]),
                    &data,
                )?;
            }
        }
    }
    let history_path = dir.join("history.json");
    match history {
        Some(h) => fs::write(history_path, serde_json::to_string_pretty(h)? + "\n")?,
        None if history_path.exists() => fs::remove_file(history_path)?,
        None => {}
    }
    Ok(())
}

fn expect_kind(m: &Manifest, kind: FragmentKind, name: &str) -> Result<()> {
    if m.kind != kind {
        return Err(Error::Format(format!("{name}: expected {kind:?} fragment, found {:?}", m.kind)));
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(PromptParams<f32>, Option<RunHistory>)> {
    let mut out = PromptParams { scpp: None, scap: None };
    for role in [Role::Prepended, Role::Added] {
        let cb_name = fragment_name(role, Slot::Codebook);
        let plain_name = fragment_name(role, Slot::Plain);
        let comp = if fragment_exists(dir, &cb_name) {
            let (cm, cdata) = read_fragment(dir, &cb_name)?;
            expect_kind(&cm, FragmentKind::Codebook, &cb_name)?;
            let w_name = fragment_name(role, Slot::Weights);
            let (wm, wdata) = read_fragment(dir, &w_name)?;
            expect_kind(&wm, FragmentKind::Weights, &w_name)?;
            if (cm.k, cm.t, cm.r, cm.positions) != (wm.k, wm.t, wm.r, wm.positions) {
                return Err(Error::Format(format!("{cb_name} and {w_name} manifests disagree")));
            }
            let cs = cm.shape()?;
            let ws = wm.shape()?;
            let codebook = Codebook::new(cs[0], cs[1], cs[2], cdata)?;
            let weights = WeightSet::new(ws[0], ws[1], ws[2], wdata)?;
            Some(PromptComponent::factorized(codebook, weights)?)
        } else if fragment_exists(dir, &plain_name) {
            let (m, data) = read_fragment(dir, &plain_name)?;
            expect_kind(&m, FragmentKind::Tensor, &plain_name)?;
            match m.shape()?.as_slice() {
                &[p, d] => Some(PromptComponent::Plain(ComposedPrompt::new(p, d, data)?)),
                s => return Err(Error::Format(format!("{plain_name}: expected 2-d shape, got {s:?}"))),
            }
        } else {
            None
        };
        match role {
            Role::Prepended => out.scpp = comp,
            Role::Added => out.scap = comp,
        }
    }
    if out.scpp.is_none() && out.scap.is_none() {
        return Err(Error::Format(format!("{} holds no prompt fragments", dir.display())));
    }
    let history_path = dir.join("history.json");
    let history = if history_path.exists() {
        let text = fs::read_to_string(history_path)?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Format(format!("history.json: {e}")))?)
    } else {
        None
    };
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> PromptLayout {
        PromptLayout {
            scpp: Some(PromptDims { positions: 4, d: 16, k: 4, r: 3 }),
            scap: Some(PromptDims { positions: 8, d: 16, k: 2, r: 2 }),
        }
    }

    #[test]
    fn history_best_is_first_maximum() {
        let mut h = RunHistory::default();
        for (step, m) in [(1, 0.5), (2, 0.8), (3, 0.8), (4, 0.7)] {
            h.push(EvalRecord { step, train_loss: 1.0, eval_metric: m });
        }
        let best = h.best.clone().unwrap();
        assert_eq!((best.step, best.metric), (2, 0.8));
        assert_eq!(h.to_csv().lines().next(), Some("step,train_loss,eval_metric"));
    }

    #[test]
    fn config_invariants() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.eval_interval = 5000;
        assert!(c.validate().is_err());
        let c = RunConfig { warmup_steps: 3000, ..RunConfig::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { batch_size: 0, ..RunConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn per_tensor_overrides() {
        let mut c = RunConfig::default();
        c.lr_overrides.scap_weights = Some(0.7);
        assert_eq!(c.lr_for(Role::Added, Slot::Weights), 0.7);
        assert_eq!(c.lr_for(Role::Added, Slot::Codebook), c.lr_scap);
        assert_eq!(c.lr_for(Role::Prepended, Slot::Weights), c.lr_scpp);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 7).unwrap();
        let history = RunHistory {
            records: vec![EvalRecord { step: 10, train_loss: 0.25, eval_metric: 0.75 }],
            best: Some(BestRecord { step: 10, metric: 0.75, checkpoint: "step-10".into() }),
        };
        save_checkpoint(dir.path(), &prompts, Some(&history)).unwrap();
        let (back, h) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, prompts);
        assert_eq!(h.unwrap(), history);
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 7).unwrap();
        save_checkpoint(dir.path(), &prompts, None).unwrap();
        let bin = dir.path().join("scap_weights.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_init_guards_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let prompts = apply_init::<f32>(&InitStrategy::random(), &layout(), 7).unwrap();
        save_checkpoint(dir.path(), &prompts, None).unwrap();
        let strategy = InitStrategy::from_checkpoint(InitKind::TargetTask, dir.path());
        let loaded = apply_init::<f32>(&strategy, &layout(), 0).unwrap();
        assert_eq!(loaded, prompts);

        let mut other = layout();
        other.scpp.as_mut().unwrap().r = 4;
        assert!(matches!(apply_init::<f32>(&strategy, &other, 0), Err(Error::Init(_))));
        let missing = InitStrategy { kind: InitKind::IntermediateTask, checkpoint: None, scale: None };
        assert!(matches!(apply_init::<f32>(&missing, &layout(), 0), Err(Error::Init(_))));
    }

    #[test]
    fn random_init_is_seeded() {
        let a = apply_init::<f32>(&InitStrategy::random(), &layout(), 3).unwrap();
        let b = apply_init::<f32>(&InitStrategy::random(), &layout(), 3).unwrap();
        let c = apply_init::<f32>(&InitStrategy::random(), &layout(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

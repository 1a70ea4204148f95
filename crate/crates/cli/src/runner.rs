//! Executes one experiment config and lays out its run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use accept_core::backbone::{pretrain_backbone, BackboneModel};
use accept_core::checkpoint::{fragment_exists, read_fragment, write_fragment, Manifest};
use accept_core::factorization::{init_random, param_count, ComposedPrompt, PromptDims, ScaleSpec};
use accept_core::prompt::{PromptComponent, PromptParams, Role};
use accept_core::taskbench::{gen_task, load_jsonl, Dataset, DatasetSchema, MetricName};
use accept_core::tensor::{DType, Scalar, Tensor};
use accept_core::trainer::{
    apply_init, evaluate, load_checkpoint, lr_grid_search, save_checkpoint, train, GridCell, InitKind, InitStrategy,
    PromptLayout, RunConfig, RunHistory,
};
use accept_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::spec::{hex_digest, run_id, BackboneSpec, ExperimentSpec, Resolved, ResolvedLayout, TaskSpec};

pub const RUNS_DIR_ENV: &str = "ACCEPT_RUNS_DIR";

/// Output root: `$ACCEPT_RUNS_DIR`, or `runs` in the working directory.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Loads the configured backbone, pretraining it (once per config and seed)
/// when the spec asks for that.
pub fn load_backbone(spec: &BackboneSpec, root: &Path) -> CliResult<BackboneModel<f32>> {
    let mut model = match (&spec.checkpoint, &spec.pretrain) {
        (Some(dir), None) => BackboneModel::<f32>::load(dir)
            .map_err(|e| CliError::runtime(format!("backbone {}: {e}", dir.display())))?,
        (None, Some(cfg)) => {
            let key = serde_json::to_string(&(cfg, spec.seed)).expect("pretrain config serializes");
            let dir = root.join("backbones").join(&hex_digest(key.as_bytes())[..16]);
            if dir.join("arch.json").exists() {
                BackboneModel::<f32>::load(&dir)?
            } else {
                let (model, report) = pretrain_backbone(cfg, spec.seed)?;
                // write to a scratch directory first so concurrent runs never
                // see a half-written backbone
                let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
                model.save(&tmp)?;
                fs::write(tmp.join("pretrain.json"), serde_json::to_string_pretty(&report).expect("report") + "\n")?;
                if fs::rename(&tmp, &dir).is_err() {
                    fs::remove_dir_all(&tmp)?;
                }
                model
            }
        }
        _ => return Err(CliError::usage("backbone needs exactly one of \"checkpoint\" or \"pretrain\"")),
    };
    model.freeze(spec.train_head);
    Ok(model)
}

pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

pub fn load_data(task: &TaskSpec, vocab_size: usize) -> CliResult<Splits> {
    match (task.kind, &task.train_path) {
        (Some(kind), None) => {
            if task.train == 0 || task.dev == 0 || task.test == 0 {
                return Err(CliError::usage("generated tasks need positive train, dev and test sizes"));
            }
            let mut all = gen_task(kind, vocab_size, task.seq_len, task.train + task.dev + task.test, task.seed)?;
            let test = all.split_off(task.test, "test");
            let dev = all.split_off(task.dev, "dev");
            Ok(Splits { train: all, dev, test })
        }
        (None, Some(train_path)) => {
            let (Some(dev_path), Some(test_path), Some(num_classes)) =
                (&task.dev_path, &task.test_path, task.num_classes)
            else {
                return Err(CliError::usage("JSONL tasks need train_path, dev_path, test_path and num_classes"));
            };
            let schema = DatasetSchema { vocab_size, num_classes };
            Ok(Splits {
                train: load_jsonl(train_path, &schema)?.with_split("train"),
                dev: load_jsonl(dev_path, &schema)?.with_split("dev"),
                test: load_jsonl(test_path, &schema)?.with_split("test"),
            })
        }
        _ => Err(CliError::usage("task needs either \"kind\" or \"train_path\", not both")),
    }
}

pub struct Prepared {
    pub model: BackboneModel<f32>,
    pub splits: Splits,
}

impl Prepared {
    pub fn d(&self) -> usize {
        self.model.config().d
    }

    pub fn l(&self) -> usize {
        self.model.config().max_len
    }
}

pub fn prepare(spec: &ExperimentSpec, root: &Path) -> CliResult<Prepared> {
    let model = load_backbone(&spec.backbone, root)?;
    let splits = load_data(&spec.task, model.config().vocab_size)?;
    Ok(Prepared { model, splits })
}

pub fn metric_name(spec: &ExperimentSpec, ds: &Dataset) -> MetricName {
    spec.task.metric.or(spec.run.metric).unwrap_or(if ds.is_regression() {
        MetricName::Pearson
    } else {
        MetricName::Accuracy
    })
}

const PLAIN_SEED_SALT: [u64; 2] = [0x91a1_0001, 0x91a1_0002];

/// Initial prompts for a resolved layout.
pub fn init_prompts<T: Scalar>(init: &InitStrategy, layout: &ResolvedLayout, seed: u64) -> CliResult<PromptParams<T>> {
    let roles = [(Role::Prepended, layout.scpp), (Role::Added, layout.scap)];
    let mut out = match init.kind {
        InitKind::Random => {
            let factorized = |c: Option<Resolved>| match c {
                Some(Resolved::Factorized { dims, .. }) => Some(dims),
                _ => None,
            };
            let f_layout = PromptLayout { scpp: factorized(layout.scpp), scap: factorized(layout.scap) };
            let mut params: PromptParams<T> = if f_layout.scpp.is_some() || f_layout.scap.is_some() {
                apply_init(init, &f_layout, seed)?
            } else {
                PromptParams { scpp: None, scap: None }
            };
            let scale = init.scale.unwrap_or_default();
            for (i, (role, c)) in roles.iter().enumerate() {
                if let Some(Resolved::Plain { positions, d }) = *c {
                    *slot(&mut params, *role) = Some(plain_init(positions, d, seed ^ PLAIN_SEED_SALT[i], &scale)?);
                }
            }
            params
        }
        InitKind::IntermediateTask | InitKind::TargetTask => {
            let path = init
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::usage("checkpoint initialization needs \"init.checkpoint\""))?;
            let (loaded, _) = load_checkpoint(path).map_err(|e| Error::Init(format!("{}: {e}", path.display())))?;
            let mut params = PromptParams { scpp: None, scap: None };
            for (role, c) in roles {
                let Some(want) = c else { continue };
                let have = loaded
                    .component(role)
                    .ok_or_else(|| Error::Init(format!("checkpoint has no {} prompt", role.prefix())))?;
                let matches = match (want, have) {
                    (Resolved::Plain { positions, d }, PromptComponent::Plain(p)) => {
                        p.positions() == positions && p.d() == d
                    }
                    (Resolved::Factorized { dims, .. }, _) => have.dims() == Some(dims),
                    _ => false,
                };
                if !matches {
                    return Err(Error::Init(format!(
                        "{} checkpoint does not match the configured {want:?}",
                        role.prefix()
                    ))
                    .into());
                }
                *slot(&mut params, role) = Some(have.cast());
            }
            params
        }
    };
    for (role, c) in roles {
        if let (
            Some(Resolved::Factorized { train_weights, .. }),
            Some(PromptComponent::Factorized { train_weights: tw, .. }),
        ) = (c, slot(&mut out, role).as_mut())
        {
            *tw = train_weights;
        }
    }
    Ok(out)
}

fn slot<T>(p: &mut PromptParams<T>, role: Role) -> &mut Option<PromptComponent<T>> {
    match role {
        Role::Prepended => &mut p.scpp,
        Role::Added => &mut p.scap,
    }
}

fn plain_init<T: Scalar>(positions: usize, d: usize, seed: u64, scale: &ScaleSpec) -> CliResult<PromptComponent<T>> {
    let dims = PromptDims { positions, d, k: 1, r: positions };
    let (codebook, _) = init_random::<T>(&dims, seed, scale)?;
    Ok(PromptComponent::Plain(ComposedPrompt::new(positions, d, codebook.entries().to_vec())?))
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub history: RunHistory,
    pub best: PromptParams<f32>,
    /// Classifier head tensors at the best evaluation, when the head trained.
    pub head: Vec<(String, Tensor<f32>)>,
    pub metric: MetricName,
    pub dev_metric: Option<f64>,
    pub test_metric: f64,
    pub lr_scpp: f64,
    pub lr_scap: f64,
    pub grid: Vec<GridCell>,
    pub wall_seconds: f64,
}

/// apply_init → (optional lr grid) → train → evaluate on the test split.
pub fn execute(
    spec: &ExperimentSpec,
    model: &BackboneModel<f32>,
    splits: &Splits,
    layout: &ResolvedLayout,
) -> CliResult<RunResult> {
    match spec.run.dtype {
        DType::F32 => execute_as::<f32>(spec, model, splits, layout),
        DType::F64 => execute_as::<f64>(spec, model, splits, layout),
    }
}

fn execute_as<T: Scalar>(
    spec: &ExperimentSpec,
    model: &BackboneModel<f32>,
    splits: &Splits,
    layout: &ResolvedLayout,
) -> CliResult<RunResult> {
    let start = Instant::now();
    let model = model.cast::<T>();
    let metric = metric_name(spec, &splits.dev);
    let mut cfg = RunConfig { metric: Some(metric), ..spec.run.clone() };
    let prompts = init_prompts::<T>(&spec.init, layout, cfg.seed)?;

    let mut grid_table = Vec::new();
    if let Some(grid) = &spec.lr_grid {
        let steps = grid.steps.unwrap_or((cfg.steps / 4).max(1));
        let grid_cfg = RunConfig {
            steps,
            eval_interval: cfg.eval_interval.min(steps),
            warmup_steps: cfg.warmup_steps.min(steps),
            ..cfg.clone()
        };
        let result = lr_grid_search(&grid.grid(), &grid_cfg, &model, &prompts, &splits.train, &splits.dev)?;
        cfg.lr_scpp = result.lr_scpp;
        cfg.lr_scap = result.lr_scap;
        grid_table = result.table;
    }

    let outcome = train(&cfg, &model, prompts, &splits.train, &splits.dev)?;
    let eval_model = outcome.best_model.as_ref().or(outcome.model.as_ref()).unwrap_or(&model);
    let selected = outcome.selected();
    let test_metric = evaluate(eval_model, selected, &splits.test, metric)?;
    let head = if model.head_trainable() {
        eval_model
            .names()
            .iter()
            .zip(eval_model.tensors())
            .filter(|(n, _)| n.starts_with("head."))
            .map(|(n, t)| (n.clone(), t.cast::<f32>()))
            .collect()
    } else {
        Vec::new()
    };
    Ok(RunResult {
        dev_metric: outcome.history.best.as_ref().map(|b| b.metric),
        history: outcome.history.clone(),
        best: selected.cast(),
        head,
        metric,
        test_metric,
        lr_scpp: cfg.lr_scpp,
        lr_scap: cfg.lr_scap,
        grid: grid_table,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trainable prompt parameters, recomputed from checkpoint manifests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub scpp_codebook: u64,
    pub scpp_weights: u64,
    pub scap_codebook: u64,
    pub scap_weights: u64,
    pub total: u64,
}

pub fn counts_from_manifests(dir: &Path) -> CliResult<ParamCounts> {
    let mut counts = ParamCounts::default();
    for role in [Role::Prepended, Role::Added] {
        let p = role.prefix();
        let (codebook, weights) = if fragment_exists(dir, &format!("{p}_codebook")) {
            let (m, _) = read_fragment(dir, &format!("{p}_codebook"))?;
            let (k, t, r, positions) = match (m.k, m.t, m.r, m.positions) {
                (Some(k), Some(t), Some(r), Some(pos)) => (k as u64, t as u64, r as u64, pos as u64),
                _ => return Err(CliError::runtime(format!("{p}_codebook manifest is incomplete"))),
            };
            let d = k * t;
            let full = param_count(r, d, positions, k);
            (r * d, full - r * d)
        } else if fragment_exists(dir, &format!("{p}_plain")) {
            let (m, _) = read_fragment(dir, &format!("{p}_plain"))?;
            (m.numel()? as u64, 0)
        } else {
            (0, 0)
        };
        match role {
            Role::Prepended => (counts.scpp_codebook, counts.scpp_weights) = (codebook, weights),
            Role::Added => (counts.scap_codebook, counts.scap_weights) = (codebook, weights),
        }
    }
    counts.total = counts.scpp_codebook + counts.scpp_weights + counts.scap_codebook + counts.scap_weights;
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    pub config_hash: String,
    pub name: String,
    pub metric: MetricName,
    pub dev_metric: Option<f64>,
    pub test_metric: f64,
    pub lr_scpp: f64,
    pub lr_scap: f64,
    pub params: ParamCounts,
    pub best_step: Option<usize>,
    pub wall_seconds: f64,
    pub finished_at: u64,
}

/// `runs/<id>/` for a config.
pub fn run_dir(root: &Path, spec: &ExperimentSpec) -> PathBuf {
    root.join(run_id(&spec.canonical_json()))
}

pub fn csv_float(v: f64) -> String {
    format!("{v}")
}

/// Writes config.json, history.csv, best/ and summary.json.
pub fn write_run(dir: &Path, spec: &ExperimentSpec, result: &RunResult) -> CliResult<Summary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(spec).expect("config") + "\n")?;
    fs::write(dir.join("history.csv"), result.history.to_csv())?;
    let best = dir.join("best");
    save_checkpoint(&best, &result.best, Some(&result.history))?;
    for (name, t) in &result.head {
        write_fragment(&best, name, &Manifest::tensor(t.shape()), t.data())?;
    }
    if !result.grid.is_empty() {
        let mut csv = String::from("lr_scpp,lr_scap,metric\n");
        for c in &result.grid {
            csv.push_str(&format!("{},{},{}\n", c.lr_scpp, c.lr_scap, csv_float(c.metric)));
        }
        fs::write(dir.join("lr_grid.csv"), csv)?;
    }
    let summary = Summary {
        run_id: run_id(&spec.canonical_json()),
        config_hash: spec.config_hash(),
        name: spec.name.clone(),
        metric: result.metric,
        dev_metric: result.dev_metric,
        test_metric: result.test_metric,
        lr_scpp: result.lr_scpp,
        lr_scap: result.lr_scap,
        params: counts_from_manifests(&best)?,
        best_step: result.history.best.as_ref().map(|b| b.step),
        wall_seconds: result.wall_seconds,
        finished_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary") + "\n")?;
    Ok(summary)
}

/// Reloads a run's best prompts (and tuned head) and scores them on `split`.
pub fn evaluate_run(dir: &Path, split: &str, root: &Path) -> CliResult<(MetricName, f64)> {
    let spec = ExperimentSpec::load(&dir.join("config.json"))?;
    let mut prepared = prepare(&spec, root)?;
    let best = dir.join("best");
    let (prompts, _) = load_checkpoint(&best)?;
    if prepared.model.head_trainable() {
        for name in ["head.w", "head.b"] {
            let (m, data) = read_fragment(&best, name)?;
            prepared.model.replace_head_tensor(name, Tensor::new(&m.shape()?, data)?)?;
        }
    }
    let ds = match split {
        "train" => &prepared.splits.train,
        "dev" => &prepared.splits.dev,
        "test" => &prepared.splits.test,
        other => return Err(CliError::usage(format!("unknown split {other:?}; use train, dev or test"))),
    };
    let metric = metric_name(&spec, ds);
    Ok((metric, evaluate(&prepared.model, &prompts, ds, metric)?))
}

/// Runs `f(0..n)` on up to `jobs` threads; results come back in index order.
pub fn run_cells<R, F>(n: usize, jobs: usize, f: F) -> Vec<CliResult<R>>
where
    R: Send,
    F: Fn(usize) -> CliResult<R> + Sync,
{
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<R>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("workers finished").into_iter().map(|r| r.expect("every cell ran")).collect()
}

//! One function per CLI verb. Each returns the text it prints on stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use accept_core::backbone::{pretrain_backbone, PretrainConfig};
use accept_core::factorization::{codeword_capacity, param_count, solve_rank, validate_partition, BudgetSpec};
use accept_core::taskbench::{fewshot_report, fewshot_sample, FewShotSpec};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::runner::{
    counts_from_manifests, csv_float, evaluate_run, execute, prepare, run_cells, run_dir, write_run, Prepared, Splits,
    Summary,
};
use crate::spec::{hex_digest, ComponentSpec, ExperimentSpec, Resolved, ResolvedLayout, PREPENDED_SHARE};

/// `r`, its parameter count and the `r^K` capacity for one component.
pub fn budget(d: u64, positions: u64, k: u64, budget: u64) -> CliResult<String> {
    let spec = BudgetSpec::new(budget, d, positions, k)?;
    validate_partition(d as usize, k as usize)?;
    let r = solve_rank(&spec);
    let k32 = u32::try_from(k).map_err(|_| CliError::usage(format!("K={k} is too large")))?;
    Ok(format!("r={r}\nparams={}\ncapacity={}\n", param_count(r, d, positions, k), codeword_capacity(r, k32)))
}

fn describe(c: &Resolved) -> String {
    match c {
        Resolved::Plain { positions, d } => format!("plain positions={positions} d={d} params={}", c.params()),
        Resolved::Factorized { dims, .. } => format!(
            "positions={} t={} K={} r={} params={} capacity={}",
            dims.positions,
            dims.d / dims.k,
            dims.k,
            dims.r,
            c.params(),
            codeword_capacity(dims.r as u64, dims.k as u32)
        ),
    }
}

/// Per-component and total counts of a config's resolved layout.
pub fn budget_for_config(spec: &ExperimentSpec, allow_over_budget: bool) -> CliResult<String> {
    let cfg = spec.backbone.config()?;
    let layout = spec.resolve(cfg.d, cfg.max_len, allow_over_budget)?;
    let mut out = String::new();
    if let Some(c) = &layout.scpp {
        out.push_str(&format!("scpp {}\n", describe(c)));
    }
    if let Some(c) = &layout.scap {
        out.push_str(&format!("scap {}\n", describe(c)));
    }
    out.push_str(&format!("total={}\n", layout.total()));
    Ok(out)
}

pub fn pretrain(cfg: &PretrainConfig, seed: u64, out: &Path) -> CliResult<String> {
    let (model, report) = pretrain_backbone(cfg, seed)?;
    model.save(out)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(out.join("pretrain.json"), &text)?;
    Ok(text)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Runs one config and writes `runs/<id>/`.
pub fn train(spec: &ExperimentSpec, root: &Path, allow_over_budget: bool) -> CliResult<(PathBuf, Summary)> {
    // resolve before the (possibly slow) backbone load so config errors surface first
    if let Ok(cfg) = spec.backbone.config() {
        spec.resolve(cfg.d, cfg.max_len, allow_over_budget)?;
    }
    let prepared = prepare(spec, root)?;
    let layout = spec.resolve(prepared.d(), prepared.l(), allow_over_budget)?;
    let result = execute(spec, &prepared.model, &prepared.splits, &layout)?;
    let dir = run_dir(root, spec);
    let summary = write_run(&dir, spec, &result)?;
    Ok((dir, summary))
}

pub fn eval(run: &Path, split: &str, root: &Path) -> CliResult<String> {
    let (metric, value) = evaluate_run(run, split, root)?;
    Ok(format!("{}\n", json!({"split": split, "metric": metric.as_str(), "value": value})))
}

/// Directory for a multi-run command, keyed by everything that shapes its output.
fn sweep_dir(root: &Path, verb: &str, spec: &ExperimentSpec, args: &serde_json::Value) -> PathBuf {
    let key = format!("{verb}|{}|{args}", spec.canonical_json());
    root.join(format!("{verb}-{}", &hex_digest(key.as_bytes())[..12]))
}

fn write_sweep(dir: &Path, files: &[(&str, &str)], meta: serde_json::Value) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    for (name, body) in files {
        fs::write(dir.join(name), body)?;
    }
    let mut meta = meta;
    meta["finished_at"] = json!(unix_now());
    fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&meta).expect("meta") + "\n")?;
    Ok(())
}

/// A derived config trained as one cell of a sweep.
struct Cell {
    label: String,
    spec: ExperimentSpec,
    layout: ResolvedLayout,
}

fn run_sweep_cells(
    cells: &[Cell],
    prepared: &Prepared,
    splits: Option<&[Splits]>,
    dir: &Path,
    jobs: usize,
) -> CliResult<Vec<(Summary, f64)>> {
    let results = run_cells(cells.len(), jobs, |i| {
        let cell = &cells[i];
        let s = splits.map_or(&prepared.splits, |s| &s[i]);
        let result = execute(&cell.spec, &prepared.model, s, &cell.layout)?;
        let summary = write_run(&dir.join("cells").join(&cell.label), &cell.spec, &result)?;
        Ok((summary, result.wall_seconds))
    });
    results.into_iter().collect()
}

fn divisors(d: usize) -> Vec<usize> {
    (1..=d).filter(|t| d.is_multiple_of(*t)).collect()
}

pub struct GranularityArgs {
    pub component: String,
    pub budget: u64,
    pub d: Option<usize>,
    pub positions: Option<usize>,
    pub complement: Option<u64>,
    pub t: Vec<usize>,
    pub jobs: usize,
}

/// One row per subspace width `t`; trains each cell when a config is given.
pub fn sweep_granularity(args: &GranularityArgs, spec: Option<&ExperimentSpec>, root: &Path) -> CliResult<String> {
    let prepended = match args.component.as_str() {
        "scpp" => true,
        "scap" => false,
        other => return Err(CliError::usage(format!("--component must be scpp or scap, got {other:?}"))),
    };
    let arch = spec.map(|s| s.backbone.config()).transpose()?;
    let d = match (args.d, arch) {
        (Some(d), Some(a)) if d != a.d => {
            return Err(CliError::usage(format!("--d {d} disagrees with the backbone width {}", a.d)))
        }
        (Some(d), _) => d,
        (None, Some(a)) => a.d,
        (None, None) => return Err(CliError::usage("--d is required without --config")),
    };
    let base_layout = match (spec, arch) {
        (Some(s), Some(a)) => Some(s.resolve(a.d, a.max_len, true)?),
        _ => None,
    };
    let positions = match (args.positions, spec, arch) {
        (Some(p), _, _) => p,
        (None, Some(s), Some(a)) => {
            let comp = if prepended { &s.scpp } else { &s.scap };
            if prepended {
                comp.as_ref().and_then(|c| c.positions).ok_or_else(|| CliError::usage("--positions is required"))?
            } else {
                a.max_len
            }
        }
        _ => return Err(CliError::usage("--positions is required without --config")),
    };
    if d == 0 || positions == 0 {
        return Err(CliError::usage("--d and --positions must be positive"));
    }
    let complement = args.complement.unwrap_or_else(|| {
        base_layout.map_or(0, |l| if prepended { l.scap } else { l.scpp }.map_or(0, |c| c.params()))
    });
    let component_budget = args
        .budget
        .checked_sub(complement)
        .ok_or_else(|| CliError::usage(format!("complement {complement} exceeds the total budget {}", args.budget)))?;
    let widths = if args.t.is_empty() { divisors(d) } else { args.t.clone() };

    let mut rows: Vec<(usize, usize, u64)> = Vec::new();
    for &t in &widths {
        if t == 0 || d % t != 0 {
            eprintln!("note: skipping t={t}, which does not divide d={d}");
            continue;
        }
        let k = d / t;
        let r = solve_rank(&BudgetSpec::new(component_budget, d as u64, positions as u64, k as u64)?);
        rows.push((t, k, r));
    }

    let metrics: Vec<Option<f64>> = match spec {
        None => vec![None; rows.len()],
        Some(spec) => {
            let prepared = prepare(spec, root)?;
            let l = prepared.l();
            let mut cells = Vec::new();
            let mut index = Vec::new();
            for (i, &(t, k, r)) in rows.iter().enumerate() {
                if r == 0 {
                    eprintln!("note: t={t} leaves r=0 under the budget; not trained");
                    continue;
                }
                let mut cell = spec.clone();
                let comp = Some(ComponentSpec::factorized(if prepended { positions } else { l }, k, r));
                if prepended {
                    cell.scpp = comp;
                } else {
                    cell.scap = comp;
                }
                cell.budget = None;
                let layout = cell.resolve(prepared.d(), l, true)?;
                cells.push(Cell { label: format!("t{t}"), spec: cell, layout });
                index.push(i);
            }
            let dir = sweep_dir(
                root,
                "granularity",
                spec,
                &json!([args.component, args.budget, positions, complement, widths]),
            );
            let results = run_sweep_cells(&cells, &prepared, None, &dir, args.jobs)?;
            let mut metrics = vec![None; rows.len()];
            for (i, (summary, _)) in index.into_iter().zip(results) {
                metrics[i] = Some(summary.test_metric);
            }
            let csv = granularity_csv(&rows, &metrics, d, positions, complement);
            write_sweep(
                &dir,
                &[("granularity.csv", &csv)],
                json!({"command": "sweep-granularity", "config_hash": spec.config_hash(), "cells": cells.len()}),
            )?;
            return Ok(csv);
        }
    };
    Ok(granularity_csv(&rows, &metrics, d, positions, complement))
}

fn granularity_csv(
    rows: &[(usize, usize, u64)],
    metrics: &[Option<f64>],
    d: usize,
    positions: usize,
    complement: u64,
) -> String {
    let mut csv = String::from("t,K,r,component_params,params,metric\n");
    for (&(t, k, r), m) in rows.iter().zip(metrics) {
        let own = param_count(r, d as u64, positions as u64, k as u64);
        csv.push_str(&format!("{t},{k},{r},{own},{},{}\n", own + complement, m.map(csv_float).unwrap_or_default()));
    }
    csv
}

/// Ablation axes.
pub const AXES: [&str; 4] = ["lc", "ps", "pp", "ap"];

/// Cells of the ablation grid, each listing the axes it switches on.
const ABLATION_CELLS: [&[&str]; 5] =
    [&["pp"], &["pp", "lc"], &["pp", "lc", "ps"], &["pp", "lc", "ap"], &["pp", "lc", "ps", "ap"]];

pub fn ablate(
    spec: &ExperimentSpec,
    axes: &[String],
    budget: Option<u64>,
    jobs: usize,
    root: &Path,
) -> CliResult<String> {
    for a in axes {
        if !AXES.contains(&a.as_str()) {
            return Err(CliError::usage(format!("unknown axis {a:?}; expected a subset of lc,ps,pp,ap")));
        }
    }
    let scpp = spec.scpp.as_ref().ok_or_else(|| CliError::usage("ablation needs an scpp component in the config"))?;
    let positions = scpp.positions.ok_or_else(|| CliError::usage("scpp needs \"positions\""))?;
    let k_pp = scpp.k;
    let k_ap = spec.scap.as_ref().map_or(1, |c| c.k);
    let arch = spec.backbone.config()?;
    let (d, l) = (arch.d, arch.max_len);
    let total = match budget.or(spec.budget) {
        Some(b) => b,
        None => spec.resolve(d, l, true)?.total(),
    };

    let mut cells = Vec::new();
    for cell_axes in ABLATION_CELLS {
        if !cell_axes.iter().all(|a| axes.iter().any(|x| x == a)) {
            continue;
        }
        let has = |a: &str| cell_axes.contains(&a);
        if has("ps") && k_pp == 1 {
            eprintln!("note: skipping {}: scpp K=1 leaves nothing to subdivide", cell_axes.join("+"));
            continue;
        }
        let mut cell = spec.clone();
        cell.budget = None;
        let pp_budget = if has("ap") { (total as f64 * PREPENDED_SHARE).floor() as u64 } else { total };
        cell.scpp = Some(if has("lc") {
            let k = if has("ps") { k_pp } else { 1 };
            ComponentSpec { budget: Some(pp_budget), r: None, ..ComponentSpec::factorized(positions, k, 0) }
        } else {
            ComponentSpec::plain(((pp_budget as usize) / d).max(1))
        });
        cell.scap = has("ap").then(|| ComponentSpec {
            budget: Some(total - pp_budget),
            r: None,
            positions: None,
            ..ComponentSpec::factorized(l, if has("ps") { k_ap } else { 1 }, 0)
        });
        let layout = cell.resolve(d, l, false)?;
        cells.push(Cell { label: cell_axes.join("+"), spec: cell, layout });
    }
    if cells.is_empty() {
        return Err(CliError::usage("no ablation cell matches the given axes"));
    }
    let prepared = prepare(spec, root)?;
    let dir = sweep_dir(root, "ablate", spec, &json!([axes, total]));
    let results = run_sweep_cells(&cells, &prepared, None, &dir, jobs)?;
    let mut csv = String::from("cell,scpp_K,scpp_r,scap_K,scap_r,params,budget,metric\n");
    for (cell, (summary, _)) in cells.iter().zip(&results) {
        let kr = |c: Option<Resolved>| match c {
            Some(Resolved::Factorized { dims, .. }) => (dims.k.to_string(), dims.r.to_string()),
            Some(Resolved::Plain { .. }) => ("plain".into(), String::new()),
            None => (String::new(), String::new()),
        };
        let (pk, pr) = kr(cell.layout.scpp);
        let (ak, ar) = kr(cell.layout.scap);
        csv.push_str(&format!(
            "{},{pk},{pr},{ak},{ar},{},{total},{}\n",
            cell.label,
            summary.params.total,
            csv_float(summary.test_metric)
        ));
    }
    write_sweep(
        &dir,
        &[("ablation.csv", &csv)],
        json!({"command": "ablate", "config_hash": spec.config_hash(), "budget": total}),
    )?;
    Ok(csv)
}

pub struct FewShotOutput {
    pub dir: PathBuf,
    pub runs_csv: String,
    pub summary_csv: String,
}

pub fn fewshot(
    spec: &ExperimentSpec,
    gammas: &[usize],
    seeds: usize,
    jobs: usize,
    root: &Path,
    allow_over_budget: bool,
) -> CliResult<FewShotOutput> {
    if gammas.is_empty() || seeds == 0 {
        return Err(CliError::usage("--gamma needs at least one value and --seeds must be positive"));
    }
    let prepared = prepare(spec, root)?;
    let layout = spec.resolve(prepared.d(), prepared.l(), allow_over_budget)?;
    let base_seed = spec.run.seed;
    let mut cells = Vec::new();
    let mut splits = Vec::new();
    for &gamma in gammas {
        let sampling = FewShotSpec::new(gamma, seeds, base_seed);
        for i in 0..seeds {
            let train = fewshot_sample(&prepared.splits.train, &sampling, i as u64)?;
            let mut cell = spec.clone();
            cell.run.seed = base_seed + i as u64;
            cells.push(Cell { label: format!("g{gamma}-s{i}"), spec: cell, layout });
            splits.push(Splits { train, dev: prepared.splits.dev.clone(), test: prepared.splits.test.clone() });
        }
    }
    let dir = sweep_dir(root, "fewshot", spec, &json!([gammas, seeds]));
    let results = run_sweep_cells(&cells, &prepared, Some(&splits), &dir, jobs)?;

    let mut runs_csv = String::from("gamma,seed,metric\n");
    let mut summary_csv = String::from("gamma,mean,std,n\n");
    for (g, &gamma) in gammas.iter().enumerate() {
        let values: Vec<f64> = results[g * seeds..(g + 1) * seeds].iter().map(|(s, _)| s.test_metric).collect();
        for (i, v) in values.iter().enumerate() {
            runs_csv.push_str(&format!("{gamma},{},{}\n", base_seed + i as u64, csv_float(*v)));
        }
        let report = fewshot_report(&values)?;
        summary_csv.push_str(&format!("{gamma},{},{},{}\n", csv_float(report.mean), csv_float(report.std), report.n));
    }
    write_sweep(
        &dir,
        &[("fewshot_runs.csv", &runs_csv), ("fewshot.csv", &summary_csv)],
        json!({"command": "fewshot", "config_hash": spec.config_hash(), "std": "population"}),
    )?;
    Ok(FewShotOutput { dir, runs_csv, summary_csv })
}

pub struct LengthSweepOutput {
    pub dir: PathBuf,
    pub csv: String,
    pub timing_csv: String,
}

pub fn length_sweep(
    spec: &ExperimentSpec,
    lengths: &[usize],
    budget: Option<u64>,
    jobs: usize,
    root: &Path,
) -> CliResult<LengthSweepOutput> {
    let arch = spec.backbone.config()?;
    let (d, l) = (arch.d, arch.max_len);
    let base = spec.resolve(d, l, true)?;
    let k = spec.scpp.as_ref().map_or(1, |c| c.k);
    let pp_budget = match budget {
        Some(b) => b,
        None => base
            .scpp
            .map(|c| c.params())
            .ok_or_else(|| CliError::usage("--budget is required when the config has no scpp component"))?,
    };
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &m in lengths {
        let mut cell = spec.clone();
        cell.budget = None;
        let r = if m == 0 {
            if spec.scap.is_none() {
                eprintln!("note: skipping m=0, the config has no scap component to run alone");
                continue;
            }
            cell.scpp = None;
            0
        } else {
            let r = solve_rank(&BudgetSpec::new(pp_budget, d as u64, m as u64, k as u64)?);
            if r == 0 {
                eprintln!("note: skipping m={m}, which leaves r=0 under a budget of {pp_budget}");
                continue;
            }
            cell.scpp = Some(ComponentSpec::factorized(m, k, r));
            r
        };
        let layout = cell.resolve(d, l, true)?;
        rows.push((m, r, layout.total()));
        cells.push(Cell { label: format!("m{m}"), spec: cell, layout });
    }
    if cells.is_empty() {
        return Err(CliError::usage("no prompt length left to run"));
    }
    let prepared = prepare(spec, root)?;
    let dir = sweep_dir(root, "length-sweep", spec, &json!([lengths, pp_budget]));
    let results = run_sweep_cells(&cells, &prepared, None, &dir, jobs)?;

    let reference = rows
        .iter()
        .position(|&(m, _, _)| m == 100)
        .unwrap_or_else(|| rows.iter().enumerate().max_by_key(|(_, &(m, _, _))| m).map_or(0, |(i, _)| i));
    let ref_time = results[reference].1.max(f64::MIN_POSITIVE);
    let mut csv = String::from("m,r,params,metric\n");
    let mut timing_csv = String::from("m,wall_seconds,relative_wall_time\n");
    for (&(m, r, params), (summary, wall)) in rows.iter().zip(&results) {
        csv.push_str(&format!("{m},{r},{params},{}\n", csv_float(summary.test_metric)));
        let wall = wall.max(f64::MIN_POSITIVE);
        timing_csv.push_str(&format!("{m},{wall:.6},{}\n", csv_float(wall / ref_time)));
    }
    write_sweep(
        &dir,
        &[("length_sweep.csv", &csv), ("length_sweep_timing.csv", &timing_csv)],
        json!({"command": "length-sweep", "config_hash": spec.config_hash(), "budget": pp_budget, "reference_m": rows[reference].0}),
    )?;
    Ok(LengthSweepOutput { dir, csv, timing_csv })
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    if dir.join("summary.json").is_file() && dir.join("best").is_dir() {
        out.push(dir.to_path_buf());
    }
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() && path.file_name().is_some_and(|n| n != "best" && n != "backbones") {
                find_runs(&path, out)?;
            }
        }
    }
    Ok(())
}

/// One CSV row per run directory, with parameter counts recomputed from the
/// stored checkpoints.
pub fn report(runs: &[PathBuf], root: &Path) -> CliResult<String> {
    let mut dirs = Vec::new();
    if runs.is_empty() {
        find_runs(root, &mut dirs)?;
    } else {
        for r in runs {
            find_runs(r, &mut dirs)?;
        }
    }
    dirs.sort();
    dirs.dedup();
    let mut csv = String::from(
        "run,name,metric,dev_metric,test_metric,scpp_codebook,scpp_weights,scap_codebook,scap_weights,total_params\n",
    );
    for dir in dirs {
        let text = fs::read_to_string(dir.join("summary.json"))?;
        let summary: Summary = serde_json::from_str(&text)
            .map_err(|e| CliError::runtime(format!("{}: {e}", dir.join("summary.json").display())))?;
        let counts = counts_from_manifests(&dir.join("best"))?;
        if counts != summary.params {
            return Err(CliError::runtime(format!(
                "{}: summary parameter counts {:?} disagree with the checkpoint {:?}",
                dir.display(),
                summary.params,
                counts
            )));
        }
        let rel = dir.strip_prefix(root).unwrap_or(&dir).display().to_string();
        csv.push_str(&format!(
            "{rel},{},{},{},{},{},{},{},{},{}\n",
            summary.name,
            summary.metric.as_str(),
            summary.dev_metric.map(csv_float).unwrap_or_default(),
            csv_float(summary.test_metric),
            counts.scpp_codebook,
            counts.scpp_weights,
            counts.scap_codebook,
            counts.scap_weights,
            counts.total
        ));
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_examples() {
        assert_eq!(
            budget(768, 60, 24, 46_080).unwrap(),
            "r=20\nparams=44160\ncapacity=16777216000000000000000000000000\n"
        );
        assert!(budget(768, 256, 2, 30_720).unwrap().starts_with("r=24\nparams=30720\n"));
        assert!(budget(768, 60, 24, 0).unwrap().starts_with("r=0\n"));
    }

    #[test]
    fn counting_sweep_skips_non_divisors() {
        let args = GranularityArgs {
            component: "scpp".into(),
            budget: 76_800,
            d: Some(768),
            positions: Some(60),
            complement: Some(30_720),
            t: vec![32, 100],
            jobs: 1,
        };
        let csv = sweep_granularity(&args, None, Path::new("unused")).unwrap();
        assert_eq!(csv, "t,K,r,component_params,params,metric\n32,24,20,44160,74880,\n");
    }
}

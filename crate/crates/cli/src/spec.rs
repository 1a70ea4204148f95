//! JSON experiment configs.

use std::fs;
use std::path::{Path, PathBuf};

use accept_core::backbone::{BackboneConfig, PretrainConfig};
use accept_core::factorization::{param_count, solve_rank, validate_partition, BudgetSpec, PromptDims};
use accept_core::taskbench::{MetricName, TaskKind};
use accept_core::trainer::{InitStrategy, LrGrid, RunConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Share of a combined budget given to the prepended component when neither
/// component states its own `r` or budget.
pub const PREPENDED_SHARE: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub backbone: BackboneSpec,
    pub task: TaskSpec,
    #[serde(default)]
    pub scpp: Option<ComponentSpec>,
    #[serde(default)]
    pub scap: Option<ComponentSpec>,
    /// Cap on the total trainable prompt parameters.
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default = "InitStrategy::random")]
    pub init: InitStrategy,
    #[serde(default)]
    pub lr_grid: Option<GridSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Directory written by `accept pretrain`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Pretrain on the fly (cached under the runs root).
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Keep the classifier head trainable during adaptation.
    #[serde(default)]
    pub train_head: bool,
}

impl BackboneSpec {
    /// Architecture, when it is known without touching the disk.
    pub fn config(&self) -> CliResult<BackboneConfig> {
        match (&self.checkpoint, &self.pretrain) {
            (None, Some(p)) => Ok(p.backbone),
            (Some(dir), None) => {
                let text = fs::read_to_string(dir.join("arch.json"))
                    .map_err(|e| CliError::usage(format!("backbone checkpoint {}: {e}", dir.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))
            }
            _ => Err(CliError::usage("backbone needs exactly one of \"checkpoint\" or \"pretrain\"")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Synthetic generator; leave unset to read JSONL files instead.
    #[serde(default)]
    pub kind: Option<TaskKind>,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub train: usize,
    #[serde(default)]
    pub dev: usize,
    #[serde(default)]
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub dev_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    /// Class count for JSONL data (0 for regression).
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub metric: Option<MetricName>,
}

fn default_seq_len() -> usize {
    7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    /// Free prompt vectors instead of a codebook.
    #[serde(default)]
    pub plain: bool,
    /// Prompt length; the added component defaults to the input length.
    #[serde(default)]
    pub positions: Option<usize>,
    #[serde(rename = "K", default = "one")]
    pub k: usize,
    #[serde(default)]
    pub r: Option<u64>,
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default = "yes")]
    pub train_weights: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ComponentSpec {
    pub fn factorized(positions: usize, k: usize, r: u64) -> Self {
        Self { plain: false, positions: Some(positions), k, r: Some(r), budget: None, train_weights: true }
    }

    pub fn plain(positions: usize) -> Self {
        Self { plain: true, positions: Some(positions), k: 1, r: None, budget: None, train_weights: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_scpp_grid")]
    pub scpp: Vec<f64>,
    #[serde(default = "default_scap_grid")]
    pub scap: Vec<f64>,
    /// Steps per grid cell; a quarter of the main run when unset.
    #[serde(default)]
    pub steps: Option<usize>,
}

fn default_scpp_grid() -> Vec<f64> {
    LrGrid::default().scpp
}

fn default_scap_grid() -> Vec<f64> {
    LrGrid::default().scap
}

impl GridSpec {
    pub fn grid(&self) -> LrGrid {
        LrGrid { scpp: self.scpp.clone(), scap: self.scap.clone() }
    }
}

/// A resolved component: either plain vectors or codebook dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolved {
    Plain { positions: usize, d: usize },
    Factorized { dims: PromptDims, train_weights: bool },
}

impl Resolved {
    pub fn params(&self) -> u64 {
        match *self {
            Resolved::Plain { positions, d } => (positions * d) as u64,
            Resolved::Factorized { dims, train_weights } => {
                if train_weights {
                    dims.param_count()
                } else {
                    (dims.r * dims.d) as u64
                }
            }
        }
    }

    pub fn positions(&self) -> usize {
        match *self {
            Resolved::Plain { positions, .. } => positions,
            Resolved::Factorized { dims, .. } => dims.positions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedLayout {
    pub scpp: Option<Resolved>,
    pub scap: Option<Resolved>,
}

impl ResolvedLayout {
    pub fn total(&self) -> u64 {
        self.scpp.map_or(0, |c| c.params()) + self.scap.map_or(0, |c| c.params())
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Canonical JSON of the parsed config; field order is fixed by the types.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        hex_digest(self.canonical_json().as_bytes())
    }

    /// Resolves every component against a backbone of width `d` and input
    /// length `l`, solving `r` from budgets where it is not given, and
    /// applies the budget guard.
    pub fn resolve(&self, d: usize, l: usize, allow_over_budget: bool) -> CliResult<ResolvedLayout> {
        if self.scpp.is_none() && self.scap.is_none() {
            return Err(CliError::usage("config has neither an scpp nor an scap component"));
        }
        let both_open =
            |c: &Option<ComponentSpec>| c.as_ref().is_some_and(|c| !c.plain && c.r.is_none() && c.budget.is_none());
        let split = self.scpp.is_some() && self.scap.is_some();
        let share = |prepended: bool, total: u64| -> u64 {
            if !split {
                total
            } else if prepended {
                (total as f64 * PREPENDED_SHARE).floor() as u64
            } else {
                total - (total as f64 * PREPENDED_SHARE).floor() as u64
            }
        };
        let mut out = ResolvedLayout { scpp: None, scap: None };
        for (prepended, comp) in [(true, &self.scpp), (false, &self.scap)] {
            let Some(c) = comp else { continue };
            let name = if prepended { "scpp" } else { "scap" };
            let positions = match (prepended, c.positions) {
                (true, None) => return Err(CliError::usage("scpp needs \"positions\"")),
                (true, Some(p)) => p,
                (false, None) => l,
                (false, Some(p)) if p != l => {
                    return Err(CliError::usage(format!("scap positions {p} must equal the input length {l}")))
                }
                (false, Some(p)) => p,
            };
            if positions == 0 {
                return Err(CliError::usage(format!("{name} needs at least one position")));
            }
            let resolved = if c.plain {
                Resolved::Plain { positions, d }
            } else {
                validate_partition(d, c.k)?;
                let r = match (c.r, c.budget) {
                    (Some(r), _) => r,
                    (None, Some(b)) => solve(b, d, positions, c.k)?,
                    (None, None) => match self.budget {
                        Some(total) if both_open(comp) => solve(share(prepended, total), d, positions, c.k)?,
                        _ => {
                            return Err(CliError::usage(format!(
                                "{name} needs \"r\", its own \"budget\", or a top-level \"budget\""
                            )))
                        }
                    },
                };
                if r == 0 {
                    return Err(CliError::usage(format!("{name} resolves to r = 0; raise its budget")));
                }
                let dims = PromptDims { positions, d, k: c.k, r: r as usize };
                if let Some(b) = c.budget {
                    if dims.param_count() > b && !allow_over_budget {
                        return Err(CliError::usage(format!(
                            "{name} has {} parameters, over its budget of {b} (pass --allow-over-budget to run anyway)",
                            dims.param_count()
                        )));
                    }
                }
                Resolved::Factorized { dims, train_weights: c.train_weights }
            };
            if prepended {
                out.scpp = Some(resolved);
            } else {
                out.scap = Some(resolved);
            }
        }
        if let Some(b) = self.budget {
            if out.total() > b && !allow_over_budget {
                return Err(CliError::usage(format!(
                    "prompts have {} trainable parameters, over the budget of {b} (pass --allow-over-budget to run anyway)",
                    out.total()
                )));
            }
        }
        Ok(out)
    }
}

fn solve(budget: u64, d: usize, positions: usize, k: usize) -> CliResult<u64> {
    let spec = BudgetSpec::new(budget, d as u64, positions as u64, k as u64)?;
    let r = solve_rank(&spec);
    debug_assert!(param_count(r, d as u64, positions as u64, k as u64) <= budget);
    Ok(r)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Short identifier used for run directories.
pub fn run_id(canonical: &str) -> String {
    hex_digest(canonical.as_bytes())[..12].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(json: &str) -> ExperimentSpec {
        ExperimentSpec::parse(json).unwrap()
    }

    const BASE: &str = r#""backbone": {"pretrain": {"backbone": {"d": 768, "layers": 1, "heads": 12, "vocab_size": 32, "max_len": 256}}}, "task": {"kind": "pair-match"}"#;

    #[test]
    fn default_layout_counts() {
        let s =
            spec(&format!(r#"{{{BASE}, "scpp": {{"positions": 60, "K": 24, "r": 20}}, "scap": {{"K": 2, "r": 24}}}}"#));
        let layout = s.resolve(768, 256, false).unwrap();
        assert_eq!(layout.total(), 74_880);
    }

    #[test]
    fn combined_budget_splits() {
        let s =
            spec(&format!(r#"{{{BASE}, "budget": 76800, "scpp": {{"positions": 60, "K": 24}}, "scap": {{"K": 2}}}}"#));
        let layout = s.resolve(768, 256, false).unwrap();
        let Some(Resolved::Factorized { dims, .. }) = layout.scpp else { panic!() };
        assert_eq!(dims.r, 20);
        let Some(Resolved::Factorized { dims, .. }) = layout.scap else { panic!() };
        assert_eq!(dims.r, 24);
        assert!(layout.total() <= 76_800);
    }

    #[test]
    fn budget_guard() {
        let s = spec(&format!(r#"{{{BASE}, "budget": 1000, "scpp": {{"positions": 60, "K": 24, "r": 20}}}}"#));
        assert!(matches!(s.resolve(768, 256, false), Err(CliError::Usage(_))));
        assert!(s.resolve(768, 256, true).is_ok());
    }

    #[test]
    fn uneven_partition_is_a_usage_error() {
        let s = spec(&format!(r#"{{{BASE}, "scpp": {{"positions": 4, "K": 5, "r": 2}}}}"#));
        assert!(matches!(s.resolve(768, 256, false), Err(CliError::Usage(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentSpec::parse(&format!(r#"{{{BASE}, "scpp": {{"positions": 4, "k": 2}}}}"#)).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let a = spec(&format!(r#"{{{BASE}, "scpp": {{"positions": 4, "r": 2}}}}"#));
        let b = spec(&format!(r#"{{ "scpp": {{"r": 2, "positions": 4}}, {BASE} }}"#));
        assert_eq!(a.config_hash(), b.config_hash());
        assert_eq!(run_id(&a.canonical_json()).len(), 12);
    }
}

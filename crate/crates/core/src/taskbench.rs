//! Synthetic tasks, JSONL datasets, few-shot sampling and metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids shared by every generator.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const SEP: usize = 1;
    /// First of four task-marker ids, one per [`super::TaskKind`].
    pub const MARKER_BASE: usize = 2;
    pub const FIRST_CONTENT: usize = 6;
    /// Content symbols used by the generators.
    pub const ALPHABET: usize = 4;
    pub const MIN_VOCAB: usize = FIRST_CONTENT + ALPHABET;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label is the count of the marked symbol, mod 2.
    Parity,
    /// Label is 1 iff the second symbol outnumbers the first.
    TokenMajority,
    /// Two segments around a separator; label is 1 iff they are equal as multisets.
    PairMatch,
    /// Target is the fraction of positions holding the marked symbol.
    CountRegression,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] =
        [TaskKind::Parity, TaskKind::TokenMajority, TaskKind::PairMatch, TaskKind::CountRegression];

    pub fn marker(self) -> usize {
        vocab::MARKER_BASE
            + match self {
                TaskKind::Parity => 0,
                TaskKind::TokenMajority => 1,
                TaskKind::PairMatch => 2,
                TaskKind::CountRegression => 3,
            }
    }

    pub fn num_classes(self) -> usize {
        match self {
            TaskKind::CountRegression => 0,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::TokenMajority => "token-majority",
            TaskKind::PairMatch => "pair-match",
            TaskKind::CountRegression => "count-regression",
        }
    }

    /// Recomputes the label of a generated sequence from scratch.
    pub fn label_of(self, tokens: &[usize]) -> Label {
        let body: Vec<usize> =
            tokens.iter().copied().filter(|&t| t >= vocab::FIRST_CONTENT || t == vocab::SEP).collect();
        let marked = vocab::FIRST_CONTENT;
        match self {
            TaskKind::Parity => Label::Class(body.iter().filter(|&&t| t == marked).count() % 2),
            TaskKind::TokenMajority => {
                let a = body.iter().filter(|&&t| t == marked).count();
                let b = body.iter().filter(|&&t| t == marked + 1).count();
                Label::Class(usize::from(b > a))
            }
            TaskKind::PairMatch => {
                let split = body.iter().position(|&t| t == vocab::SEP).unwrap_or(body.len());
                let mut left = body[..split].to_vec();
                let mut right = body.get(split + 1..).unwrap_or(&[]).to_vec();
                left.sort_unstable();
                right.sort_unstable();
                Label::Class(usize::from(left == right))
            }
            TaskKind::CountRegression => {
                let n = body.len().max(1) as f64;
                Label::Value(body.iter().filter(|&&t| t == marked).count() as f64 / n)
            }
        }
    }
}

/// A class id or a real-valued target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Label,
}

/// Labeled sequences. `num_classes == 0` marks a regression dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_regression(&self) -> bool {
        self.num_classes == 0
    }

    pub fn with_split(mut self, split: &str) -> Self {
        self.split = split.to_string();
        self
    }

    /// Prepends `kind`'s marker token to every sequence.
    pub fn with_marker(mut self, kind: TaskKind) -> Self {
        for ex in &mut self.examples {
            ex.tokens.insert(0, kind.marker());
        }
        self
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            check_example(ex, vocab_size, self.num_classes).map_err(|msg| Error::Data { line: i + 1, msg })?;
        }
        Ok(())
    }

    /// Splits off the last `n` examples.
    pub fn split_off(&mut self, n: usize, split: &str) -> Dataset {
        let at = self.examples.len().saturating_sub(n);
        Dataset { examples: self.examples.split_off(at), num_classes: self.num_classes, split: split.to_string() }
    }

    pub fn labels(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.label.as_f64()).collect()
    }
}

fn check_example(ex: &Example, vocab_size: usize, num_classes: usize) -> std::result::Result<(), String> {
    if let Some(&bad) = ex.tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(format!("token id {bad} out of range for vocabulary of {vocab_size}"));
    }
    match (ex.label, num_classes) {
        (Label::Class(c), n) if n > 0 && c >= n => Err(format!("label {c} out of range for {n} classes")),
        (Label::Value(v), n) if n > 0 => Err(format!("real label {v} in a {n}-class dataset")),
        (Label::Value(v), _) if !v.is_finite() => Err("non-finite label".into()),
        _ => Ok(()),
    }
}

/// Generates `n` examples of `kind` over sequences of `length` tokens.
pub fn gen_task(kind: TaskKind, vocab_size: usize, length: usize, n: usize, seed: u64) -> Result<Dataset> {
    if vocab_size < vocab::MIN_VOCAB {
        return Err(Error::Config(format!(
            "vocabulary of {vocab_size} is smaller than the {} ids the generators use",
            vocab::MIN_VOCAB
        )));
    }
    if length == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    if kind.num_classes() == 2 && n % 2 == 1 {
        return Err(Error::Config(format!("{} needs an even n for balanced classes, got {n}", kind.name())));
    }
    match kind {
        TaskKind::TokenMajority if length.is_multiple_of(2) => {
            return Err(Error::Config("token-majority needs an odd length to avoid ties".into()))
        }
        TaskKind::PairMatch if length < 3 || length.is_multiple_of(2) => {
            return Err(Error::Config("pair-match needs an odd length of at least 3".into()))
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbol = |rng: &mut ChaCha8Rng| vocab::FIRST_CONTENT + rng.random_range(0..vocab::ALPHABET);
    let marked = vocab::FIRST_CONTENT;
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let want = i % 2;
        let (tokens, label) = match kind {
            TaskKind::Parity => {
                let mut tokens: Vec<usize> = (0..length).map(|_| symbol(&mut rng)).collect();
                let count = tokens.iter().filter(|&&t| t == marked).count();
                if count % 2 != want {
                    let pos = rng.random_range(0..length);
                    tokens[pos] = if tokens[pos] == marked {
                        marked + 1 + rng.random_range(0..vocab::ALPHABET - 1)
                    } else {
                        marked
                    };
                }
                (tokens, Label::Class(want))
            }
            TaskKind::TokenMajority => {
                let half = length / 2;
                // winner gets between half+1 and length positions
                let winner_count = half + 1 + rng.random_range(0..=(length - half - 1));
                let (win, lose) = if want == 1 { (marked + 1, marked) } else { (marked, marked + 1) };
                let mut tokens: Vec<usize> = std::iter::repeat_n(win, winner_count)
                    .chain(std::iter::repeat_n(lose, length - winner_count))
                    .collect();
                tokens.shuffle(&mut rng);
                (tokens, Label::Class(want))
            }
            TaskKind::PairMatch => {
                let seg = (length - 1) / 2;
                let left: Vec<usize> = (0..seg).map(|_| symbol(&mut rng)).collect();
                let mut right = left.clone();
                right.shuffle(&mut rng);
                if want == 0 {
                    let pos = rng.random_range(0..seg);
                    let offset = 1 + rng.random_range(0..vocab::ALPHABET - 1);
                    let current = right[pos] - vocab::FIRST_CONTENT;
                    right[pos] = vocab::FIRST_CONTENT + (current + offset) % vocab::ALPHABET;
                }
                let mut tokens = left;
                tokens.push(vocab::SEP);
                tokens.extend(right);
                (tokens, Label::Class(want))
            }
            TaskKind::CountRegression => {
                let tokens: Vec<usize> = (0..length).map(|_| symbol(&mut rng)).collect();
                let label = kind.label_of(&tokens);
                (tokens, label)
            }
        };
        examples.push(Example { tokens, label });
    }
    examples.shuffle(&mut rng);
    Ok(Dataset { examples, num_classes: kind.num_classes(), split: "train".into() })
}

/// What a JSONL file is validated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub vocab_size: usize,
    /// 0 for regression.
    pub num_classes: usize,
}

/// Reads one `{"tokens": [...], "label": ...}` object per line, in order.
pub fn load_jsonl(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Data { line: i + 1, msg: e.to_string() })?;
        check_example(&ex, schema.vocab_size, schema.num_classes).map_err(|msg| Error::Data { line: i + 1, msg })?;
        examples.push(ex);
    }
    Ok(Dataset {
        examples,
        num_classes: schema.num_classes,
        split: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    })
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in &dataset.examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub gamma: usize,
    #[serde(default = "default_num_seeds")]
    pub num_seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Sample an equal share from each class instead of uniformly.
    #[serde(default)]
    pub stratified: bool,
}

fn default_num_seeds() -> usize {
    3
}

impl FewShotSpec {
    pub fn new(gamma: usize, num_seeds: usize, base_seed: u64) -> Self {
        Self { gamma, num_seeds, base_seed, stratified: false }
    }
}

/// Draws `gamma` examples without replacement. The draw depends only on
/// `(base_seed, seed_index)`.
pub fn fewshot_sample(dataset: &Dataset, spec: &FewShotSpec, seed_index: u64) -> Result<Dataset> {
    if spec.gamma == 0 || spec.gamma > dataset.len() {
        return Err(Error::Sampling { requested: spec.gamma, available: dataset.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.base_seed);
    rng.set_stream(seed_index);
    let picked: Vec<usize> = if spec.stratified && dataset.num_classes > 0 {
        stratified_indices(dataset, spec.gamma, &mut rng)?
    } else {
        rand::seq::index::sample(&mut rng, dataset.len(), spec.gamma).into_vec()
    };
    Ok(Dataset {
        examples: picked.into_iter().map(|i| dataset.examples[i].clone()).collect(),
        num_classes: dataset.num_classes,
        split: format!("{}-fewshot{}-s{seed_index}", dataset.split, spec.gamma),
    })
}

fn stratified_indices(dataset: &Dataset, gamma: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let c = dataset.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, ex) in dataset.examples.iter().enumerate() {
        if let Some(k) = ex.label.class() {
            by_class[k].push(i);
        }
    }
    let mut picked = Vec::with_capacity(gamma);
    for (k, pool) in by_class.iter_mut().enumerate() {
        let want = gamma / c + usize::from(k < gamma % c);
        if want > pool.len() {
            return Err(Error::Sampling { requested: want, available: pool.len() });
        }
        pool.shuffle(rng);
        picked.extend_from_slice(&pool[..want]);
    }
    picked.shuffle(rng);
    Ok(picked)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    F1Binary,
    Matthews,
    Pearson,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Accuracy => "accuracy",
            MetricName::F1Binary => "f1_binary",
            MetricName::Matthews => "matthews",
            MetricName::Pearson => "pearson",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "accuracy" => Ok(MetricName::Accuracy),
            "f1_binary" => Ok(MetricName::F1Binary),
            "matthews" => Ok(MetricName::Matthews),
            "pearson" => Ok(MetricName::Pearson),
            other => Err(Error::Metric(format!("unknown metric {other:?}"))),
        }
    }
}

fn class_of(v: f64) -> usize {
    v.round().max(0.0) as usize
}

/// Scores predictions against golds. Class ids are passed as whole numbers.
pub fn metric(name: MetricName, predictions: &[f64], golds: &[f64]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Metric(format!("{} predictions vs {} golds", predictions.len(), golds.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Metric("no predictions".into()));
    }
    let n = predictions.len() as f64;
    match name {
        MetricName::Accuracy => {
            let hits = predictions.iter().zip(golds).filter(|(p, g)| class_of(**p) == class_of(**g)).count();
            Ok(hits as f64 / n)
        }
        MetricName::F1Binary => {
            let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
            for (&p, &g) in predictions.iter().zip(golds) {
                match (class_of(p) == 1, class_of(g) == 1) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fnn += 1.0,
                    _ => {}
                }
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
            if precision + recall == 0.0 {
                Ok(0.0)
            } else {
                Ok(2.0 * precision * recall / (precision + recall))
            }
        }
        MetricName::Matthews => {
            let classes = predictions.iter().chain(golds).map(|&v| class_of(v)).max().unwrap_or(0) + 1;
            let mut confusion = vec![0.0f64; classes * classes];
            for (&p, &g) in predictions.iter().zip(golds) {
                confusion[class_of(g) * classes + class_of(p)] += 1.0;
            }
            let correct: f64 = (0..classes).map(|k| confusion[k * classes + k]).sum();
            let pred_totals: Vec<f64> =
                (0..classes).map(|k| (0..classes).map(|g| confusion[g * classes + k]).sum()).collect();
            let gold_totals: Vec<f64> =
                (0..classes).map(|k| (0..classes).map(|p| confusion[k * classes + p]).sum()).collect();
            let cross: f64 = pred_totals.iter().zip(&gold_totals).map(|(p, t)| p * t).sum();
            let pp: f64 = pred_totals.iter().map(|p| p * p).sum();
            let tt: f64 = gold_totals.iter().map(|t| t * t).sum();
            let denom = ((n * n - pp) * (n * n - tt)).sqrt();
            if denom == 0.0 {
                Ok(0.0)
            } else {
                Ok((correct * n - cross) / denom)
            }
        }
        MetricName::Pearson => {
            let mp = predictions.iter().sum::<f64>() / n;
            let mg = golds.iter().sum::<f64>() / n;
            let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
            for (&p, &g) in predictions.iter().zip(golds) {
                cov += (p - mp) * (g - mg);
                vp += (p - mp) * (p - mp);
                vg += (g - mg) * (g - mg);
            }
            if vp == 0.0 || vg == 0.0 {
                return Err(Error::Metric("pearson is undefined for constant input".into()));
            }
            Ok(cov / (vp * vg).sqrt())
        }
    }
}

/// Mean and population standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn fewshot_report(values: &[f64]) -> Result<SeedSummary> {
    if values.is_empty() {
        return Err(Error::Metric("no values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SeedSummary { mean, std: var.sqrt(), n: values.len() })
}

/// `metric,value,seed` CSV rows with a header.
pub fn metric_rows_csv(name: MetricName, values: &[(u64, f64)]) -> String {
    let mut out = String::from("metric,value,seed\n");
    for (seed, value) in values {
        out.push_str(&format!("{},{value},{seed}\n", name.as_str()));
    }
    out
}

//! Tree-structured Parzen Estimator search.
//!
//! Completed trials are split into a good quantile and the rest. Each
//! dimension gets one density per side (a truncated Gaussian mixture with a
//! uniform prior component for numeric dimensions, add-one smoothed
//! frequencies for categorical ones) and the candidate drawn from the good
//! density with the largest `l(x) / g(x)` is suggested.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GenerationParams;
use crate::prompting::{ExtractionStatus, FeatureSelection};
use crate::seed;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid TPE configuration: {0}")]
    InvalidConfig(String),
    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),
    #[error("n_trials must be at least 1")]
    NoTrials,
    #[error("no trials qualify")]
    NoQualifyingTrials,
    #[error("parameter {name:?}: {message}")]
    BadParam { name: String, message: String },
    #[error("study log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("study log {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dimension {
    Categorical { name: String, choices: Vec<String> },
    Integer { name: String, lo: i64, hi: i64 },
    Continuous { name: String, lo: f64, hi: f64 },
}

impl Dimension {
    pub fn name(&self) -> &str {
        match self {
            Dimension::Categorical { name, .. }
            | Dimension::Integer { name, .. }
            | Dimension::Continuous { name, .. } => name,
        }
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match (self, value) {
            (Dimension::Categorical { choices, .. }, ParamValue::Str(s)) => choices.contains(s),
            (Dimension::Integer { lo, hi, .. }, ParamValue::Int(v)) => (lo..=hi).contains(&v),
            (Dimension::Continuous { lo, hi, .. }, ParamValue::Float(v)) => (lo..=hi).contains(&v),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Float(v) => Some(*v),
            ParamValue::Str(_) => None,
        }
    }

    fn sort_key(&self) -> (u8, f64, &str) {
        match self {
            ParamValue::Int(v) => (0, *v as f64, ""),
            ParamValue::Float(v) => (1, *v, ""),
            ParamValue::Str(s) => (2, 0.0, s),
        }
    }
}

impl std::fmt::Display for ParamValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Str(s) => f.write_str(s),
        }
    }
}

pub type Params = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dimensions: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self, OptimizerError> {
        let space = Self { dimensions };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: String| Err(OptimizerError::InvalidSpace(m));
        if self.dimensions.is_empty() {
            return bad("no dimensions".into());
        }
        for (i, d) in self.dimensions.iter().enumerate() {
            if self.dimensions[..i].iter().any(|e| e.name() == d.name()) {
                return bad(format!("duplicate dimension {:?}", d.name()));
            }
            match d {
                Dimension::Categorical { name, choices } => {
                    if choices.is_empty() {
                        return bad(format!("{name}: no choices"));
                    }
                    if choices.iter().enumerate().any(|(j, c)| choices[..j].contains(c)) {
                        return bad(format!("{name}: duplicate choice"));
                    }
                }
                Dimension::Integer { name, lo, hi } if lo >= hi => {
                    return bad(format!("{name}: lo {lo} must be below hi {hi}"));
                }
                Dimension::Continuous { name, lo, hi }
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) =>
                {
                    return bad(format!("{name}: lo {lo} must be below hi {hi}"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn contains(&self, params: &Params) -> bool {
        self.dimensions
            .iter()
            .all(|d| params.get(d.name()).is_some_and(|v| d.contains(v)))
    }
}

/// Kernel width of the numeric Parzen densities. Widths never exceed the
/// range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `1.06 * std(observations) * n^(-1/5)` (Silverman), at least
    /// `range / min(n + 1, 100)` so the good density cannot collapse onto
    /// a cluster of near-identical trials. Below two observations the
    /// spread is the range.
    #[default]
    Silverman,
    /// `1.06 * range * n^(-1/5)`, at least `range * 1e-3`, independent of
    /// where observations lie.
    Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    pub seed: u64,
    #[serde(default)]
    pub bandwidth: BandwidthRule,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
            seed: 0,
            bandwidth: BandwidthRule::Silverman,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(OptimizerError::InvalidConfig(format!(
                "gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        if self.n_candidates == 0 {
            return Err(OptimizerError::InvalidConfig("n_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicDetail {
    pub topic_id: usize,
    pub manifest_hash: String,
    pub label: String,
    pub extraction: ExtractionStatus,
    pub bertscore_f: f64,
    pub rouge_l_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub params: Params,
    pub objective: Option<f64>,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub topics: Vec<TopicDetail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn is_complete(&self) -> bool {
        self.status == TrialStatus::Complete && self.objective.is_some_and(f64::is_finite)
    }

    pub fn mean_rouge_l(&self) -> Option<f64> {
        (!self.topics.is_empty())
            .then(|| self.topics.iter().map(|t| t.rouge_l_f).sum::<f64>() / self.topics.len() as f64)
    }
}

/// What an objective evaluation returns for a successful trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub objective: f64,
    pub topics: Vec<TopicDetail>,
}

impl From<f64> for TrialOutcome {
    fn from(objective: f64) -> Self {
        Self {
            objective,
            topics: Vec::new(),
        }
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Gaussian mixture over `[lo, hi]`: one truncated kernel per observation
/// plus a uniform prior component, all equally weighted.
struct Parzen {
    lo: f64,
    hi: f64,
    centers: Vec<f64>,
    bandwidth: f64,
    mass: Vec<f64>,
}

impl Parzen {
    fn new(lo: f64, hi: f64, centers: Vec<f64>, rule: BandwidthRule) -> Self {
        let range = hi - lo;
        let n = centers.len().max(1) as f64;
        let spread = match rule {
            BandwidthRule::Silverman if centers.len() >= 2 => {
                let mean = centers.iter().sum::<f64>() / n;
                (centers.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt()
            }
            _ => range,
        };
        let floor = match rule {
            BandwidthRule::Silverman => range / (n + 1.0).min(100.0),
            BandwidthRule::Range => range * 1e-3,
        };
        let bandwidth = (1.06 * spread * n.powf(-0.2)).clamp(floor, range);
        let mass = centers
            .iter()
            .map(|c| normal_cdf((hi - c) / bandwidth) - normal_cdf((lo - c) / bandwidth))
            .collect();
        Self { lo, hi, centers, bandwidth, mass }
    }

    fn components(&self) -> f64 {
        (self.centers.len() + 1) as f64
    }

    fn pdf(&self, x: f64) -> f64 {
        let bw = self.bandwidth;
        let kernels: f64 = self
            .centers
            .iter()
            .zip(&self.mass)
            .map(|(c, m)| {
                let z = (x - c) / bw;
                (-0.5 * z * z).exp() / (bw * (2.0 * std::f64::consts::PI).sqrt() * m)
            })
            .sum();
        (kernels + 1.0 / (self.hi - self.lo)) / self.components()
    }

    fn cdf(&self, x: f64) -> f64 {
        let x = x.clamp(self.lo, self.hi);
        let bw = self.bandwidth;
        let kernels: f64 = self
            .centers
            .iter()
            .zip(&self.mass)
            .map(|(c, m)| (normal_cdf((x - c) / bw) - normal_cdf((self.lo - c) / bw)) / m)
            .sum();
        (kernels + (x - self.lo) / (self.hi - self.lo)) / self.components()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let pick = rng.random_range(0..=self.centers.len());
        if pick == self.centers.len() {
            return rng.random_range(self.lo..=self.hi);
        }
        let c = self.centers[pick];
        for _ in 0..64 {
            let z: f64 = StandardNormal.sample(rng);
            let x = c + z * self.bandwidth;
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        c
    }
}

fn categorical_weights(choices: &[String], observed: &[&str]) -> Vec<f64> {
    let mut w = vec![1.0; choices.len()];
    for o in observed {
        if let Some(i) = choices.iter().position(|c| c == o) {
            w[i] += 1.0;
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let mut u: f64 = rng.random();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn sample_uniform(dim: &Dimension, rng: &mut ChaCha8Rng) -> ParamValue {
    match dim {
        Dimension::Categorical { choices, .. } => {
            ParamValue::Str(choices[rng.random_range(0..choices.len())].clone())
        }
        Dimension::Integer { lo, hi, .. } => ParamValue::Int(rng.random_range(*lo..=*hi)),
        Dimension::Continuous { lo, hi, .. } => ParamValue::Float(rng.random_range(*lo..=*hi)),
    }
}

/// Density pair for one dimension.
enum Split {
    Categorical { good: Vec<f64>, bad: Vec<f64> },
    Numeric { good: Parzen, bad: Parzen, integer: bool },
}

impl Split {
    fn build(dim: &Dimension, good: &[&TrialRecord], bad: &[&TrialRecord], rule: BandwidthRule) -> Self {
        let values = |trials: &[&TrialRecord]| -> Vec<f64> {
            trials
                .iter()
                .filter_map(|t| t.params.get(dim.name()).filter(|v| dim.contains(v)))
                .filter_map(ParamValue::as_f64)
                .collect()
        };
        match dim {
            Dimension::Categorical { choices, name } => {
                fn labels<'a>(trials: &[&'a TrialRecord], name: &str) -> Vec<&'a str> {
                    trials
                        .iter()
                        .filter_map(|t| match t.params.get(name) {
                            Some(ParamValue::Str(s)) => Some(s.as_str()),
                            _ => None,
                        })
                        .collect()
                }
                Split::Categorical {
                    good: categorical_weights(choices, &labels(good, name)),
                    bad: categorical_weights(choices, &labels(bad, name)),
                }
            }
            Dimension::Integer { lo, hi, .. } => {
                let (lo, hi) = (*lo as f64 - 0.5, *hi as f64 + 0.5);
                Split::Numeric {
                    good: Parzen::new(lo, hi, values(good), rule),
                    bad: Parzen::new(lo, hi, values(bad), rule),
                    integer: true,
                }
            }
            Dimension::Continuous { lo, hi, .. } => Split::Numeric {
                good: Parzen::new(*lo, *hi, values(good), rule),
                bad: Parzen::new(*lo, *hi, values(bad), rule),
                integer: false,
            },
        }
    }

    fn draw(&self, dim: &Dimension, rng: &mut ChaCha8Rng) -> (ParamValue, f64) {
        match (self, dim) {
            (Split::Categorical { good, bad }, Dimension::Categorical { choices, .. }) => {
                let i = sample_weighted(rng, good);
                (ParamValue::Str(choices[i].clone()), good[i].ln() - bad[i].ln())
            }
            (Split::Numeric { good, bad, integer: true }, Dimension::Integer { lo, hi, .. }) => {
                let v = (good.sample(rng).round() as i64).clamp(*lo, *hi);
                let x = v as f64;
                let mass = |p: &Parzen| (p.cdf(x + 0.5) - p.cdf(x - 0.5)).max(f64::MIN_POSITIVE);
                (ParamValue::Int(v), mass(good).ln() - mass(bad).ln())
            }
            (Split::Numeric { good, bad, .. }, _) => {
                let x = good.sample(rng);
                (ParamValue::Float(x), good.pdf(x).ln() - bad.pdf(x).ln())
            }
            _ => unreachable!("split built from the same dimension"),
        }
    }
}

/// Next point to evaluate, deterministic in `(config.seed, complete
/// history)`. Failed trials are ignored entirely.
pub fn suggest(
    history: &[TrialRecord],
    space: &SearchSpace,
    config: &TpeConfig,
) -> Result<Params, OptimizerError> {
    space.validate()?;
    config.validate()?;
    let mut complete: Vec<&TrialRecord> = history.iter().filter(|t| t.is_complete()).collect();
    let mut rng = seed::rng(seed::derive_indexed(
        config.seed,
        "tpe-suggest",
        &[complete.len() as u64],
    ));
    if complete.is_empty() || complete.len() < config.n_startup {
        return Ok(space
            .dimensions
            .iter()
            .map(|d| (d.name().to_owned(), sample_uniform(d, &mut rng)))
            .collect());
    }
    complete.sort_by(|a, b| {
        b.objective
            .partial_cmp(&a.objective)
            .unwrap_or(Ordering::Equal)
            .then(a.trial_id.cmp(&b.trial_id))
    });
    let n_good = ((config.gamma * complete.len() as f64).ceil() as usize).clamp(1, complete.len());
    let (good, bad) = complete.split_at(n_good);
    let splits: Vec<Split> = space
        .dimensions
        .iter()
        .map(|d| Split::build(d, good, bad, config.bandwidth))
        .collect();

    let mut best: Option<(f64, Params)> = None;
    for _ in 0..config.n_candidates {
        let mut params = Params::new();
        let mut score = 0.0;
        for (dim, split) in space.dimensions.iter().zip(&splits) {
            let (value, log_ratio) = split.draw(dim, &mut rng);
            score += log_ratio;
            params.insert(dim.name().to_owned(), value);
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, params));
        }
    }
    Ok(best.expect("n_candidates >= 1").1)
}

/// Append-only JSONL persistence for trial records.
pub struct StudyLog {
    path: PathBuf,
    file: BufWriter<File>,
}

impl StudyLog {
    /// Opens (creating if needed) the log and returns the replayed history.
    /// A truncated final line left by a crash is dropped from the file.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<TrialRecord>), OptimizerError> {
        let path = path.as_ref().to_owned();
        let io = |source| OptimizerError::Io { path: path.clone(), source };
        let (history, valid_len) = if path.exists() {
            let text = fs::read_to_string(&path).map_err(io)?;
            replay_text(&path, &text)?
        } else {
            (Vec::new(), 0)
        };
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        if file.metadata().map_err(io)?.len() != valid_len as u64 {
            file.set_len(valid_len as u64).map_err(io)?;
        }
        Ok((Self { path, file: BufWriter::new(file) }, history))
    }

    pub fn append(&mut self, record: &TrialRecord) -> Result<(), OptimizerError> {
        let io = |source| OptimizerError::Io { path: self.path.clone(), source };
        let line = serde_json::to_string(record).expect("trial record serializes");
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.write_all(b"\n").map_err(io)?;
        self.file.flush().map_err(io)?;
        self.file.get_ref().sync_data().map_err(io)
    }
}

/// Reads a study log without modifying it.
pub fn replay(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>, OptimizerError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| OptimizerError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(replay_text(path, &text)?.0)
}

fn replay_text(path: &Path, text: &str) -> Result<(Vec<TrialRecord>, usize), OptimizerError> {
    let mut records = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let complete_line = line.ends_with('\n');
        if line.trim().is_empty() {
            offset += line.len();
            continue;
        }
        match (serde_json::from_str::<TrialRecord>(line), complete_line) {
            (Ok(r), true) => {
                records.push(r);
                offset += line.len();
            }
            // A final line without its newline was cut short by a crash.
            (_, false) => break,
            (Err(e), true) => {
                return Err(OptimizerError::Corrupt {
                    path: path.to_owned(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((records, offset))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub best: TrialRecord,
    pub history: Vec<TrialRecord>,
}

pub fn best_trial(history: &[TrialRecord]) -> Option<&TrialRecord> {
    history.iter().filter(|t| t.is_complete()).fold(None, |best, t| match best {
        Some(b) if b.objective >= t.objective => Some(b),
        _ => Some(t),
    })
}

/// Continues a study until it holds `n_trials` records. Each trial's
/// suggestion uses a seed derived from the study seed and the trial id, so
/// a failure does not make the next trial repeat the same point.
pub fn run_study<F>(
    space: &SearchSpace,
    config: &TpeConfig,
    n_trials: usize,
    mut history: Vec<TrialRecord>,
    mut log: Option<&mut StudyLog>,
    mut objective: F,
) -> Result<StudyResult, OptimizerError>
where
    F: FnMut(u64, &Params) -> Result<TrialOutcome, String>,
{
    if n_trials == 0 {
        return Err(OptimizerError::NoTrials);
    }
    space.validate()?;
    config.validate()?;
    while history.len() < n_trials {
        let trial_id = history.iter().map(|t| t.trial_id + 1).max().unwrap_or(0);
        let trial_config = TpeConfig {
            seed: seed::derive_indexed(config.seed, "trial", &[trial_id]),
            ..*config
        };
        let params = suggest(&history, space, &trial_config)?;
        let record = match objective(trial_id, &params) {
            Ok(outcome) if outcome.objective.is_finite() => TrialRecord {
                trial_id,
                params,
                objective: Some(outcome.objective),
                status: TrialStatus::Complete,
                topics: outcome.topics,
                error: None,
            },
            Ok(outcome) => TrialRecord {
                trial_id,
                params,
                objective: None,
                status: TrialStatus::Failed,
                topics: outcome.topics,
                error: Some(format!("non-finite objective {}", outcome.objective)),
            },
            Err(message) => TrialRecord {
                trial_id,
                params,
                objective: None,
                status: TrialStatus::Failed,
                topics: Vec::new(),
                error: Some(message),
            },
        };
        tracing::info!(trial_id, objective = ?record.objective, "trial finished");
        if let Some(log) = log.as_deref_mut() {
            log.append(&record)?;
        }
        history.push(record);
    }
    let best = best_trial(&history)
        .cloned()
        .ok_or(OptimizerError::AllTrialsFailed(history.len()))?;
    Ok(StudyResult { best, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimensionSummary {
    /// Most frequent value(s); more than one value means a tie.
    Mode {
        values: Vec<ParamValue>,
        count: usize,
        tie: bool,
        n: usize,
    },
    Median { value: f64, n: usize },
}

/// Per-dimension consensus among the given (good) trials: the mode for
/// categorical and integer values, the median for continuous ones.
pub fn good_trial_commonality(
    trials: &[&TrialRecord],
) -> Result<BTreeMap<String, DimensionSummary>, OptimizerError> {
    if trials.is_empty() {
        return Err(OptimizerError::NoQualifyingTrials);
    }
    let mut by_dim: BTreeMap<&str, Vec<&ParamValue>> = BTreeMap::new();
    for t in trials {
        for (name, value) in &t.params {
            by_dim.entry(name).or_default().push(value);
        }
    }
    let mut summary = BTreeMap::new();
    for (name, values) in by_dim {
        let n = values.len();
        let entry = if values.iter().all(|v| matches!(v, ParamValue::Float(_))) {
            let mut xs: Vec<f64> = values.iter().filter_map(|v| v.as_f64()).collect();
            xs.sort_by(f64::total_cmp);
            let value = if n % 2 == 1 {
                xs[n / 2]
            } else {
                (xs[n / 2 - 1] + xs[n / 2]) / 2.0
            };
            DimensionSummary::Median { value, n }
        } else {
            let mut counts: Vec<(&ParamValue, usize)> = Vec::new();
            for v in values {
                match counts.iter_mut().find(|(u, _)| *u == v) {
                    Some((_, c)) => *c += 1,
                    None => counts.push((v, 1)),
                }
            }
            let count = counts.iter().map(|(_, c)| *c).max().unwrap_or(0);
            let mut modal: Vec<ParamValue> = counts
                .into_iter()
                .filter(|(_, c)| *c == count)
                .map(|(v, _)| v.clone())
                .collect();
            modal.sort_by(|a, b| {
                let (ka, kb) = (a.sort_key(), b.sort_key());
                ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(kb.2))
            });
            DimensionSummary::Mode {
                tie: modal.len() > 1,
                values: modal,
                count,
                n,
            }
        };
        summary.insert(name.to_owned(), entry);
    }
    Ok(summary)
}

/// Template, feature selection and decoding knobs for one labeling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub template: String,
    pub selection: FeatureSelection,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        let gen = GenerationParams::default();
        Self {
            template: "T1".into(),
            selection: FeatureSelection::default(),
            temperature: gen.temperature,
            top_p: gen.top_p,
        }
    }
}

impl PromptConfig {
    /// Maps a point of [`prompt_search_space`] to a configuration. Missing
    /// dimensions keep their default; a sample larger than the pool is
    /// clamped to the pool.
    pub fn from_params(params: &Params, selection_seed: u64) -> Result<Self, OptimizerError> {
        let mut config = Self::default();
        config.selection.seed = selection_seed;
        let bad = |name: &str, message: &str| OptimizerError::BadParam {
            name: name.to_owned(),
            message: message.to_owned(),
        };
        for (name, value) in params {
            let int = || match value {
                ParamValue::Int(v) if *v >= 0 => Ok(*v as usize),
                _ => Err(bad(name, "expected a non-negative integer")),
            };
            let float = || value.as_f64().ok_or_else(|| bad(name, "expected a number"));
            let flag = || match value {
                ParamValue::Str(s) if s == "true" => Ok(true),
                ParamValue::Str(s) if s == "false" => Ok(false),
                _ => Err(bad(name, "expected \"true\" or \"false\"")),
            };
            let s = &mut config.selection;
            match name.as_str() {
                "template" => match value {
                    ParamValue::Str(t) => config.template = t.clone(),
                    _ => return Err(bad(name, "expected a template id")),
                },
                "n_titles" => s.n_titles = int()?,
                "n_abstract_words" => s.n_abstract_words = int()?,
                "top_words_pool" => s.top_words_pool = int()?,
                "top_words_sample" => s.top_words_sample = int()?,
                "include_keywords" => s.include_keywords = flag()?,
                "include_ngrams" => s.include_ngrams = flag()?,
                "order_by_centroid" => s.order_by_centroid = flag()?,
                "temperature" => config.temperature = float()?,
                "top_p" => config.top_p = float()?,
                _ => return Err(bad(name, "unknown prompt dimension")),
            }
        }
        let s = &mut config.selection;
        s.top_words_sample = s.top_words_sample.min(s.top_words_pool);
        Ok(config)
    }

    pub fn generation(&self, base: &GenerationParams) -> GenerationParams {
        GenerationParams {
            temperature: self.temperature,
            top_p: self.top_p,
            ..base.clone()
        }
    }
}

/// Template choice, feature menu and decoding knobs searched by default.
pub fn prompt_search_space(templates: &[String]) -> SearchSpace {
    let flag = |name: &str| Dimension::Categorical {
        name: name.into(),
        choices: vec!["true".into(), "false".into()],
    };
    let int = |name: &str, lo, hi| Dimension::Integer { name: name.into(), lo, hi };
    SearchSpace {
        dimensions: vec![
            Dimension::Categorical {
                name: "template".into(),
                choices: templates.to_vec(),
            },
            int("n_titles", 0, 8),
            int("n_abstract_words", 0, 10),
            int("top_words_pool", 4, 20),
            int("top_words_sample", 1, 20),
            flag("include_keywords"),
            flag("include_ngrams"),
            flag("order_by_centroid"),
            Dimension::Continuous { name: "temperature".into(), lo: 0.0, hi: 1.5 },
            Dimension::Continuous { name: "top_p".into(), lo: 0.1, hi: 1.0 },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn x_space() -> SearchSpace {
        SearchSpace::new(vec![Dimension::Continuous { name: "x".into(), lo: 0.0, hi: 1.0 }]).unwrap()
    }

    fn quadratic(_: u64, p: &Params) -> Result<TrialOutcome, String> {
        let x = p["x"].as_f64().unwrap();
        Ok((-(x - 0.3) * (x - 0.3)).into())
    }

    fn complete(trial_id: u64, params: Params, objective: f64) -> TrialRecord {
        TrialRecord {
            trial_id,
            params,
            objective: Some(objective),
            status: TrialStatus::Complete,
            topics: vec![],
            error: None,
        }
    }

    fn templates() -> Vec<String> {
        ["T1", "T2", "T3", "T4"].map(String::from).to_vec()
    }

    #[test]
    fn space_validation() {
        let c = |name: &str, lo, hi| Dimension::Continuous { name: name.into(), lo, hi };
        assert!(SearchSpace::new(vec![c("a", 1.0, 1.0)]).is_err());
        assert!(SearchSpace::new(vec![c("a", 0.0, 1.0), c("a", 0.0, 2.0)]).is_err());
        assert!(SearchSpace::new(vec![Dimension::Categorical { name: "t".into(), choices: vec![] }]).is_err());
        assert!(SearchSpace::new(vec![Dimension::Integer { name: "i".into(), lo: 3, hi: 2 }]).is_err());
        assert!(SearchSpace::new(vec![]).is_err());
        prompt_search_space(&templates()).validate().unwrap();
        assert!(TpeConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn categorical_signal_is_found() {
        let space = prompt_search_space(&templates());
        let mut rng = seed::rng(3);
        let history: Vec<TrialRecord> = (0..20u64)
            .map(|i| {
                let mut p: Params = space
                    .dimensions
                    .iter()
                    .map(|d| (d.name().to_owned(), sample_uniform(d, &mut rng)))
                    .collect();
                let t = templates()[(i % 4) as usize].clone();
                let objective = if t == "T1" { 1.0 } else { 0.0 };
                p.insert("template".into(), ParamValue::Str(t));
                complete(i, p, objective)
            })
            .collect();
        let hits = (0..50u64)
            .filter(|s| {
                let cfg = TpeConfig { seed: *s, ..Default::default() };
                suggest(&history, &space, &cfg).unwrap()["template"] == ParamValue::Str("T1".into())
            })
            .count();
        assert!(hits as f64 / 50.0 >= 0.8, "T1 suggested {hits}/50 times");
    }

    #[test]
    fn suggestions_are_deterministic_and_ignore_failures() {
        let space = x_space();
        let config = TpeConfig::default();
        let history = run_study(&space, &config, 15, vec![], None, quadratic).unwrap().history;
        let a = suggest(&history, &space, &config).unwrap();
        assert_eq!(a, suggest(&history.clone(), &space, &config).unwrap());
        let mut with_failures = history.clone();
        with_failures.insert(3, TrialRecord {
            trial_id: 99,
            params: Params::from([("x".into(), ParamValue::Float(0.01))]),
            objective: None,
            status: TrialStatus::Failed,
            topics: vec![],
            error: Some("boom".into()),
        });
        assert_eq!(a, suggest(&with_failures, &space, &config).unwrap());
    }

    #[test]
    fn quadratic_optimum_is_found() {
        let result = run_study(&x_space(), &TpeConfig::default(), 100, vec![], None, quadratic).unwrap();
        let x = result.best.params["x"].as_f64().unwrap();
        assert!((x - 0.3).abs() <= 0.05, "best x {x}");
        assert_eq!(result.history.len(), 100);
    }

    #[test]
    fn mixed_space_optimum() {
        let space = SearchSpace::new(vec![
            Dimension::Categorical { name: "template".into(), choices: vec!["A".into(), "B".into()] },
            Dimension::Continuous { name: "t".into(), lo: 0.0, hi: 1.0 },
        ])
        .unwrap();
        let result = run_study(&space, &TpeConfig { seed: 5, ..Default::default() }, 100, vec![], None, |_, p| {
            let b = p["template"] == ParamValue::Str("B".into());
            let t = p["t"].as_f64().unwrap();
            Ok((if b { 1.0 - (t - 0.5).abs() } else { 0.0 }).into())
        })
        .unwrap();
        assert_eq!(result.best.params["template"], ParamValue::Str("B".into()));
        assert!((result.best.params["t"].as_f64().unwrap() - 0.5).abs() <= 0.1);
    }

    #[test]
    fn single_trial_and_all_failed() {
        let r = run_study(&x_space(), &TpeConfig::default(), 1, vec![], None, quadratic).unwrap();
        assert_eq!(r.best, r.history[0]);
        let err = run_study(&x_space(), &TpeConfig::default(), 3, vec![], None, |_, _| Err("nope".into()));
        assert!(matches!(err, Err(OptimizerError::AllTrialsFailed(3))));
        assert!(matches!(
            run_study(&x_space(), &TpeConfig::default(), 0, vec![], None, quadratic),
            Err(OptimizerError::NoTrials)
        ));
    }

    #[test]
    fn failures_do_not_stall_the_study() {
        let mut calls = 0;
        let r = run_study(&x_space(), &TpeConfig { n_startup: 2, ..Default::default() }, 30, vec![], None, |id, p| {
            calls += 1;
            if id % 3 == 0 { Err("flaky".into()) } else { quadratic(id, p) }
        })
        .unwrap();
        assert_eq!(calls, 30);
        let xs: Vec<f64> = r.history.iter().map(|t| t.params["x"].as_f64().unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn study_log_replays_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.jsonl");
        let config = TpeConfig { seed: 11, ..Default::default() };
        let (mut log, history) = StudyLog::open(&path).unwrap();
        assert!(history.is_empty());
        let first = run_study(&x_space(), &config, 12, history, Some(&mut log), quadratic).unwrap();
        drop(log);

        // Simulate a crash in the middle of writing the next record.
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"trial_id\":12,\"par").unwrap();
        drop(f);

        let (mut log, history) = StudyLog::open(&path).unwrap();
        assert_eq!(history, first.history);
        let resumed = run_study(&x_space(), &config, 20, history, Some(&mut log), quadratic).unwrap();
        drop(log);
        let straight = run_study(&x_space(), &config, 20, vec![], None, quadratic).unwrap();
        assert_eq!(resumed.history, straight.history);
        assert_eq!(replay(&path).unwrap(), straight.history);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.jsonl");
        fs::write(&path, "garbage\n{}\n").unwrap();
        assert!(matches!(replay(&path), Err(OptimizerError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn records_round_trip_through_json() {
        let r = TrialRecord {
            trial_id: 4,
            params: Params::from([
                ("n_titles".into(), ParamValue::Int(3)),
                ("temperature".into(), ParamValue::Float(1.0)),
                ("template".into(), ParamValue::Str("T2".into())),
            ]),
            objective: Some(0.25),
            status: TrialStatus::Complete,
            topics: vec![TopicDetail {
                topic_id: 1,
                manifest_hash: "ab".into(),
                label: "x".into(),
                extraction: ExtractionStatus::Marker,
                bertscore_f: 0.25,
                rouge_l_f: 0.0,
            }],
            error: None,
        };
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<TrialRecord>(&line).unwrap(), r);
    }

    fn with(params: &[(&str, ParamValue)]) -> TrialRecord {
        complete(0, params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(), 1.0)
    }

    #[test]
    fn commonality_examples() {
        let s = |v: &str| ParamValue::Str(v.into());
        let trials = [
            with(&[("template", s("T1")), ("temperature", ParamValue::Float(0.9))]),
            with(&[("template", s("T1")), ("temperature", ParamValue::Float(0.3))]),
            with(&[("template", s("T1")), ("temperature", ParamValue::Float(0.7))]),
        ];
        let refs: Vec<&TrialRecord> = trials.iter().collect();
        let c = good_trial_commonality(&refs).unwrap();
        assert_eq!(c["template"], DimensionSummary::Mode { values: vec![s("T1")], count: 3, tie: false, n: 3 });
        assert_eq!(c["temperature"], DimensionSummary::Median { value: 0.7, n: 3 });

        let tied = [with(&[("template", s("T2"))]), with(&[("template", s("T1"))])];
        let refs: Vec<&TrialRecord> = tied.iter().collect();
        match &good_trial_commonality(&refs).unwrap()["template"] {
            DimensionSummary::Mode { values, tie, count, .. } => {
                assert!(*tie);
                assert_eq!(values, &[s("T1"), s("T2")]);
                assert_eq!(*count, 1);
            }
            other => panic!("{other:?}"),
        }
        assert!(good_trial_commonality(&[]).is_err());
    }

    #[test]
    fn prompt_config_mapping() {
        let s = |v: &str| ParamValue::Str(v.into());
        let params = Params::from([
            ("template".into(), s("T3")),
            ("n_titles".into(), ParamValue::Int(2)),
            ("top_words_pool".into(), ParamValue::Int(5)),
            ("top_words_sample".into(), ParamValue::Int(9)),
            ("include_ngrams".into(), s("true")),
            ("temperature".into(), ParamValue::Float(0.2)),
        ]);
        let c = PromptConfig::from_params(&params, 77).unwrap();
        assert_eq!(c.template, "T3");
        assert_eq!(c.selection.n_titles, 2);
        assert_eq!(c.selection.top_words_sample, 5);
        assert!(c.selection.include_ngrams);
        assert_eq!(c.selection.seed, 77);
        assert_eq!(c.temperature, 0.2);
        assert_eq!(c.top_p, GenerationParams::default().top_p);
        let bad = Params::from([("bogus".into(), ParamValue::Int(1))]);
        assert!(PromptConfig::from_params(&bad, 0).is_err());
    }

    #[test]
    fn parzen_mass_integrates_to_one() {
        for rule in [BandwidthRule::Silverman, BandwidthRule::Range] {
            let p = Parzen::new(0.0, 2.0, vec![0.1, 1.5, 1.9], rule);
            assert!((p.cdf(2.0) - 1.0).abs() < 1e-12);
            assert_eq!(p.cdf(0.0), 0.0);
            let steps = 20_000;
            let integral: f64 = (0..steps)
                .map(|i| p.pdf((i as f64 + 0.5) * 2.0 / steps as f64) * 2.0 / steps as f64)
                .sum();
            assert!((integral - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bandwidth_rules() {
        let same = vec![0.4; 25];
        assert_eq!(Parzen::new(0.0, 2.0, same.clone(), BandwidthRule::Silverman).bandwidth, 2.0 / 26.0);
        assert_eq!(Parzen::new(0.0, 2.0, same, BandwidthRule::Range).bandwidth, 2.0 * 1.06 * 25f64.powf(-0.2));
        // One observation: no spread to measure, so the range stands in.
        let one = Parzen::new(0.0, 1.0, vec![0.5], BandwidthRule::Silverman);
        assert_eq!(one.bandwidth, 1.0);
        let wide = Parzen::new(0.0, 1.0, vec![0.0, 1.0], BandwidthRule::Silverman);
        assert!((wide.bandwidth - 1.06 * 0.5 * 2f64.powf(-0.2)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn suggestions_respect_bounds(seed: u64, n_hist in 0usize..30) {
            let space = prompt_search_space(&templates());
            let mut rng = seed::rng(seed);
            let history: Vec<TrialRecord> = (0..n_hist as u64)
                .map(|i| {
                    let p = space.dimensions.iter().map(|d| (d.name().to_owned(), sample_uniform(d, &mut rng))).collect();
                    complete(i, p, rng.random())
                })
                .collect();
            let p = suggest(&history, &space, &TpeConfig { seed, ..Default::default() }).unwrap();
            prop_assert!(space.contains(&p));
            let config = PromptConfig::from_params(&p, 0).unwrap();
            prop_assert!(config.selection.top_words_sample <= config.selection.top_words_pool);
        }
    }
}

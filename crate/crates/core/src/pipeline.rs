//! Stage orchestration over an output directory.
//!
//! Each stage reads the artifacts of the stages before it from the output
//! directory and writes its own under stable file names, so stages can be
//! run one at a time or all together. Randomness descends from the single
//! root seed in [`PipelineConfig`], fanned out by stage name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, CorpusBundle, CorpusError, Vocabulary};
use crate::factorization::{
    nmf_multiplicative, nmfk_select, Factorization, FactorizationError, NmfOptions, NmfkOptions,
    RankSelectionReport, StabilityStatistic,
};
use crate::gateway::{Backend, GatewayError, GenerationParams, LlmClient};
use crate::metrics::{
    bert_score, bleu, discrimination, rouge_l, MetricConfig, MetricsError, ScoreRecord,
    TokenEmbedder,
};
use crate::optimizer::{
    self, best_trial, prompt_search_space, BandwidthRule, OptimizerError, Params, PromptConfig, SearchSpace,
    StudyLog, StudyResult, TopicDetail, TpeConfig, TrialOutcome, TrialRecord,
};
use crate::prompting::{
    builtin_templates, extract_answer, load_templates_dir, render_prompt, ExtractionStatus,
    FeatureManifest, PromptError, PromptTemplate,
};
use crate::rating::{self, FeatureSummary, GoodTrials, RatingError, RatingItem, RatingStore};
use crate::seed;
use crate::topics::{
    assign_topics, build_clusters, ClusterLimits, TopicAssignment, TopicCluster, TopicError,
    TopicSplit,
};

pub const CORPUS: &str = "corpus.jsonl";
pub const VOCABULARY: &str = "vocabulary.json";
pub const FACTORIZATION: &str = "factorization.json";
pub const RANK_SELECTION: &str = "rank_selection.json";
pub const CLUSTERS_DIR: &str = "clusters";
pub const ASSIGNMENT: &str = "assignment.json";
pub const LABELS: &str = "labels.json";
pub const STUDY: &str = "study.jsonl";
pub const STUDY_META: &str = "study.meta.json";
pub const BEST_CONFIG: &str = "best_config.json";
pub const EVALUATIONS_DIR: &str = "evaluations";
pub const REPORT: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing {path}; run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ground truth: {0}")]
    GroundTruth(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("{path} belongs to a different study ({reason}); remove it or use another output directory")]
    StaleStudy { path: PathBuf, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Factorization(#[from] FactorizationError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Rating(#[from] RatingError),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    /// JSON map from topic id (or `doc:<document id>`) to label.
    pub ground_truth: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    /// Annotator UI bundle served at `/` by the rating server.
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_df: usize,
    pub max_df: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_df: corpus::DEFAULT_MIN_DF,
            max_df: corpus::DEFAULT_MAX_DF_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorizationConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub n_resamples: usize,
    pub noise_scale: f64,
    pub stability_threshold: f64,
    pub statistic: StabilityStatistic,
    pub max_iters: usize,
    pub tol: f64,
    pub inner_updates: usize,
    /// Iteration budget of the final fit at the chosen rank.
    pub final_max_iters: usize,
}

impl Default for FactorizationConfig {
    fn default() -> Self {
        let d = NmfkOptions::default();
        Self {
            k_min: d.k_min,
            k_max: d.k_max,
            n_resamples: d.n_resamples,
            noise_scale: d.noise_scale,
            stability_threshold: d.stability_threshold,
            statistic: d.statistic,
            max_iters: d.max_iters,
            tol: d.tol,
            inner_updates: d.inner_updates,
            final_max_iters: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicsConfig {
    pub top_tokens: usize,
    pub top_ngrams: usize,
    pub top_docs: usize,
    pub top_keywords: usize,
    pub order_by_centroid: bool,
    /// Explicit train topic ids; the first quarter of topics otherwise.
    pub train: Option<Vec<usize>>,
}

impl Default for TopicsConfig {
    fn default() -> Self {
        let l = ClusterLimits::default();
        Self {
            top_tokens: l.top_tokens,
            top_ngrams: l.top_ngrams,
            top_docs: l.top_docs,
            top_keywords: l.top_keywords,
            order_by_centroid: l.order_by_centroid,
            train: None,
        }
    }
}

impl TopicsConfig {
    fn limits(&self) -> ClusterLimits {
        ClusterLimits {
            top_tokens: self.top_tokens,
            top_ngrams: self.top_ngrams,
            top_docs: self.top_docs,
            top_keywords: self.top_keywords,
            order_by_centroid: self.order_by_centroid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_trials: usize,
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    pub bandwidth: BandwidthRule,
    /// Replaces the default prompt search space.
    pub space: Option<SearchSpace>,
    /// Best trials whose train-topic labels are queued for human review.
    pub review_trials: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let t = TpeConfig::default();
        Self {
            n_trials: 30,
            gamma: t.gamma,
            n_startup: t.n_startup,
            n_candidates: t.n_candidates,
            bandwidth: t.bandwidth,
            space: None,
            review_trials: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub base_url: Option<String>,
    pub model: String,
    pub mock: bool,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub forward_seed: bool,
    pub max_tokens: u32,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            base_url: None,
            model: "mock".into(),
            mock: false,
            max_in_flight: 4,
            max_attempts: 3,
            backoff_ms: 500,
            timeout_secs: 60,
            forward_seed: true,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSettings {
    pub bleu_max_n: usize,
    pub rouge_beta: f64,
    pub embedder: EmbedderKind,
    pub embed_dim: usize,
    pub embed_model: String,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        let m = MetricConfig::default();
        Self {
            bleu_max_n: m.bleu_max_n,
            rouge_beta: m.rouge_beta,
            embedder: EmbedderKind::Hash,
            embed_dim: 64,
            embed_model: "text-embedding".into(),
        }
    }
}

impl MetricsSettings {
    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            bleu_max_n: self.bleu_max_n,
            rouge_beta: self.rouge_beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingSettings {
    pub scale: u8,
    pub reveal: bool,
    pub bind: String,
    /// Minimum mean rating of a good trial; 80% of the scale by default.
    pub good_threshold: Option<f64>,
}

impl Default for RatingSettings {
    fn default() -> Self {
        Self {
            scale: 5,
            reveal: false,
            bind: "127.0.0.1:8080".into(),
            good_threshold: None,
        }
    }
}

impl RatingSettings {
    pub fn threshold(&self) -> f64 {
        self.good_threshold.unwrap_or(0.8 * self.scale as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub factorization: FactorizationConfig,
    pub topics: TopicsConfig,
    pub search: SearchConfig,
    /// Configuration used by the `label` stage.
    pub label: PromptConfig,
    pub gateway: GatewaySettings,
    pub metrics: MetricsSettings,
    pub rating: RatingSettings,
}

impl PipelineConfig {
    /// Resolves relative paths against `base`, typically the directory of
    /// the configuration file.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.paths.corpus,
            &mut self.paths.ground_truth,
            &mut self.paths.templates_dir,
            &mut self.paths.static_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, path) in [
            ("corpus", &self.paths.corpus),
            ("ground_truth", &self.paths.ground_truth),
            ("templates_dir", &self.paths.templates_dir),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(PipelineError::Config(format!(
                        "paths.{name} {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        rating::validate_scale(self.rating.scale)?;
        self.tpe().validate()?;
        Ok(())
    }

    pub fn tpe(&self) -> TpeConfig {
        TpeConfig {
            gamma: self.search.gamma,
            n_startup: self.search.n_startup,
            n_candidates: self.search.n_candidates,
            seed: seed::derive(self.seed, "tpe"),
            bandwidth: self.search.bandwidth,
        }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage)
    }
}

/// Topic labels keyed by topic id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    labels: BTreeMap<usize, String>,
}

impl GroundTruth {
    /// Reads a JSON object whose keys are topic ids or `doc:<id>` anchors.
    /// An anchor names the topic that holds the document, which keeps the
    /// file valid however the factorization happens to order topics.
    pub fn load(path: &Path, clusters: &[TopicCluster]) -> Result<Self> {
        let raw: BTreeMap<String, String> = read_json(path)?;
        let mut labels = BTreeMap::new();
        for (key, label) in raw {
            let topic = if let Some(doc) = key.strip_prefix("doc:") {
                clusters
                    .iter()
                    .find(|c| c.member_ids.iter().any(|m| m == doc))
                    .map(|c| c.topic_id)
                    .ok_or_else(|| {
                        PipelineError::GroundTruth(format!("document {doc:?} is in no topic"))
                    })?
            } else {
                let t: usize = key.trim().parse().map_err(|_| {
                    PipelineError::GroundTruth(format!("key {key:?} is neither a topic id nor doc:<id>"))
                })?;
                if t >= clusters.len() {
                    return Err(PipelineError::GroundTruth(format!(
                        "topic {t} out of range for {} topics",
                        clusters.len()
                    )));
                }
                t
            };
            if label.trim().is_empty() {
                return Err(PipelineError::GroundTruth(format!("empty label for {key:?}")));
            }
            if let Some(previous) = labels.insert(topic, label.clone()) {
                if previous != label {
                    return Err(PipelineError::GroundTruth(format!(
                        "topic {topic} labeled both {previous:?} and {label:?}"
                    )));
                }
            }
        }
        Ok(Self { labels })
    }

    pub fn from_labels(labels: BTreeMap<usize, String>) -> Self {
        Self { labels }
    }

    /// Only the labels of `topics`; the rest are dropped.
    pub fn restricted(&self, topics: &[usize]) -> Self {
        Self {
            labels: self
                .labels
                .iter()
                .filter(|(t, _)| topics.contains(t))
                .map(|(t, l)| (*t, l.clone()))
                .collect(),
        }
    }

    pub fn get(&self, topic: usize) -> Option<&str> {
        self.labels.get(&topic).map(String::as_str)
    }

    pub fn topics(&self) -> Vec<usize> {
        self.labels.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSummary {
    pub backend: Backend,
    pub latency_ms: f64,
    pub retries: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub topic_id: usize,
    pub template: String,
    pub label: String,
    pub extraction: ExtractionStatus,
    pub manifest_hash: String,
    pub manifest: FeatureManifest,
    pub completion: CompletionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub assignment: TopicAssignment,
    pub split: TopicSplit,
    #[serde(skip)]
    pub clusters: Vec<TopicCluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    pub seed: u64,
    pub model_id: String,
    pub train_topics: Vec<usize>,
    pub clusters_digest: String,
    pub space: SearchSpace,
    pub tpe: TpeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub bleu: f64,
    pub rouge_l_f: f64,
    pub bertscore_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model_id: String,
    pub best_trial_id: u64,
    pub config: PromptConfig,
    pub test_topics: Vec<usize>,
    pub labels: Vec<LabelRecord>,
    pub scores: Vec<ScoreRecord>,
    pub mean: Option<MeanScores>,
    /// Over the held-out topics' labels.
    pub discrimination_test: Option<f64>,
    /// Over every topic: best-trial labels for train topics, held-out
    /// labels for the rest.
    pub discrimination_all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub documents: usize,
    pub vocabulary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicSummary {
    pub topic_id: usize,
    pub size: usize,
    pub split: String,
    pub top_tokens: Vec<String>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n_trials: usize,
    pub n_complete: usize,
    pub n_failed: usize,
    pub best_trial_id: u64,
    pub best_objective: f64,
    pub best_params: Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub mean: Option<MeanScores>,
    pub discrimination_test: Option<f64>,
    pub discrimination_all: Option<f64>,
    pub human_mean: Option<f64>,
    pub n_ratings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub corpus: CorpusSummary,
    pub rank_selection: RankSelectionReport,
    pub topics: Vec<TopicSummary>,
    pub study: Option<StudySummary>,
    pub models: Vec<ModelSummary>,
    pub agreement: Option<crate::metrics::AgreementReport>,
    pub agreement_note: Option<String>,
    pub good_trials: Option<GoodTrials>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_owned(),
        source,
    })
}

/// Pretty JSON with a trailing newline, written via a temporary file.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub struct Pipeline {
    pub config: PipelineConfig,
    out: PathBuf,
    llm: Arc<dyn LlmClient>,
    embedder: Arc<dyn TokenEmbedder>,
    templates: Vec<PromptTemplate>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        out: impl Into<PathBuf>,
        llm: Arc<dyn LlmClient>,
        embedder: Arc<dyn TokenEmbedder>,
    ) -> Result<Self> {
        config.validate()?;
        let mut templates = builtin_templates();
        if let Some(dir) = &config.paths.templates_dir {
            for t in load_templates_dir(dir)? {
                match templates.iter_mut().find(|b| b.id == t.id) {
                    Some(existing) => *existing = t,
                    None => templates.push(t),
                }
            }
        }
        let out = out.into();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        Ok(Self {
            config,
            out,
            llm,
            embedder,
            templates,
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn model_id(&self) -> &str {
        &self.config.gateway.model
    }

    fn require(&self, name: &str, stage: &'static str) -> Result<PathBuf> {
        let path = self.path(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { path, stage })
        }
    }

    fn template(&self, id: &str) -> Result<&PromptTemplate> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| PipelineError::UnknownTemplate(id.to_owned()))
    }

    /// Reads the configured corpus file and writes `corpus.jsonl`.
    pub fn ingest(&self) -> Result<CorpusBundle> {
        let source = self
            .config
            .paths
            .corpus
            .as_ref()
            .ok_or_else(|| PipelineError::Config("paths.corpus is not set".into()))?;
        let bundle = corpus::ingest(source)?;
        write_text(&self.path(CORPUS), &bundle.to_jsonl())?;
        tracing::info!(documents = bundle.len(), "ingested corpus");
        Ok(bundle)
    }

    pub fn load_corpus(&self) -> Result<CorpusBundle> {
        Ok(corpus::ingest(self.require(CORPUS, "ingest")?)?)
    }

    /// Builds TF-IDF, selects the rank and fits the final factorization.
    pub fn factorize(&self) -> Result<(Factorization, RankSelectionReport)> {
        let bundle = self.load_corpus()?;
        let c = &self.config.corpus;
        let vocab = corpus::build_vocabulary(&bundle.documents, c.min_df, c.max_df)?;
        let tfidf = corpus::build_tfidf(&bundle.documents, &vocab)?;
        if !tfidf.zero_columns().is_empty() {
            tracing::warn!(count = tfidf.zero_columns().len(), "documents with no vocabulary tokens");
        }
        let x = tfidf.to_dense();
        let f = &self.config.factorization;
        let k_max = f.k_max.min(x.nrows().min(x.ncols()));
        let report = nmfk_select(
            x.view(),
            NmfkOptions {
                k_min: f.k_min.min(k_max),
                k_max,
                n_resamples: f.n_resamples,
                noise_scale: f.noise_scale,
                stability_threshold: f.stability_threshold,
                statistic: f.statistic,
                max_iters: f.max_iters,
                tol: f.tol,
                inner_updates: f.inner_updates,
                seed: self.config.stage_seed("nmfk"),
            },
        )?;
        let factorization = nmf_multiplicative(
            x.view(),
            report.chosen_k,
            NmfOptions {
                max_iters: f.final_max_iters,
                tol: f.tol,
                seed: self.config.stage_seed("nmf-final"),
                inner_updates: f.inner_updates,
            },
        )?;
        write_json(&self.path(VOCABULARY), &vocab)?;
        factorization.save(self.path(FACTORIZATION))?;
        write_json(&self.path(RANK_SELECTION), &report)?;
        tracing::info!(k = report.chosen_k, error = factorization.relative_error, "factorized");
        Ok((factorization, report))
    }

    fn split_for(&self, k: usize) -> Result<TopicSplit> {
        Ok(match &self.config.topics.train {
            Some(train) => TopicSplit::with_train(k, train)?,
            None => TopicSplit::default_for(k),
        })
    }

    /// Writes one JSON file per topic plus the assignment and split.
    pub fn clusters(&self) -> Result<ClusterSet> {
        let bundle = self.load_corpus()?;
        let vocab: Vocabulary = read_json(&self.require(VOCABULARY, "factorize")?)?;
        let factorization = Factorization::load(self.require(FACTORIZATION, "factorize")?)?;
        let clusters = build_clusters(&factorization, &bundle, &vocab, &self.config.topics.limits())?;
        let assignment = assign_topics(factorization.h.view());
        let split = self.split_for(factorization.k)?;
        let dir = self.path(CLUSTERS_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        for c in &clusters {
            write_json(&dir.join(format!("topic_{:03}.json", c.topic_id)), c)?;
        }
        let set = ClusterSet {
            assignment,
            split,
            clusters,
        };
        write_json(&dir.join(ASSIGNMENT), &set)?;
        Ok(set)
    }

    pub fn load_clusters(&self) -> Result<ClusterSet> {
        let dir = self.path(CLUSTERS_DIR);
        let mut set: ClusterSet = read_json(&self.require(&format!("{CLUSTERS_DIR}/{ASSIGNMENT}"), "clusters")?)?;
        set.clusters = (0..set.assignment.k)
            .map(|t| read_json(&dir.join(format!("topic_{t:03}.json"))))
            .collect::<Result<_>>()?;
        Ok(set)
    }

    fn ground_truth(&self, clusters: &[TopicCluster]) -> Result<GroundTruth> {
        let path = self
            .config
            .paths
            .ground_truth
            .as_ref()
            .ok_or_else(|| PipelineError::Config("paths.ground_truth is not set".into()))?;
        GroundTruth::load(path, clusters)
    }

    fn generation(&self, config: &PromptConfig) -> GenerationParams {
        config.generation(&GenerationParams {
            model_id: self.config.gateway.model.clone(),
            max_tokens: self.config.gateway.max_tokens,
            seed: Some(self.config.stage_seed("generation")),
            ..GenerationParams::default()
        })
    }

    /// Labels `topics` with one prompt configuration. Requests run in
    /// parallel under the client's own in-flight limit.
    pub fn label_topics(
        &self,
        clusters: &[TopicCluster],
        topics: &[usize],
        config: &PromptConfig,
    ) -> Result<Vec<LabelRecord>> {
        let template = self.template(&config.template)?;
        let params = self.generation(config);
        params.validate()?;
        topics
            .par_iter()
            .map(|&t| {
                let cluster = &clusters[t];
                let prompt = render_prompt(template, cluster, &config.selection)?;
                let completion = self.llm.complete(&prompt, &params)?;
                let extracted = extract_answer(&completion.text);
                Ok(LabelRecord {
                    topic_id: t,
                    template: template.id.clone(),
                    label: extracted.label,
                    extraction: extracted.status,
                    manifest_hash: prompt.manifest.digest(),
                    manifest: prompt.manifest,
                    completion: CompletionSummary {
                        backend: completion.backend,
                        latency_ms: completion.latency_ms,
                        retries: completion.retries,
                        prompt_tokens: completion.prompt_tokens,
                        completion_tokens: completion.completion_tokens,
                    },
                })
            })
            .collect()
    }

    fn selection_seed(&self) -> u64 {
        self.config.stage_seed("render")
    }

    /// Labels every topic with `config` and writes `labels.json`.
    pub fn label(&self, config: &PromptConfig) -> Result<Vec<LabelRecord>> {
        let set = self.load_clusters()?;
        let config = PromptConfig {
            selection: crate::prompting::FeatureSelection {
                seed: self.selection_seed(),
                ..config.selection
            },
            ..config.clone()
        };
        let topics: Vec<usize> = (0..set.clusters.len()).collect();
        let labels = self.label_topics(&set.clusters, &topics, &config)?;
        write_json(&self.path(LABELS), &labels)?;
        Ok(labels)
    }

    fn search_space(&self) -> SearchSpace {
        self.config.search.space.clone().unwrap_or_else(|| {
            let ids: Vec<String> = self.templates.iter().map(|t| t.id.clone()).collect();
            prompt_search_space(&ids)
        })
    }

    fn score_trial(
        &self,
        set: &ClusterSet,
        truth: &GroundTruth,
        params: &Params,
    ) -> std::result::Result<TrialOutcome, String> {
        let config = PromptConfig::from_params(params, self.selection_seed()).map_err(|e| e.to_string())?;
        let labels = self
            .label_topics(&set.clusters, &set.split.train, &config)
            .map_err(|e| e.to_string())?;
        let mut topics = Vec::with_capacity(labels.len());
        for l in labels {
            let reference = truth.get(l.topic_id).expect("train topics checked before the study");
            let (bertscore_f, rouge_l_f) = if l.extraction == ExtractionStatus::Failed {
                (-1.0, 0.0)
            } else {
                let b = bert_score(&l.label, reference, self.embedder.as_ref());
                // A label with no scorable tokens counts as a failed extraction.
                (
                    b.map(|s| s.f).unwrap_or(-1.0),
                    rouge_l(&l.label, reference, self.config.metrics.rouge_beta).f,
                )
            };
            topics.push(TopicDetail {
                topic_id: l.topic_id,
                manifest_hash: l.manifest_hash,
                label: l.label,
                extraction: l.extraction,
                bertscore_f,
                rouge_l_f,
            });
        }
        let objective = mean(topics.iter().map(|t| t.bertscore_f)).ok_or("no train topics")?;
        Ok(TrialOutcome { objective, topics })
    }

    fn clusters_digest(set: &ClusterSet) -> String {
        let bytes = serde_json::to_vec(&set.clusters).expect("clusters serialize");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Runs (or resumes) the prompt search over the train topics.
    pub fn optimize(&self) -> Result<StudyResult> {
        let set = self.load_clusters()?;
        if set.split.train.is_empty() {
            return Err(PipelineError::Config("no train topics".into()));
        }
        let truth = self.ground_truth(&set.clusters)?.restricted(&set.split.train);
        let missing: Vec<usize> = set
            .split
            .train
            .iter()
            .copied()
            .filter(|t| truth.get(*t).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::GroundTruth(format!(
                "no label for train topics {missing:?}"
            )));
        }
        let space = self.search_space();
        let meta = StudyMeta {
            seed: self.config.seed,
            model_id: self.model_id().to_owned(),
            train_topics: set.split.train.clone(),
            clusters_digest: Self::clusters_digest(&set),
            space: space.clone(),
            tpe: self.config.tpe(),
        };
        let meta_path = self.path(STUDY_META);
        let study_path = self.path(STUDY);
        if study_path.exists() && meta_path.exists() {
            let previous: StudyMeta = read_json(&meta_path)?;
            if previous != meta {
                return Err(PipelineError::StaleStudy {
                    path: study_path,
                    reason: "configuration, clusters or seed changed".into(),
                });
            }
        }
        write_json(&meta_path, &meta)?;
        let (mut log, history) = StudyLog::open(&study_path)?;
        let result = optimizer::run_study(
            &space,
            &meta.tpe,
            self.config.search.n_trials,
            history,
            Some(&mut log),
            |_, params| self.score_trial(&set, &truth, params),
        )?;
        let best = PromptConfig::from_params(&result.best.params, self.selection_seed())?;
        write_json(&self.path(BEST_CONFIG), &best)?;
        Ok(result)
    }

    fn evaluation_path(&self, model: &str) -> PathBuf {
        self.path(EVALUATIONS_DIR).join(format!("{}.json", file_safe(model)))
    }

    fn scores_path(&self, model: &str) -> PathBuf {
        self.path(EVALUATIONS_DIR).join(format!("{}.scores.json", file_safe(model)))
    }

    /// Labels the held-out topics with the best configuration, scores them
    /// against their ground truth and queues items for human rating.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let study_path = self.require(STUDY, "optimize")?;
        let history = optimizer::replay(&study_path)?;
        let best = best_trial(&history)
            .cloned()
            .ok_or(OptimizerError::AllTrialsFailed(history.len()))?;
        let config: PromptConfig = read_json(&self.require(BEST_CONFIG, "optimize")?)?;
        let set = self.load_clusters()?;
        let test = set.split.test.clone();
        // Only held-out labels are loaded from here on.
        let truth = self.ground_truth(&set.clusters)?.restricted(&test);

        let labels = self.label_topics(&set.clusters, &test, &config)?;
        let metric_config = self.config.metrics.metric_config();
        let mut scores = Vec::new();
        for l in &labels {
            let Some(reference) = truth.get(l.topic_id) else {
                tracing::warn!(topic = l.topic_id, "held-out topic has no ground truth; not scored");
                continue;
            };
            let bertscore = match bert_score(&l.label, reference, self.embedder.as_ref()) {
                Ok(s) => s,
                Err(MetricsError::EmptyTokens(_)) => crate::metrics::Prf {
                    precision: -1.0,
                    recall: -1.0,
                    f: -1.0,
                },
                Err(e) => return Err(e.into()),
            };
            scores.push(ScoreRecord {
                topic_id: l.topic_id,
                trial_id: Some(best.trial_id),
                candidate: l.label.clone(),
                reference: reference.to_owned(),
                bleu: bleu(&l.label, reference, metric_config.bleu_max_n),
                rouge_l: rouge_l(&l.label, reference, metric_config.rouge_beta),
                bertscore,
            });
        }
        let mean_scores = (!scores.is_empty()).then(|| MeanScores {
            bleu: mean(scores.iter().map(|s| s.bleu)).unwrap_or(0.0),
            rouge_l_f: mean(scores.iter().map(|s| s.rouge_l.f)).unwrap_or(0.0),
            bertscore_f: mean(scores.iter().map(|s| s.bertscore.f)).unwrap_or(0.0),
        });
        let test_labels: Vec<&str> = labels.iter().map(|l| l.label.as_str()).collect();
        let mut all_labels: Vec<&str> = best.topics.iter().map(|t| t.label.as_str()).collect();
        all_labels.extend(&test_labels);
        let evaluation = Evaluation {
            model_id: self.model_id().to_owned(),
            best_trial_id: best.trial_id,
            config,
            test_topics: test,
            discrimination_test: discrimination(&test_labels).ok(),
            discrimination_all: discrimination(&all_labels).ok(),
            labels,
            scores,
            mean: mean_scores,
        };
        write_json(&self.evaluation_path(&evaluation.model_id), &evaluation)?;
        write_json(&self.scores_path(&evaluation.model_id), &evaluation.scores)?;
        self.write_items(&set, &history, &evaluation)?;
        Ok(evaluation)
    }

    fn features(manifest: &FeatureManifest) -> FeatureSummary {
        FeatureSummary {
            top_words: manifest.top_words.clone(),
            titles: manifest.titles.clone(),
        }
    }

    /// Adds this evaluation's rating items to `items.jsonl`: the held-out
    /// labels, and the train-topic labels of the best few trials under the
    /// model that ran the study. Items already present are kept as they
    /// are, so existing ratings never lose their item.
    fn write_items(&self, set: &ClusterSet, history: &[TrialRecord], evaluation: &Evaluation) -> Result<()> {
        let model = evaluation.model_id.as_str();
        let study: StudyMeta = read_json(&self.require(STUDY_META, "optimize")?)?;
        let items_path = self.path(rating::ITEMS_FILE);
        let mut items: Vec<RatingItem> = if items_path.exists() {
            rating::load_items(&items_path)?
        } else {
            Vec::new()
        };

        let mut ranked: Vec<&TrialRecord> = history.iter().filter(|t| t.is_complete()).collect();
        ranked.sort_by(|a, b| {
            b.objective
                .partial_cmp(&a.objective)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.trial_id.cmp(&b.trial_id))
        });
        for trial in ranked.into_iter().take(self.config.search.review_trials) {
            let config = PromptConfig::from_params(&trial.params, self.selection_seed())?;
            let template = self.template(&config.template)?;
            for detail in &trial.topics {
                if detail.label.trim().is_empty() {
                    continue;
                }
                let prompt = render_prompt(template, &set.clusters[detail.topic_id], &config.selection)?;
                items.push(RatingItem {
                    item_id: format!("{}/trial-{:04}/topic-{:03}", study.model_id, trial.trial_id, detail.topic_id),
                    trial_id: Some(trial.trial_id),
                    topic_id: detail.topic_id,
                    candidate_label: detail.label.clone(),
                    model_id: Some(study.model_id.clone()),
                    features: Self::features(&prompt.manifest),
                    ground_truth: None,
                    metrics: BTreeMap::from([
                        ("bertscore_f".to_owned(), detail.bertscore_f),
                        ("rouge_l_f".to_owned(), detail.rouge_l_f),
                    ]),
                });
            }
        }
        for l in &evaluation.labels {
            if l.label.trim().is_empty() {
                continue;
            }
            let score = evaluation.scores.iter().find(|s| s.topic_id == l.topic_id);
            items.push(RatingItem {
                item_id: format!("{model}/test/trial-{:04}/topic-{:03}", evaluation.best_trial_id, l.topic_id),
                trial_id: None,
                topic_id: l.topic_id,
                candidate_label: l.label.clone(),
                model_id: Some(model.to_owned()),
                features: Self::features(&l.manifest),
                ground_truth: score.map(|s| s.reference.clone()),
                metrics: score.map_or_else(BTreeMap::new, |s| {
                    BTreeMap::from([
                        ("bleu".to_owned(), s.bleu),
                        ("rouge_l_f".to_owned(), s.rouge_l.f),
                        ("bertscore_f".to_owned(), s.bertscore.f),
                    ])
                }),
            });
        }
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        items.dedup_by(|a, b| a.item_id == b.item_id);
        rating::write_items(&self.out, &items)?;
        Ok(())
    }

    pub fn open_rating_store(&self, reveal: bool) -> Result<RatingStore> {
        self.require(rating::ITEMS_FILE, "evaluate")?;
        Ok(RatingStore::open(&self.out, self.config.rating.scale, reveal)?)
    }

    /// Consolidates every available artifact into `report.json` and a
    /// plain-text summary.
    pub fn report(&self) -> Result<Report> {
        let bundle = self.load_corpus()?;
        let vocab: Vocabulary = read_json(&self.require(VOCABULARY, "factorize")?)?;
        let rank_selection: RankSelectionReport = read_json(&self.require(RANK_SELECTION, "factorize")?)?;
        let set = self.load_clusters()?;

        let history = if self.path(STUDY).exists() {
            optimizer::replay(self.path(STUDY))?
        } else {
            Vec::new()
        };
        let study = best_trial(&history).map(|best| StudySummary {
            n_trials: history.len(),
            n_complete: history.iter().filter(|t| t.is_complete()).count(),
            n_failed: history.iter().filter(|t| !t.is_complete()).count(),
            best_trial_id: best.trial_id,
            best_objective: best.objective.unwrap_or(f64::NAN),
            best_params: best.params.clone(),
        });

        let mut evaluations: Vec<Evaluation> = Vec::new();
        let eval_dir = self.path(EVALUATIONS_DIR);
        if eval_dir.exists() {
            let mut paths: Vec<PathBuf> = fs::read_dir(&eval_dir)
                .map_err(io_err(&eval_dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension().is_some_and(|x| x == "json")
                        && !p.to_string_lossy().ends_with(".scores.json")
                })
                .collect();
            paths.sort();
            for p in paths {
                evaluations.push(read_json(&p)?);
            }
        }

        let labels: Option<Vec<LabelRecord>> = if self.path(LABELS).exists() {
            Some(read_json(&self.path(LABELS))?)
        } else {
            None
        };
        let topics = set
            .clusters
            .iter()
            .map(|c| TopicSummary {
                topic_id: c.topic_id,
                size: c.member_ids.len(),
                split: if set.split.train.contains(&c.topic_id) { "train" } else { "test" }.into(),
                top_tokens: c.top_tokens.iter().take(5).map(|t| t.token.clone()).collect(),
                label: labels
                    .as_ref()
                    .and_then(|ls| ls.iter().find(|l| l.topic_id == c.topic_id))
                    .map(|l| l.label.clone()),
            })
            .collect();

        let store = if self.path(rating::ITEMS_FILE).exists() {
            Some(self.open_rating_store(false)?)
        } else {
            None
        };
        let (human_means, ratings_per_model) = match &store {
            Some(s) => {
                let items: BTreeMap<String, Option<String>> =
                    s.items().into_iter().map(|i| (i.item_id, i.model_id)).collect();
                let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                for r in s.ratings() {
                    let model = items.get(&r.item_id).cloned().flatten().unwrap_or_else(|| "unknown".into());
                    *counts.entry(model).or_default() += 1;
                }
                (s.model_means(), counts)
            }
            None => (BTreeMap::new(), BTreeMap::new()),
        };
        let mut models: Vec<ModelSummary> = evaluations
            .iter()
            .map(|e| ModelSummary {
                model_id: e.model_id.clone(),
                mean: e.mean,
                discrimination_test: e.discrimination_test,
                discrimination_all: e.discrimination_all,
                human_mean: human_means.get(&e.model_id).copied(),
                n_ratings: ratings_per_model.get(&e.model_id).copied().unwrap_or(0),
            })
            .collect();
        for (model, human) in &human_means {
            if !models.iter().any(|m| &m.model_id == model) {
                models.push(ModelSummary {
                    model_id: model.clone(),
                    mean: None,
                    discrimination_test: None,
                    discrimination_all: None,
                    human_mean: Some(*human),
                    n_ratings: ratings_per_model.get(model).copied().unwrap_or(0),
                });
            }
        }

        let (agreement, agreement_note, good_trials) = match &store {
            Some(s) => {
                let (agreement, note) = match s.agreement_report() {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                let good = rating::filter_good_trials(&s.trial_means(), self.config.rating.threshold(), &history);
                (agreement, note, Some(good))
            }
            None => (None, Some("no rating items yet".to_owned()), None),
        };

        let report = Report {
            seed: self.config.seed,
            corpus: CorpusSummary {
                documents: bundle.len(),
                vocabulary: vocab.len(),
            },
            rank_selection,
            topics,
            study,
            models,
            agreement,
            agreement_note,
            good_trials,
        };
        write_json(&self.path(REPORT), &report)?;
        write_text(&self.path(REPORT_TEXT), &render_report(&report))?;
        Ok(report)
    }

    /// Every stage in order, finishing with the report.
    pub fn run_all(&self) -> Result<Report> {
        self.ingest()?;
        self.factorize()?;
        self.clusters()?;
        self.label(&self.config.label.clone())?;
        self.optimize()?;
        self.evaluate()?;
        self.report()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.3}"))
}

/// Plain-text rendering of a report.
pub fn render_report(r: &Report) -> String {
    let mut s = String::new();
    let rs = &r.rank_selection;
    s.push_str(&format!(
        "Corpus: {} documents, {} vocabulary tokens (seed {})\n",
        r.corpus.documents, r.corpus.vocabulary, r.seed
    ));
    s.push_str(&format!("Chosen rank: k = {}\n\n", rs.chosen_k));
    s.push_str("  k  stability  min-cluster  rel-error\n");
    for row in &rs.rows {
        s.push_str(&format!(
            "{:>3}  {:>9.3}  {:>11.3}  {:>9.4}\n",
            row.k, row.stability, row.min_cluster_stability, row.relative_error
        ));
    }
    s.push_str("\nTopics\n");
    for t in &r.topics {
        s.push_str(&format!(
            "  {:>3} [{}] n={:<4} {}{}\n",
            t.topic_id,
            t.split,
            t.size,
            t.top_tokens.join(", "),
            t.label.as_ref().map(|l| format!("  => {l}")).unwrap_or_default()
        ));
    }
    if let Some(study) = &r.study {
        s.push_str(&format!(
            "\nPrompt search: {} trials ({} complete, {} failed); best trial {} with mean BERTScore F {:.4}\n",
            study.n_trials, study.n_complete, study.n_failed, study.best_trial_id, study.best_objective
        ));
        for (k, v) in &study.best_params {
            s.push_str(&format!("  {k} = {v}\n"));
        }
    }
    if !r.models.is_empty() {
        s.push_str("\nModel            BLEU  ROUGE-L  BERTScore  discr.  human  ratings\n");
        for m in &r.models {
            s.push_str(&format!(
                "{:<15} {:>5}  {:>7}  {:>9}  {:>6}  {:>5}  {:>7}\n",
                m.model_id,
                fmt_opt(m.mean.map(|x| x.bleu)),
                fmt_opt(m.mean.map(|x| x.rouge_l_f)),
                fmt_opt(m.mean.map(|x| x.bertscore_f)),
                fmt_opt(m.discrimination_all),
                fmt_opt(m.human_mean),
                m.n_ratings
            ));
        }
    }
    match &r.agreement {
        Some(a) => {
            s.push_str(&format!("\nInter-annotator agreement (Cohen's kappa, {:?} weighting)\n", a.weighting));
            s.push_str(&format!("  mean kappa: {}\n", fmt_opt(a.mean_kappa)));
            for (g, k) in &a.group_mean_kappa {
                s.push_str(&format!("  group {g}: {}\n", fmt_opt(*k)));
            }
            s.push_str("\nMetric vs mean human score (r^2)\n");
            for (metric, v) in &a.r2 {
                s.push_str(&format!("  {metric:<12} {}\n", fmt_opt(*v)));
            }
        }
        None => {
            if let Some(note) = &r.agreement_note {
                s.push_str(&format!("\nAgreement: not available ({note})\n"));
            }
        }
    }
    if let Some(g) = &r.good_trials {
        s.push_str(&format!(
            "\nGood trials (mean rating >= {:.2}): {:?}\n",
            g.threshold, g.trial_ids
        ));
    }
    s
}

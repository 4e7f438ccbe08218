//! Topic modeling and automatic topic labeling.
//!
//! The crate turns a document corpus into a non-negative TF-IDF matrix,
//! factorizes it with NMF (choosing the rank from factor stability under
//! bootstrap perturbation), assembles per-topic feature bundles, and labels
//! each topic by rendering Chain-of-Thought prompts for an LLM. Prompt
//! configurations are searched with a Tree-structured Parzen Estimator and
//! refined through a human rating loop.
//!
//! Modules map onto pipeline stages:
//!
//! - [`corpus`]: ingestion, tokenization, vocabulary, TF-IDF
//! - [`factorization`]: multiplicative-update NMF and rank selection
//! - [`topics`]: topic assignment, centroid ranking, feature bundles
//! - [`prompting`]: templates, prompt rendering, answer extraction
//! - [`gateway`]: chat-completion client and deterministic mock
//! - [`metrics`]: BLEU, ROUGE-L, BERTScore, discrimination, agreement
//! - [`optimizer`]: TPE search over the prompt space
//! - [`rating`]: durable rating store and agreement reports
//! - [`pipeline`]: stage orchestration over an output directory

pub mod corpus;
pub mod factorization;
pub mod gateway;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod prompting;
pub mod rating;
pub mod seed;
pub mod topics;

pub use corpus::{CorpusBundle, Document, TfidfMatrix, Vocabulary};
pub use factorization::{Factorization, RankSelectionReport};
pub use gateway::{Completion, GenerationParams, LlmClient, MockLlm};
pub use metrics::{ScoreReport, TokenEmbedder};
pub use optimizer::{SearchSpace, TpeConfig, TrialRecord};
pub use prompting::{ExtractionResult, FeatureSelection, PromptTemplate, RenderedPrompt};
pub use rating::{Rating, RatingItem, RatingStore};
pub use topics::{TopicAssignment, TopicCluster};

//! Per-topic feature bundles derived from a factorization.
//!
//! Documents are assigned to topics by a column-wise argmax over `H`, ranked
//! within their topic by distance to the topic centroid in (L1-normalized)
//! `H` space, and summarized with the topic's word distribution from `W`,
//! frequent n-grams and pooled keywords.

use std::collections::{BTreeMap, HashMap};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, CorpusBundle, Vocabulary};
use crate::factorization::Factorization;

#[derive(Debug, Error)]
pub enum TopicError {
    #[error("topic {0} has an all-zero W column")]
    ZeroColumn(usize),
    #[error("topic {topic} out of range for k = {k}")]
    TopicOutOfRange { topic: usize, k: usize },
    #[error("factorization covers {factorization} documents but the corpus has {corpus}")]
    CorpusMismatch { factorization: usize, corpus: usize },
    #[error("factorization has {factorization} rows but the vocabulary has {vocabulary} tokens")]
    VocabularyMismatch { factorization: usize, vocabulary: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicAssignment {
    /// Topic per document, in corpus order.
    pub topics: Vec<usize>,
    /// Winning `H` coordinate per document.
    pub weights: Vec<f64>,
    /// Documents whose `H` column is all zero; they default to topic 0.
    pub degenerate: Vec<usize>,
    pub k: usize,
}

impl TopicAssignment {
    pub fn members(&self, topic: usize) -> Vec<usize> {
        self.topics
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t == topic)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &t in &self.topics {
            counts[t] += 1;
        }
        counts
    }
}

/// Column-wise argmax over `H`; ties go to the lowest topic index.
pub fn assign_topics(h: ArrayView2<f64>) -> TopicAssignment {
    let mut topics = Vec::with_capacity(h.ncols());
    let mut weights = Vec::with_capacity(h.ncols());
    let mut degenerate = Vec::new();
    for (j, col) in h.columns().into_iter().enumerate() {
        let (best, value) = col
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        if col.iter().all(|&v| v == 0.0) {
            degenerate.push(j);
        }
        topics.push(best);
        weights.push(value.max(0.0));
    }
    TopicAssignment {
        topics,
        weights,
        degenerate,
        k: h.nrows(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token: String,
    pub probability: f64,
}

/// `p(w | k)`: the topic's `W` column normalized to sum to one, sorted by
/// descending probability with ties in lexicographic token order.
pub fn topic_word_distribution(
    w: ArrayView2<f64>,
    vocab: &Vocabulary,
    topic: usize,
) -> Result<Vec<TokenWeight>, TopicError> {
    if topic >= w.ncols() {
        return Err(TopicError::TopicOutOfRange {
            topic,
            k: w.ncols(),
        });
    }
    let col = w.column(topic);
    let total: f64 = col.sum();
    if !(total > 0.0) {
        return Err(TopicError::ZeroColumn(topic));
    }
    let mut dist: Vec<TokenWeight> = col
        .iter()
        .enumerate()
        .map(|(i, &v)| TokenWeight {
            token: vocab.token(i).to_owned(),
            probability: v / total,
        })
        .collect();
    dist.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.token.cmp(&b.token))
    });
    Ok(dist)
}

/// Orders `members` (column indices into `H`) by Euclidean distance to the
/// centroid of their L1-normalized `H` columns, ties by document id.
pub fn centroid_ranking(h: ArrayView2<f64>, members: &[usize], doc_ids: &[String]) -> Vec<usize> {
    if members.is_empty() {
        return Vec::new();
    }
    let k = h.nrows();
    let points: Vec<Vec<f64>> = members
        .iter()
        .map(|&j| {
            let col = h.column(j);
            let l1: f64 = col.iter().map(|v| v.abs()).sum();
            if l1 > 0.0 {
                col.iter().map(|v| v / l1).collect()
            } else {
                vec![0.0; k]
            }
        })
        .collect();
    let mut centroid = vec![0.0; k];
    for p in &points {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    for c in &mut centroid {
        *c /= members.len() as f64;
    }
    let mut ranked: Vec<(f64, usize)> = points
        .iter()
        .zip(members)
        .map(|(p, &j)| {
            let d = p
                .iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (d, j)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| doc_ids[a.1].cmp(&doc_ids[b.1])));
    ranked.into_iter().map(|(_, j)| j).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramCount {
    pub ngram: String,
    pub count: usize,
}

/// Counts contiguous token n-grams over the given abstracts and keeps the
/// `top_m` most frequent, ties in lexicographic order.
pub fn extract_ngrams(abstracts: &[&str], n_values: &[usize], top_m: usize) -> Vec<NgramCount> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in abstracts {
        let tokens = tokenize(text);
        for &n in n_values {
            if n == 0 || tokens.len() < n {
                continue;
            }
            for window in tokens.windows(n) {
                *counts.entry(window.join(" ")).or_insert(0) += 1;
            }
        }
    }
    let mut ngrams: Vec<NgramCount> = counts
        .into_iter()
        .map(|(ngram, count)| NgramCount { ngram, count })
        .collect();
    ngrams.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.ngram.cmp(&b.ngram)));
    ngrams.truncate(top_m);
    ngrams
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordCount {
    pub keyword: String,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLimits {
    pub top_tokens: usize,
    pub top_ngrams: usize,
    /// Number of titles and abstracts kept as document views.
    pub top_docs: usize,
    pub top_keywords: usize,
    /// When false, members keep corpus order instead of centroid order.
    pub order_by_centroid: bool,
}

impl Default for ClusterLimits {
    fn default() -> Self {
        Self {
            top_tokens: 20,
            top_ngrams: 10,
            top_docs: 10,
            top_keywords: 10,
            order_by_centroid: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicCluster {
    pub topic_id: usize,
    pub member_ids: Vec<String>,
    pub top_tokens: Vec<TokenWeight>,
    pub top_ngrams: Vec<NgramCount>,
    pub top_titles: Vec<String>,
    pub top_abstracts: Vec<String>,
    pub keywords: Vec<KeywordCount>,
}

impl TopicCluster {
    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

fn check_shapes(
    factorization: &Factorization,
    corpus: &CorpusBundle,
    vocab: &Vocabulary,
) -> Result<(), TopicError> {
    if factorization.n() != corpus.len() {
        return Err(TopicError::CorpusMismatch {
            factorization: factorization.n(),
            corpus: corpus.len(),
        });
    }
    if factorization.m() != vocab.len() {
        return Err(TopicError::VocabularyMismatch {
            factorization: factorization.m(),
            vocabulary: vocab.len(),
        });
    }
    Ok(())
}

pub fn build_cluster(
    factorization: &Factorization,
    corpus: &CorpusBundle,
    vocab: &Vocabulary,
    assignment: &TopicAssignment,
    topic_id: usize,
    limits: &ClusterLimits,
) -> Result<TopicCluster, TopicError> {
    check_shapes(factorization, corpus, vocab)?;
    if topic_id >= factorization.k {
        return Err(TopicError::TopicOutOfRange {
            topic: topic_id,
            k: factorization.k,
        });
    }
    let docs = &corpus.documents;
    let members = assignment.members(topic_id);
    let ordered = if limits.order_by_centroid {
        let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
        centroid_ranking(factorization.h.view(), &members, &ids)
    } else {
        members
    };

    let mut top_tokens = topic_word_distribution(factorization.w.view(), vocab, topic_id)?;
    top_tokens.truncate(limits.top_tokens);

    let abstracts: Vec<&str> = ordered.iter().map(|&j| docs[j].abstract_text.as_str()).collect();
    let top_ngrams = extract_ngrams(&abstracts, &[2, 3], limits.top_ngrams);

    let mut keyword_counts: BTreeMap<String, usize> = BTreeMap::new();
    for &j in &ordered {
        for kw in &docs[j].keywords {
            let kw = kw.trim().to_lowercase();
            if !kw.is_empty() {
                *keyword_counts.entry(kw).or_insert(0) += 1;
            }
        }
    }
    let mut keywords: Vec<KeywordCount> = keyword_counts
        .into_iter()
        .map(|(keyword, count)| KeywordCount { keyword, count })
        .collect();
    keywords.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.keyword.cmp(&b.keyword)));
    keywords.truncate(limits.top_keywords);

    Ok(TopicCluster {
        topic_id,
        member_ids: ordered.iter().map(|&j| docs[j].id.clone()).collect(),
        top_tokens,
        top_ngrams,
        top_titles: ordered
            .iter()
            .take(limits.top_docs)
            .map(|&j| docs[j].title.clone())
            .collect(),
        top_abstracts: ordered
            .iter()
            .take(limits.top_docs)
            .map(|&j| docs[j].abstract_text.clone())
            .collect(),
        keywords,
    })
}

/// Builds every topic's cluster, in topic order.
pub fn build_clusters(
    factorization: &Factorization,
    corpus: &CorpusBundle,
    vocab: &Vocabulary,
    limits: &ClusterLimits,
) -> Result<Vec<TopicCluster>, TopicError> {
    check_shapes(factorization, corpus, vocab)?;
    let assignment = assign_topics(factorization.h.view());
    (0..factorization.k)
        .map(|t| build_cluster(factorization, corpus, vocab, &assignment, t, limits))
        .collect()
}

/// Train/test split over topic ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl TopicSplit {
    /// First `⌈k/4⌉` topics train, the rest test.
    pub fn default_for(k: usize) -> Self {
        let n_train = k.div_ceil(4);
        Self {
            train: (0..n_train).collect(),
            test: (n_train..k).collect(),
        }
    }

    /// Explicit train ids; every other topic below `k` is test.
    pub fn with_train(k: usize, train: &[usize]) -> Result<Self, TopicError> {
        if let Some(&bad) = train.iter().find(|&&t| t >= k) {
            return Err(TopicError::TopicOutOfRange { topic: bad, k });
        }
        let mut train = train.to_vec();
        train.sort_unstable();
        train.dedup();
        let test = (0..k).filter(|t| !train.contains(t)).collect();
        Ok(Self { train, test })
    }
}

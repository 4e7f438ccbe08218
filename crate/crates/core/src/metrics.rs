//! Label scoring and agreement statistics.
//!
//! Candidate labels are compared with reference labels using BLEU, ROUGE-L
//! and an embedding-based BERTScore. Agreement between human raters is
//! measured with Cohen's kappa and the fit between humans and metrics with
//! the squared Pearson correlation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};

pub const BLEU_EPSILON: f64 = 1e-9;
pub const DEFAULT_MAX_N: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} has no tokens after metric tokenization")]
    EmptyTokens(&'static str),
    #[error("embedder failed: {0}")]
    Embedder(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("kappa undefined: chance agreement is 1 but observed agreement is not")]
    KappaUndefined,
    #[error("no pair of raters shares a rated item")]
    InsufficientOverlap,
}

/// Lowercases and splits on anything that is not alphanumeric. Unlike the
/// corpus tokenizer nothing is dropped.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with clipped n-gram precisions and a brevity penalty.
///
/// Orders longer than the candidate have no n-grams to score and are left
/// out of the geometric mean; orders with zero matches contribute the
/// floor `1e-9`.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> f64 {
    let cand = metric_tokens(candidate);
    let refr = metric_tokens(reference);
    if cand.is_empty() || refr.is_empty() || max_n == 0 {
        return 0.0;
    }
    let orders = max_n.min(cand.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand_counts = ngram_counts(&cand, n);
        let ref_counts = ngram_counts(&refr, n);
        let total = (cand.len() + 1 - n) as f64;
        let clipped: usize = cand_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if clipped == 0 {
            BLEU_EPSILON / total
        } else {
            clipped as f64 / total
        };
        log_sum += precision.ln();
    }
    let c = cand.len() as f64;
    let r = refr.len() as f64;
    let brevity = (1.0 - r / c).min(0.0).exp();
    (brevity * (log_sum / orders as f64).exp()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based precision, recall and F-beta.
pub fn rouge_l(candidate: &str, reference: &str, beta: f64) -> Prf {
    let cand = metric_tokens(candidate);
    let refr = metric_tokens(reference);
    if cand.is_empty() || refr.is_empty() {
        return Prf::default();
    }
    let l = lcs_len(&cand, &refr);
    if l == 0 {
        return Prf::default();
    }
    let (l, c, r) = (l as f64, cand.len() as f64, refr.len() as f64);
    let b2 = beta * beta;
    Prf {
        precision: l / c,
        recall: l / r,
        // (1+b²)pr/(r+b²p) with p = l/c and r = l/r, reduced to one division.
        f: (1.0 + b2) * l / (c + b2 * r),
    }
}

/// Maps text to one unit vector per metric token.
pub trait TokenEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<Vec<f64>>, MetricsError>;
}

/// Context-free embedder: each token gets a fixed pseudo-random Gaussian
/// direction seeded by the hash of the token.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

impl HashEmbedder {
    pub fn vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let v: Vec<f64> = (0..self.dim.max(1))
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalize(v)
    }
}

impl TokenEmbedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<Vec<f64>>, MetricsError> {
        Ok(metric_tokens(text).iter().map(|t| self.vector(t)).collect())
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Per-token vectors from an `/embeddings` endpoint, sent through the
/// gateway so the retry and in-flight limits apply.
pub struct RemoteEmbedder {
    gateway: Arc<Gateway>,
    model: String,
}

impl RemoteEmbedder {
    pub fn new(gateway: Arc<Gateway>, model: impl Into<String>) -> Self {
        Self {
            gateway,
            model: model.into(),
        }
    }
}

impl TokenEmbedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<Vec<f64>>, MetricsError> {
        let tokens = metric_tokens(text);
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let outcome = self
            .gateway
            .post("embeddings", &json!({"model": self.model, "input": tokens}))?;
        let data = outcome
            .body
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| MetricsError::Embedder("response has no data array".into()))?;
        if data.len() != tokens.len() {
            return Err(MetricsError::Embedder(format!(
                "expected {} vectors, got {}",
                tokens.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|item| {
                let v: Vec<f64> = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| MetricsError::Embedder("missing embedding".into()))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| MetricsError::Embedder("non-numeric value".into())))
                    .collect::<Result<_, _>>()?;
                if v.iter().all(|x| *x == 0.0) {
                    return Err(MetricsError::Embedder("zero vector".into()));
                }
                Ok(normalize(v))
            })
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Harmonic mean extended to [-1, 1]: same-sign inputs give the signed
/// harmonic mean of their magnitudes, mixed signs give 0.
fn signed_harmonic(p: f64, r: f64) -> f64 {
    if p > 0.0 && r > 0.0 {
        2.0 * p * r / (p + r)
    } else if p < 0.0 && r < 0.0 {
        -2.0 * p * r / (-p - r)
    } else {
        0.0
    }
}

/// Greedy-matching BERTScore without idf weighting or baseline rescaling.
pub fn bert_score(
    candidate: &str,
    reference: &str,
    embedder: &dyn TokenEmbedder,
) -> Result<Prf, MetricsError> {
    let cand = embedder.embed(candidate)?;
    let refr = embedder.embed(reference)?;
    if cand.is_empty() {
        return Err(MetricsError::EmptyTokens("candidate"));
    }
    if refr.is_empty() {
        return Err(MetricsError::EmptyTokens("reference"));
    }
    let sim: Vec<Vec<f64>> = cand
        .iter()
        .map(|c| refr.iter().map(|r| cosine(c, r)).collect())
        .collect();
    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / cand.len() as f64;
    let recall = (0..refr.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / refr.len() as f64;
    Ok(Prf {
        precision,
        recall,
        f: signed_harmonic(precision, recall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub bleu_max_n: usize,
    pub rouge_beta: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bleu_max_n: DEFAULT_MAX_N,
            rouge_beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu: f64,
    pub rouge_l: Prf,
    pub bertscore: Prf,
}

impl ScoreReport {
    pub fn compute(
        candidate: &str,
        reference: &str,
        embedder: &dyn TokenEmbedder,
        config: &MetricConfig,
    ) -> Result<Self, MetricsError> {
        Ok(Self {
            bleu: bleu(candidate, reference, config.bleu_max_n),
            rouge_l: rouge_l(candidate, reference, config.rouge_beta),
            bertscore: bert_score(candidate, reference, embedder)?,
        })
    }

    /// Named scalar view used for metric-vs-rating correlations.
    pub fn named(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("bleu".to_owned(), self.bleu),
            ("rouge_l_f".to_owned(), self.rouge_l.f),
            ("bertscore_f".to_owned(), self.bertscore.f),
        ])
    }
}

/// One line of a score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub topic_id: usize,
    pub trial_id: Option<u64>,
    pub candidate: String,
    pub reference: String,
    pub bleu: f64,
    pub rouge_l: Prf,
    pub bertscore: Prf,
}

/// One minus the mean pairwise Jaccard similarity of the labels' unigram
/// sets.
pub fn discrimination(labels: &[impl AsRef<str>]) -> Result<f64, MetricsError> {
    if labels.len() < 2 {
        return Err(MetricsError::TooFew {
            needed: 2,
            got: labels.len(),
        });
    }
    let sets: Vec<BTreeSet<String>> = labels
        .iter()
        .map(|l| metric_tokens(l.as_ref()).into_iter().collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let union = sets[i].union(&sets[j]).count();
            let jaccard = if union == 0 {
                1.0
            } else {
                sets[i].intersection(&sets[j]).count() as f64 / union as f64
            };
            total += jaccard;
            pairs += 1;
        }
    }
    Ok(1.0 - total / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaWeighting {
    #[default]
    None,
    /// Disagreement weighted by |a - b| over the observed rating span.
    Linear,
}

pub fn cohen_kappa(a: &[i64], b: &[i64], weighting: KappaWeighting) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let n = a.len() as i128;
    let mut count_a: BTreeMap<i64, i128> = BTreeMap::new();
    let mut count_b: BTreeMap<i64, i128> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *count_a.entry(x).or_default() += 1;
        *count_b.entry(y).or_default() += 1;
    }
    match weighting {
        KappaWeighting::None => {
            // Integer form of (p_o - p_e)/(1 - p_e), exact for small inputs.
            let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as i128;
            let chance: i128 = count_a
                .iter()
                .map(|(k, ca)| ca * count_b.get(k).copied().unwrap_or(0))
                .sum();
            let numer = n * agree - chance;
            let denom = n * n - chance;
            if denom == 0 {
                return if agree == n { Ok(1.0) } else { Err(MetricsError::KappaUndefined) };
            }
            Ok(numer as f64 / denom as f64)
        }
        KappaWeighting::Linear => {
            let lo = *count_a.keys().chain(count_b.keys()).min().expect("non-empty");
            let hi = *count_a.keys().chain(count_b.keys()).max().expect("non-empty");
            if lo == hi {
                return Ok(1.0);
            }
            // Disagreement weight |x - y| / (hi - lo); the span cancels in
            // the ratio below, so raw absolute differences are summed.
            let observed: i128 = a.iter().zip(b).map(|(x, y)| (x - y).abs() as i128).sum();
            let expected: i128 = count_a
                .iter()
                .flat_map(|(x, ca)| count_b.iter().map(move |(y, cb)| ca * cb * (x - y).abs() as i128))
                .sum();
            if expected == 0 {
                return if observed == 0 { Ok(1.0) } else { Err(MetricsError::KappaUndefined) };
            }
            Ok(1.0 - (n * observed) as f64 / expected as f64)
        }
    }
}

pub fn pearson_r2(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooFew {
            needed: 2,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("xs"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance("ys"));
    }
    Ok((sxy * sxy / (sxx * syy)).clamp(0.0, 1.0))
}

/// One observed score, as fed to [`agreement_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatedScore<'a> {
    pub rater: &'a str,
    pub group: Option<&'a str>,
    pub item: &'a str,
    pub score: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub raters: Vec<String>,
    /// Symmetric, unit diagonal; `None` where two raters share no item or
    /// kappa is undefined.
    pub kappa: Vec<Vec<Option<f64>>>,
    pub weighting: KappaWeighting,
    pub mean_kappa: Option<f64>,
    pub group_mean_kappa: BTreeMap<String, Option<f64>>,
    /// Squared correlation of each metric with the per-item mean rating.
    pub r2: BTreeMap<String, Option<f64>>,
    pub rated_items: usize,
}

pub const DEFAULT_GROUP: &str = "default";

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Pairwise kappa over co-rated items and metric-vs-rating fits.
///
/// `scores` must hold at most one entry per (rater, item). A rater's group
/// is the last group label seen for them.
pub fn agreement_report(
    scores: &[RatedScore<'_>],
    item_metrics: &BTreeMap<String, BTreeMap<String, f64>>,
    weighting: KappaWeighting,
) -> Result<AgreementReport, MetricsError> {
    let mut by_rater: BTreeMap<&str, BTreeMap<&str, i64>> = BTreeMap::new();
    let mut groups: BTreeMap<&str, &str> = BTreeMap::new();
    let mut by_item: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in scores {
        by_rater.entry(s.rater).or_default().insert(s.item, s.score);
        groups.insert(s.rater, s.group.unwrap_or(DEFAULT_GROUP));
        by_item.entry(s.item).or_default().push(s.score as f64);
    }
    let raters: Vec<&str> = by_rater.keys().copied().collect();
    let m = raters.len();
    let mut kappa = vec![vec![None; m]; m];
    let mut any_overlap = false;
    for i in 0..m {
        kappa[i][i] = Some(1.0);
        for j in i + 1..m {
            let (ri, rj) = (&by_rater[raters[i]], &by_rater[raters[j]]);
            let (a, b): (Vec<i64>, Vec<i64>) = ri
                .iter()
                .filter_map(|(item, x)| rj.get(item).map(|y| (*x, *y)))
                .unzip();
            if a.is_empty() {
                continue;
            }
            any_overlap = true;
            let k = cohen_kappa(&a, &b, weighting).ok();
            kappa[i][j] = k;
            kappa[j][i] = k;
        }
    }
    if !any_overlap {
        return Err(MetricsError::InsufficientOverlap);
    }

    let matrix = &kappa;
    let pair_mean = |members: &[usize]| {
        let values: Vec<f64> = members
            .iter()
            .enumerate()
            .flat_map(|(x, &i)| members[x + 1..].iter().filter_map(move |&j| matrix[i][j]))
            .collect();
        mean(&values)
    };
    let all: Vec<usize> = (0..m).collect();
    let mut group_members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in raters.iter().enumerate() {
        group_members.entry(groups[r].to_owned()).or_default().push(i);
    }
    let group_mean_kappa = group_members
        .iter()
        .map(|(g, members)| (g.clone(), pair_mean(members)))
        .collect();

    let metric_names: BTreeSet<&String> = item_metrics.values().flat_map(|m| m.keys()).collect();
    let r2 = metric_names
        .into_iter()
        .map(|name| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = by_item
                .iter()
                .filter_map(|(item, ratings)| {
                    let metric = item_metrics.get(*item)?.get(name)?;
                    Some((*metric, mean(ratings)?))
                })
                .unzip();
            (name.clone(), pearson_r2(&xs, &ys).ok())
        })
        .collect();

    let mean_kappa = pair_mean(&all);
    Ok(AgreementReport {
        mean_kappa,
        raters: raters.into_iter().map(str::to_owned).collect(),
        kappa,
        weighting,
        group_mean_kappa,
        r2,
        rated_items: by_item.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Each distinct token on its own axis, in order of first appearance.
    struct OneHot;

    impl TokenEmbedder for OneHot {
        fn embed(&self, text: &str) -> Result<Vec<Vec<f64>>, MetricsError> {
            let axis = |t: &str| match t {
                "a" => 0,
                "b" => 1,
                "c" => 2,
                _ => 3,
            };
            Ok(metric_tokens(text)
                .iter()
                .map(|t| {
                    let mut v = vec![0.0; 4];
                    v[axis(t)] = 1.0;
                    v
                })
                .collect())
        }
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("graph neural networks", "Graph neural networks", 4), 1.0);
        let v = bleu("the cat", "the cat sat", 2);
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.6065).abs() < 1e-4);
        assert!(bleu("alpha beta", "gamma delta", 2) < 1e-8);
        // Default order 4 on a two-token candidate scores the same.
        assert_eq!(bleu("the cat", "the cat sat", 4), v);
        assert_eq!(bleu("", "x", 4), 0.0);
    }

    #[test]
    fn bleu_clips_repeats() {
        // "the the the" against "the cat": clipped unigram 1/3.
        let v = bleu("the the the", "the cat", 1);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let s = rouge_l(
            "Ontology Construction Management and Extraction",
            "Domain Ontology Construction",
            1.0,
        );
        assert_eq!(s.precision, 2.0 / 5.0);
        assert_eq!(s.recall, 2.0 / 3.0);
        assert_eq!(s.f, 0.5);
        assert_eq!(rouge_l("a b c", "A, b c", 1.0), Prf { precision: 1.0, recall: 1.0, f: 1.0 });
        assert_eq!(rouge_l("a b", "c d", 1.0), Prf::default());
    }

    #[test]
    fn rouge_beta_weights_recall() {
        let s = rouge_l("a b c d", "a b", 2.0);
        let expected = 5.0 * s.precision * s.recall / (s.recall + 4.0 * s.precision);
        assert!((s.f - expected).abs() < 1e-15);
    }

    #[test]
    fn bertscore_examples() {
        let s = bert_score("a b", "a c", &OneHot).unwrap();
        assert_eq!(s, Prf { precision: 0.5, recall: 0.5, f: 0.5 });
        let h = HashEmbedder::default();
        let s = bert_score("knowledge graph", "knowledge graph", &h).unwrap();
        assert!((s.f - 1.0).abs() < 1e-12);
        let ab = bert_score("a b b", "a c", &OneHot).unwrap();
        let ba = bert_score("a c", "a b b", &OneHot).unwrap();
        assert_eq!((ab.precision, ab.recall, ab.f), (ba.recall, ba.precision, ba.f));
        assert!(matches!(bert_score("!!", "a", &h), Err(MetricsError::EmptyTokens("candidate"))));
        assert!(matches!(bert_score("a", "", &h), Err(MetricsError::EmptyTokens("reference"))));
    }

    #[test]
    fn signed_harmonic_cases() {
        assert_eq!(signed_harmonic(0.5, 0.5), 0.5);
        assert_eq!(signed_harmonic(-0.5, -0.5), -0.5);
        assert_eq!(signed_harmonic(0.5, -0.2), 0.0);
        assert_eq!(signed_harmonic(0.0, 0.0), 0.0);
    }

    #[test]
    fn hash_embedder_is_unit_and_deterministic() {
        let h = HashEmbedder { dim: 32 };
        let a = h.embed("Topic, modeling").unwrap();
        assert_eq!(a.len(), 2);
        for v in &a {
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        assert_eq!(a, h.embed("topic modeling").unwrap());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn discrimination_examples() {
        assert_eq!(discrimination(&["a", "a"]).unwrap(), 0.0);
        assert_eq!(discrimination(&["a b", "c d"]).unwrap(), 1.0);
        let v = discrimination(&["graph nets", "graph flows", "query planners"]).unwrap();
        assert!((v - (1.0 - (1.0 / 3.0) / 3.0)).abs() < 1e-12);
        assert!(discrimination(&["solo"]).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&[1, 1, 2, 2], &[1, 2, 2, 2], KappaWeighting::None).unwrap(), 0.5);
        assert_eq!(cohen_kappa(&[1, 2, 3], &[1, 2, 3], KappaWeighting::None).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[2, 2], &[2, 2], KappaWeighting::None).unwrap(), 1.0);
        assert!(matches!(
            cohen_kappa(&[1, 2], &[1], KappaWeighting::None),
            Err(MetricsError::LengthMismatch(2, 1))
        ));
        assert!(cohen_kappa(&[], &[], KappaWeighting::None).is_err());
        assert_eq!(cohen_kappa(&[1, 3, 5], &[1, 3, 5], KappaWeighting::Linear).unwrap(), 1.0);
    }

    #[test]
    fn linear_kappa_matches_direct_formula() {
        // Direct weighted formula with w_ij = 1 - |i-j|/(K-1) on a 3-point scale.
        let a = [1, 2, 3, 3, 2, 1, 2, 3];
        let b = [1, 3, 3, 2, 2, 2, 1, 3];
        let k = 3usize;
        let n = a.len() as f64;
        let w = |i: usize, j: usize| 1.0 - (i as f64 - j as f64).abs() / (k as f64 - 1.0);
        let mut obs = vec![vec![0.0; k]; k];
        for (x, y) in a.iter().zip(&b) {
            obs[*x as usize - 1][*y as usize - 1] += 1.0 / n;
        }
        let row: Vec<f64> = (0..k).map(|i| obs[i].iter().sum()).collect();
        let col: Vec<f64> = (0..k).map(|j| (0..k).map(|i| obs[i][j]).sum()).collect();
        let (mut po, mut pe) = (0.0, 0.0);
        for i in 0..k {
            for j in 0..k {
                po += w(i, j) * obs[i][j];
                pe += w(i, j) * row[i] * col[j];
            }
        }
        let expected = (po - pe) / (1.0 - pe);
        let got = cohen_kappa(&a, &b, KappaWeighting::Linear).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn kappa_near_zero_for_independent_raters() {
        let mut rng = crate::seed::rng(7);
        let a: Vec<i64> = (0..10_000).map(|_| rng.random_range(1..=5)).collect();
        let b: Vec<i64> = (0..10_000).map(|_| rng.random_range(1..=5)).collect();
        assert!(cohen_kappa(&a, &b, KappaWeighting::None).unwrap().abs() < 0.05);
        assert!(cohen_kappa(&a, &b, KappaWeighting::Linear).unwrap().abs() < 0.05);
    }

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson_r2(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.25);
        let xs = [0.3, 1.7, 2.2, 5.0];
        assert!((pearson_r2(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        let ys: Vec<f64> = xs.iter().map(|x| -2.0 * x + 3.0).collect();
        assert!((pearson_r2(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(pearson_r2(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::ZeroVariance("xs"))));
        assert!(pearson_r2(&[1.0], &[1.0]).is_err());
    }

    fn rs<'a>(rater: &'a str, group: &'a str, item: &'a str, score: i64) -> RatedScore<'a> {
        RatedScore { rater, group: Some(group), item, score }
    }

    #[test]
    fn agreement_report_shape() {
        let scores = [
            rs("ann", "sme", "i1", 1),
            rs("ann", "sme", "i2", 3),
            rs("ann", "sme", "i3", 2),
            rs("bob", "sme", "i1", 1),
            rs("bob", "sme", "i2", 3),
            rs("bob", "sme", "i3", 2),
            rs("cy", "student", "i4", 2),
        ];
        let metrics: BTreeMap<String, BTreeMap<String, f64>> = [("i1", 1.0), ("i2", 3.0), ("i3", 2.0), ("i4", 2.0)]
            .into_iter()
            .map(|(i, v)| (i.to_owned(), BTreeMap::from([("mean_copy".to_owned(), v)])))
            .collect();
        let r = agreement_report(&scores, &metrics, KappaWeighting::None).unwrap();
        assert_eq!(r.raters, ["ann", "bob", "cy"]);
        assert_eq!(r.kappa[0][1], Some(1.0));
        assert_eq!(r.kappa[1][0], Some(1.0));
        assert_eq!(r.kappa[0][2], None);
        assert!((0..3).all(|i| r.kappa[i][i] == Some(1.0)));
        assert_eq!(r.mean_kappa, Some(1.0));
        assert_eq!(r.group_mean_kappa["sme"], Some(1.0));
        assert_eq!(r.group_mean_kappa["student"], None);
        assert!((r.r2["mean_copy"].unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.rated_items, 4);
    }

    #[test]
    fn agreement_needs_overlap() {
        let solo = [rs("ann", "g", "i1", 1), rs("ann", "g", "i2", 2)];
        assert!(matches!(
            agreement_report(&solo, &BTreeMap::new(), KappaWeighting::None),
            Err(MetricsError::InsufficientOverlap)
        ));
    }

    fn phrase() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["graph", "node", "topic", "model", "query", "data"]), 1..6)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn scores_stay_in_bounds(c in phrase(), r in phrase()) {
            let h = HashEmbedder { dim: 16 };
            let s = ScoreReport::compute(&c, &r, &h, &MetricConfig::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.bleu));
            for v in [s.rouge_l.precision, s.rouge_l.recall, s.rouge_l.f] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            for v in [s.bertscore.precision, s.bertscore.recall, s.bertscore.f] {
                prop_assert!((-1.0..=1.0 + 1e-12).contains(&v));
            }
            let swapped = bert_score(&r, &c, &h).unwrap();
            prop_assert!((swapped.f - s.bertscore.f).abs() < 1e-12);
        }

        #[test]
        fn perfect_scores_only_for_equal_sequences(c in phrase(), r in phrase()) {
            let equal = metric_tokens(&c) == metric_tokens(&r);
            prop_assert_eq!(rouge_l(&c, &r, 1.0).f == 1.0, equal);
            if metric_tokens(&c).len() >= 4 && metric_tokens(&r).len() >= 4 {
                prop_assert_eq!((bleu(&c, &r, 4) - 1.0).abs() < 1e-12, equal);
            }
        }

        #[test]
        fn kappa_is_symmetric_and_reflexive(
            pairs in prop::collection::vec((1i64..=5, 1i64..=5), 2..40)
        ) {
            let (a, b): (Vec<i64>, Vec<i64>) = pairs.into_iter().unzip();
            for w in [KappaWeighting::None, KappaWeighting::Linear] {
                if a.iter().any(|x| *x != a[0]) {
                    prop_assert_eq!(cohen_kappa(&a, &a, w).unwrap(), 1.0);
                }
                match (cohen_kappa(&a, &b, w), cohen_kappa(&b, &a, w)) {
                    (Ok(x), Ok(y)) => {
                        prop_assert!((x - y).abs() < 1e-12);
                        prop_assert!((-1.0..=1.0).contains(&x));
                    }
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "asymmetric error"),
                }
            }
        }

        #[test]
        fn r2_in_unit_interval(xs in prop::collection::vec(-100.0f64..100.0, 3..20)) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.5 + (i % 3) as f64).collect();
            if let Ok(v) = pearson_r2(&xs, &ys) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

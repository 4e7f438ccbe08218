//! Corpus ingestion, tokenization, vocabulary construction and TF-IDF.
//!
//! The corpus file is line-delimited JSON with one document per line:
//!
//! ```text
//! {"id": "d1", "title": "...", "abstract": "...", "keywords": ["..."]}
//! ```
//!
//! Term counts come from the title and abstract concatenated. Keywords are
//! carried through untouched for prompt features and never counted.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MIN_DF: usize = 2;
pub const DEFAULT_MAX_DF_FRACTION: f64 = 0.9;

/// English stop list, sorted for binary search.
const STOP_WORDS: &[&str] = &[
    "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any",
    "are", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both",
    "but", "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few",
    "for", "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers",
    "herself", "him", "himself", "his", "how", "if", "in", "into", "is", "it", "its", "itself",
    "just", "may", "me", "more", "most", "must", "my", "myself", "no", "nor", "not", "now",
    "of", "off", "on", "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over",
    "own", "same", "she", "should", "so", "some", "such", "than", "that", "the", "their",
    "theirs", "them", "themselves", "then", "there", "these", "they", "this", "those",
    "through", "to", "too", "under", "until", "up", "upon", "us", "very", "via", "was", "we",
    "were", "what", "when", "where", "which", "while", "who", "whom", "why", "will", "with",
    "within", "without", "would", "you", "your", "yours", "yourself", "yourselves",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary is empty after document-frequency filtering")]
    EmptyVocabulary,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub keywords: Vec<String>,
}

impl Document {
    /// Text whose tokens are counted for TF-IDF.
    pub fn counted_text(&self) -> String {
        format!("{} {}", self.title, self.abstract_text)
    }

    fn validate(&self, line: usize) -> Result<(), CorpusError> {
        if self.id.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: "empty document id".into(),
            });
        }
        if self.abstract_text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: format!("document {:?} has an empty abstract", self.id),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusBundle {
    pub documents: Vec<Document>,
    /// Where the documents were read from, if anywhere.
    pub source: Option<PathBuf>,
}

impl CorpusBundle {
    /// Builds a bundle from in-memory documents, enforcing the same
    /// invariants as [`ingest`].
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, CorpusError> {
        if documents.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for (i, doc) in documents.iter().enumerate() {
            doc.validate(i + 1)?;
            if !seen.insert(doc.id.as_str()) {
                return Err(CorpusError::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Self {
            documents,
            source: None,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Serializes the bundle back to line-delimited JSON.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for doc in &self.documents {
            out.push_str(&serde_json::to_string(doc).expect("document serializes"));
            out.push('\n');
        }
        out
    }
}

/// Reads a line-delimited JSON corpus. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn ingest(path: impl AsRef<Path>) -> Result<CorpusBundle, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut bundle = parse_jsonl(&text)?;
    bundle.source = Some(path.to_path_buf());
    Ok(bundle)
}

pub fn parse_jsonl(text: &str) -> Result<CorpusBundle, CorpusError> {
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        doc.validate(line)?;
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        documents.push(doc);
    }
    if documents.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(CorpusBundle {
        documents,
        source: None,
    })
}

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.binary_search(&token).is_ok()
}

/// Lowercases, splits on non-alphanumeric characters and drops tokens
/// shorter than two characters or on the stop list.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2 && !is_stop_word(t))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }
}

fn tokenized_corpus(docs: &[Document]) -> Vec<Vec<String>> {
    docs.par_iter()
        .map(|d| tokenize(&d.counted_text()))
        .collect()
}

fn document_frequencies(tokenized: &[Vec<String>]) -> BTreeMap<&str, usize> {
    let mut df = BTreeMap::new();
    for tokens in tokenized {
        let unique: HashSet<&str> = tokens.iter().map(String::as_str).collect();
        for t in unique {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    df
}

/// Keeps tokens whose document frequency lies in `[min_df, max_df_fraction * n]`,
/// sorted lexicographically.
pub fn build_vocabulary(
    docs: &[Document],
    min_df: usize,
    max_df_fraction: f64,
) -> Result<Vocabulary, CorpusError> {
    if min_df < 1 {
        return Err(CorpusError::InvalidParameter("min_df must be at least 1".into()));
    }
    if !(max_df_fraction > 0.0 && max_df_fraction <= 1.0) {
        return Err(CorpusError::InvalidParameter(format!(
            "max_df_fraction must lie in (0, 1], got {max_df_fraction}"
        )));
    }
    let tokenized = tokenized_corpus(docs);
    let df = document_frequencies(&tokenized);
    // Slack keeps products like 0.9 * 10 from landing just below an integer.
    let max_df = max_df_fraction * docs.len() as f64 + 1e-9;
    let tokens: Vec<String> = df
        .into_iter()
        .filter(|&(_, f)| f >= min_df && (f as f64) <= max_df)
        .map(|(t, _)| t.to_owned())
        .collect();
    if tokens.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    Ok(Vocabulary::from(tokens))
}

/// Smoothed inverse document frequency `ln((1 + n) / (1 + df)) + 1`.
pub fn smooth_idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

/// Sparse column-major token-by-document TF-IDF matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfMatrix {
    rows: usize,
    /// Per document, `(row, weight)` pairs sorted by row; weights are > 0.
    columns: Vec<Vec<(usize, f64)>>,
    doc_ids: Vec<String>,
    idf: Vec<f64>,
    /// Documents with no in-vocabulary tokens; their columns are all zero.
    zero_columns: Vec<usize>,
}

impl TfidfMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn zero_columns(&self) -> &[usize] {
        &self.zero_columns
    }

    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.columns[j]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.columns[j]
            .binary_search_by_key(&i, |&(r, _)| r)
            .map(|p| self.columns[j][p].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.rows, self.cols()));
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                x[[i, j]] = v;
            }
        }
        x
    }
}

pub fn build_tfidf(docs: &[Document], vocab: &Vocabulary) -> Result<TfidfMatrix, CorpusError> {
    if vocab.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    let n = docs.len();
    let tokenized = tokenized_corpus(docs);

    let mut df = vec![0usize; vocab.len()];
    let mut counts: Vec<BTreeMap<usize, usize>> = Vec::with_capacity(n);
    for tokens in &tokenized {
        let mut tf = BTreeMap::new();
        for t in tokens {
            if let Some(i) = vocab.index_of(t) {
                *tf.entry(i).or_insert(0) += 1;
            }
        }
        for &i in tf.keys() {
            df[i] += 1;
        }
        counts.push(tf);
    }
    let idf: Vec<f64> = df.iter().map(|&d| smooth_idf(n, d)).collect();

    let mut zero_columns = Vec::new();
    let columns = counts
        .into_iter()
        .enumerate()
        .map(|(j, tf)| {
            let mut col: Vec<(usize, f64)> = tf
                .into_iter()
                .map(|(i, c)| (i, c as f64 * idf[i]))
                .collect();
            let norm = col.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for entry in &mut col {
                    entry.1 /= norm;
                }
            } else {
                zero_columns.push(j);
            }
            col
        })
        .collect();

    Ok(TfidfMatrix {
        rows: vocab.len(),
        columns,
        doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        idf,
        zero_columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            title: String::new(),
            abstract_text: text.into(),
            keywords: vec![],
        }
    }

    fn toy() -> Vec<Document> {
        vec![doc("1", "cat sat"), doc("2", "cat ran"), doc("3", "dog ran")]
    }

    #[test]
    fn stop_list_is_sorted() {
        assert!(STOP_WORDS.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Graph Neural Networks!"), ["graph", "neural", "networks"]);
        assert!(tokenize("a I x").is_empty());
        assert_eq!(tokenize("TF-IDF matrix"), ["tf", "idf", "matrix"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn parse_counts_documents() {
        let text = r#"{"id":"a","title":"T","abstract":"x y"}
{"id":"b","title":"T","abstract":"x y","keywords":["k"]}

{"id":"c","title":"T","abstract":"x y"}
"#;
        let bundle = parse_jsonl(text).unwrap();
        assert_eq!(bundle.len(), 3);
        assert_eq!(bundle.documents[1].keywords, ["k"]);
    }

    #[test]
    fn parse_errors() {
        let dup = "{\"id\":\"d1\",\"title\":\"\",\"abstract\":\"x\"}\n{\"id\":\"d1\",\"title\":\"\",\"abstract\":\"y\"}\n";
        match parse_jsonl(dup) {
            Err(CorpusError::DuplicateId(id)) => assert_eq!(id, "d1"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_jsonl(""), Err(CorpusError::EmptyCorpus)));
        let bad = "{\"id\":\"a\",\"title\":\"\",\"abstract\":\"x\"}\n{not json\n";
        match parse_jsonl(bad) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let blank = "{\"id\":\"a\",\"title\":\"t\",\"abstract\":\"  \"}\n";
        assert!(matches!(
            parse_jsonl(blank),
            Err(CorpusError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn ingest_missing_file() {
        assert!(matches!(
            ingest("/nonexistent/corpus.jsonl"),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn vocabulary_document_frequency_filter() {
        let v = build_vocabulary(&toy(), 1, 1.0).unwrap();
        assert_eq!(v.tokens(), ["cat", "dog", "ran", "sat"]);
        let v = build_vocabulary(&toy(), 2, 1.0).unwrap();
        assert_eq!(v.tokens(), ["cat", "ran"]);
        assert!(matches!(
            build_vocabulary(&toy(), 4, 1.0),
            Err(CorpusError::EmptyVocabulary)
        ));
        // max_df: "cat" and "ran" appear in 2/3 docs
        let v = build_vocabulary(&toy(), 1, 0.5).unwrap();
        assert_eq!(v.tokens(), ["dog", "sat"]);
        assert!(build_vocabulary(&toy(), 0, 1.0).is_err());
        assert!(build_vocabulary(&toy(), 1, 0.0).is_err());
    }

    #[test]
    fn idf_hand_value() {
        // df(cat) = 2, n = 3
        assert!((smooth_idf(3, 2) - 1.287_682_072_451_780_9).abs() < 1e-12);
        let docs = toy();
        let v = build_vocabulary(&docs, 1, 1.0).unwrap();
        let x = build_tfidf(&docs, &v).unwrap();
        assert!((x.idf()[v.index_of("cat").unwrap()] - (4.0f64 / 3.0).ln() - 1.0).abs() < 1e-15);
        // doc "cat sat": cat idf ln(4/3)+1, sat idf ln(2)+1
        let (c, s) = ((4.0f64 / 3.0).ln() + 1.0, 2.0f64.ln() + 1.0);
        let norm = (c * c + s * s).sqrt();
        assert!((x.get(0, 0) - c / norm).abs() < 1e-12);
        assert!((x.get(3, 0) - s / norm).abs() < 1e-12);
        assert_eq!(x.get(1, 0), 0.0);
    }

    #[test]
    fn zero_column_is_flagged() {
        let docs = vec![doc("1", "cat sat"), doc("2", "cat ran"), doc("3", "zebra")];
        let v = build_vocabulary(&docs, 2, 1.0).unwrap();
        let x = build_tfidf(&docs, &v).unwrap();
        assert_eq!(x.zero_columns(), [2]);
        assert!(x.column(2).is_empty());
    }

    #[test]
    fn single_token_column_is_unit() {
        let docs = vec![doc("1", "cat cat")];
        let v = build_vocabulary(&docs, 1, 1.0).unwrap();
        let x = build_tfidf(&docs, &v).unwrap();
        assert_eq!(x.to_dense().into_raw_vec_and_offset().0, vec![1.0]);
    }

    #[test]
    fn keywords_are_not_counted() {
        let mut docs = toy();
        docs[0].keywords = vec!["dog".into()];
        let v = build_vocabulary(&docs, 1, 1.0).unwrap();
        let x = build_tfidf(&docs, &v).unwrap();
        assert_eq!(x.get(v.index_of("dog").unwrap(), 0), 0.0);
    }

    fn word() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("graph".to_string()),
            Just("Neural".to_string()),
            Just("the".to_string()),
            Just("a".to_string()),
            Just("TF-IDF".to_string()),
            "[a-zA-Z0-9]{1,7}",
            "[a-zé]{2,4}",
        ]
    }

    fn corpus() -> impl Strategy<Value = Vec<Document>> {
        prop::collection::vec(prop::collection::vec(word(), 1..12), 1..12).prop_map(|docs| {
            docs.into_iter()
                .enumerate()
                .map(|(i, words)| doc(&format!("d{i}"), &words.join(" ")))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "[ -~é]{0,60}") {
            let once = tokenize(&text);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }

        #[test]
        fn tfidf_nonnegative_and_unit_columns(docs in corpus()) {
            if let Ok(vocab) = build_vocabulary(&docs, 1, 1.0) {
                for (i, t) in vocab.tokens().iter().enumerate() {
                    prop_assert_eq!(vocab.index_of(t), Some(i));
                }
                let x = build_tfidf(&docs, &vocab).unwrap();
                prop_assert_eq!(x.rows(), vocab.len());
                for j in 0..x.cols() {
                    let col = x.column(j);
                    prop_assert!(col.iter().all(|&(_, v)| v >= 0.0));
                    let norm = col.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
                    if x.zero_columns().contains(&j) {
                        prop_assert_eq!(norm, 0.0);
                    } else {
                        prop_assert!((norm - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

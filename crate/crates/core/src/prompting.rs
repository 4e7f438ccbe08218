//! Chain-of-Thought prompt templates, prompt rendering and answer parsing.
//!
//! A rendered prompt is a system message (the template's persona line) and a
//! user message holding the step instructions followed by a "Document
//! Information" block. The block is assembled from a [`TopicCluster`] under a
//! [`FeatureSelection`], and every injected item is recorded in a
//! [`FeatureManifest`] so a trial can be audited afterwards.

use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::tokenize;
use crate::seed;
use crate::topics::TopicCluster;

pub const DOCUMENT_HEADER: &str = "Here is the Document Information:";
/// Keywords and n-grams injected when their section is enabled.
pub const KEYWORD_LIMIT: usize = 5;
pub const NGRAM_LIMIT: usize = 5;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {id:?} is invalid: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error("invalid feature selection: {0}")]
    InvalidSelection(String),
    #[error("topic {0} has no member documents")]
    EmptyCluster(usize),
    #[error("template file {path}: {message}")]
    TemplateFile { path: String, message: String },
    #[error("duplicate template id {0:?}")]
    DuplicateTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Keywords,
    Ngrams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub system_text: String,
    pub step_texts: Vec<String>,
    #[serde(default = "default_header")]
    pub document_header: String,
    /// Sections rendered regardless of the selection flags.
    #[serde(default)]
    pub required_sections: Vec<Section>,
}

fn default_header() -> String {
    DOCUMENT_HEADER.to_owned()
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |reason: &str| PromptError::InvalidTemplate {
            id: self.id.clone(),
            reason: reason.to_owned(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.system_text.trim().is_empty() {
            return Err(invalid("empty system text"));
        }
        let marker_steps = self
            .step_texts
            .iter()
            .filter(|s| s.contains("<<") && s.contains(">>"))
            .count();
        if marker_steps != 1 {
            return Err(invalid(&format!(
                "exactly one step must request the <<answer>> marker, found {marker_steps}"
            )));
        }
        Ok(())
    }

    /// Step instructions and the document header, as placed at the top of
    /// the user message.
    pub fn task_text(&self) -> String {
        let mut text = self.step_texts.join("\n");
        text.push('\n');
        text.push_str(&self.document_header);
        text
    }

    /// System text followed by the task text: the whole instruction as one
    /// string.
    pub fn instruction(&self) -> String {
        format!("{}\n{}", self.system_text, self.task_text())
    }

    fn requires(&self, section: Section) -> bool {
        self.required_sections.contains(&section)
    }
}

/// Templates shipped with the crate. `T1` is the four-guess/refine template
/// that produced the best labels in the original study; `T2`-`T4` vary it
/// along the feature menu searched by the optimizer.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    const PERSONA: &str = "You are a document understander. Using your expertise, label this topic cluster by thinking step-by-step:";
    let t1_steps = vec![
        "Step 1: Review the document information and make four guesses on the topic label.".to_owned(),
        "Step 2: Review the top words and refine each response. ".to_owned(),
        "Step 3: Choose the best answer from your guesses and format it like so: <<[ANSWER]>>.".to_owned(),
    ];
    vec![
        PromptTemplate {
            id: "T1".into(),
            system_text: PERSONA.into(),
            step_texts: t1_steps.clone(),
            document_header: default_header(),
            required_sections: vec![],
        },
        PromptTemplate {
            id: "T2".into(),
            system_text: "You are a document understander. Using your expertise, label this topic cluster.".into(),
            step_texts: vec![
                "Step 1: Review the document information and the top words.".into(),
                "Step 2: Respond with one concise topic label formatted like so: <<[ANSWER]>>.".into(),
            ],
            document_header: default_header(),
            required_sections: vec![],
        },
        PromptTemplate {
            id: "T3".into(),
            system_text: PERSONA.into(),
            step_texts: vec![
                "Step 1: Review the document information and make four guesses on the topic label.".into(),
                "Step 2: Review the top n-grams and refine each guess so it names the shared phrase.".into(),
                "Step 3: Review the top words and refine each response.".into(),
                "Step 4: Choose the best answer from your guesses and format it like so: <<[ANSWER]>>.".into(),
            ],
            document_header: default_header(),
            required_sections: vec![Section::Ngrams],
        },
        PromptTemplate {
            id: "T4".into(),
            system_text: PERSONA.into(),
            step_texts: t1_steps,
            document_header: default_header(),
            required_sections: vec![Section::Keywords],
        },
    ]
}

/// Reads every `*.json` template in `dir`, in file-name order.
pub fn load_templates_dir(dir: impl AsRef<Path>) -> Result<Vec<PromptTemplate>, PromptError> {
    let dir = dir.as_ref();
    let file_err = |message: String| PromptError::TemplateFile {
        path: dir.display().to_string(),
        message,
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| file_err(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut templates: Vec<PromptTemplate> = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| PromptError::TemplateFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let template: PromptTemplate =
            serde_json::from_str(&text).map_err(|e| PromptError::TemplateFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        template.validate()?;
        if templates.iter().any(|t| t.id == template.id) {
            return Err(PromptError::DuplicateTemplate(template.id));
        }
        templates.push(template);
    }
    Ok(templates)
}

/// A point in the feature-selection space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub n_titles: usize,
    pub n_abstract_words: usize,
    pub top_words_pool: usize,
    pub top_words_sample: usize,
    pub include_keywords: bool,
    pub include_ngrams: bool,
    pub order_by_centroid: bool,
    pub seed: u64,
}

impl Default for FeatureSelection {
    /// Three words from the top abstract, the top four titles and five of
    /// the top eight words.
    fn default() -> Self {
        Self {
            n_titles: 4,
            n_abstract_words: 3,
            top_words_pool: 8,
            top_words_sample: 5,
            include_keywords: false,
            include_ngrams: false,
            order_by_centroid: true,
            seed: 0,
        }
    }
}

impl FeatureSelection {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.top_words_sample > self.top_words_pool {
            return Err(PromptError::InvalidSelection(format!(
                "top_words_sample {} exceeds top_words_pool {}",
                self.top_words_sample, self.top_words_pool
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampNote {
    pub section: String,
    pub requested: usize,
    pub available: usize,
}

/// Exactly what went into a prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub titles: Vec<String>,
    pub abstract_words: Vec<String>,
    pub top_words: Vec<String>,
    pub keywords: Vec<String>,
    pub ngrams: Vec<String>,
    pub clamped: Vec<ClampNote>,
}

impl FeatureManifest {
    pub fn item_count(&self) -> usize {
        self.titles.len()
            + self.abstract_words.len()
            + self.top_words.len()
            + self.keywords.len()
            + self.ngrams.len()
    }

    /// Short content hash used to identify the manifest in trial logs.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub topic_id: usize,
    pub system: String,
    pub user: String,
    pub manifest: FeatureManifest,
}

fn dedup_nonempty(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in items {
        let item = item.trim().to_owned();
        if !item.is_empty() && !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn clamp(section: &str, requested: usize, available: usize, notes: &mut Vec<ClampNote>) -> usize {
    if requested > available {
        notes.push(ClampNote {
            section: section.to_owned(),
            requested,
            available,
        });
        available
    } else {
        requested
    }
}

/// Draws `amount` distinct items, kept in their original order.
fn sample_ordered<R: rand::Rng>(rng: &mut R, items: &[String], amount: usize) -> Vec<String> {
    let mut picked = index::sample(rng, items.len(), amount).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

pub fn render_prompt(
    template: &PromptTemplate,
    cluster: &TopicCluster,
    selection: &FeatureSelection,
) -> Result<RenderedPrompt, PromptError> {
    selection.validate()?;
    if cluster.is_empty() {
        return Err(PromptError::EmptyCluster(cluster.topic_id));
    }
    let mut rng = seed::rng(seed::derive_indexed(
        selection.seed,
        "render",
        &[cluster.topic_id as u64],
    ));
    let mut manifest = FeatureManifest::default();

    let titles = dedup_nonempty(cluster.top_titles.iter().cloned());
    let n = clamp("titles", selection.n_titles, titles.len(), &mut manifest.clamped);
    manifest.titles = if selection.order_by_centroid {
        titles[..n].to_vec()
    } else {
        sample_ordered(&mut rng, &titles, n)
    };

    let abstract_tokens = dedup_nonempty(
        cluster
            .top_abstracts
            .first()
            .map(|a| tokenize(a))
            .unwrap_or_default(),
    );
    let n = clamp(
        "abstract_words",
        selection.n_abstract_words,
        abstract_tokens.len(),
        &mut manifest.clamped,
    );
    manifest.abstract_words = sample_ordered(&mut rng, &abstract_tokens, n);

    let ranked_words = dedup_nonempty(cluster.top_tokens.iter().map(|t| t.token.clone()));
    let pool = clamp(
        "top_words_pool",
        selection.top_words_pool,
        ranked_words.len(),
        &mut manifest.clamped,
    );
    let n = clamp(
        "top_words_sample",
        selection.top_words_sample,
        pool,
        &mut manifest.clamped,
    );
    manifest.top_words = sample_ordered(&mut rng, &ranked_words[..pool], n);

    if selection.include_keywords || template.requires(Section::Keywords) {
        manifest.keywords = dedup_nonempty(cluster.keywords.iter().map(|k| k.keyword.clone()))
            .into_iter()
            .take(KEYWORD_LIMIT)
            .collect();
    }
    if selection.include_ngrams || template.requires(Section::Ngrams) {
        manifest.ngrams = dedup_nonempty(cluster.top_ngrams.iter().map(|g| g.ngram.clone()))
            .into_iter()
            .take(NGRAM_LIMIT)
            .collect();
    }

    let mut user = template.task_text();
    if !manifest.titles.is_empty() {
        user.push_str("\nTitles:");
        for t in &manifest.titles {
            user.push_str("\n- ");
            user.push_str(t);
        }
    }
    for (header, items) in [
        ("Abstract words:", &manifest.abstract_words),
        ("Top words:", &manifest.top_words),
        ("Keywords:", &manifest.keywords),
        ("N-grams:", &manifest.ngrams),
    ] {
        if !items.is_empty() {
            user.push('\n');
            user.push_str(header);
            user.push(' ');
            user.push_str(&items.join(", "));
        }
    }

    Ok(RenderedPrompt {
        template_id: template.id.clone(),
        topic_id: cluster.topic_id,
        system: template.system_text.clone(),
        user,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStatus {
    Marker,
    FallbackLastLine,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub label: String,
    pub status: ExtractionStatus,
}

/// Pulls the label out of a response: the content of the last non-empty
/// `<< ... >>` pair, else the last non-empty line.
pub fn extract_answer(response: &str) -> ExtractionResult {
    let mut end = response.len();
    while let Some(close) = response[..end].rfind(">>") {
        if let Some(open) = response[..close].rfind("<<") {
            let inner = response[open + 2..close].trim();
            let inner = inner
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .map(str::trim)
                .unwrap_or(inner);
            if !inner.is_empty() {
                return ExtractionResult {
                    label: inner.to_owned(),
                    status: ExtractionStatus::Marker,
                };
            }
            end = open;
        } else {
            break;
        }
    }
    match response.lines().map(str::trim).rfind(|l| !l.is_empty()) {
        Some(line) => ExtractionResult {
            label: line.to_owned(),
            status: ExtractionStatus::FallbackLastLine,
        },
        None => ExtractionResult {
            label: String::new(),
            status: ExtractionStatus::Failed,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topics::{KeywordCount, NgramCount, TokenWeight};
    use proptest::prelude::*;

    const WINNING_TEMPLATE: &str = "You are a document understander. Using your expertise, label this topic cluster by thinking step-by-step:\nStep 1: Review the document information and make four guesses on the topic label.\nStep 2: Review the top words and refine each response. \nStep 3: Choose the best answer from your guesses and format it like so: <<[ANSWER]>>.\nHere is the Document Information:";

    fn cluster() -> TopicCluster {
        let words = [
            "graph", "embedding", "node", "neural", "network", "link", "prediction", "learning",
            "representation", "walk",
        ];
        TopicCluster {
            topic_id: 3,
            member_ids: (0..6).map(|i| format!("d{i}")).collect(),
            top_tokens: words
                .iter()
                .enumerate()
                .map(|(i, w)| TokenWeight { token: w.to_string(), probability: 0.1 - i as f64 * 0.005 })
                .collect(),
            top_ngrams: vec![
                NgramCount { ngram: "graph embedding".into(), count: 4 },
                NgramCount { ngram: "link prediction".into(), count: 2 },
            ],
            top_titles: (0..6).map(|i| format!("Title {i}")).collect(),
            top_abstracts: vec![
                "Node embeddings learned by random walks support link prediction on large graphs".into(),
            ],
            keywords: vec![KeywordCount { keyword: "graphs".into(), count: 3 }],
        }
    }

    #[test]
    fn winning_template_is_verbatim() {
        let t1 = &builtin_templates()[0];
        assert_eq!(t1.id, "T1");
        assert_eq!(t1.instruction(), WINNING_TEMPLATE);
    }

    #[test]
    fn builtin_invariants() {
        let templates = builtin_templates();
        let mut ids: Vec<&str> = templates.iter().map(|t| t.id.as_str()).collect();
        ids.dedup();
        assert_eq!(ids, ["T1", "T2", "T3", "T4"]);
        for t in &templates {
            t.validate().unwrap();
            assert!(t.instruction().contains("<<[ANSWER]>>"));
        }
    }

    #[test]
    fn template_validation() {
        let mut t = builtin_templates()[0].clone();
        t.step_texts.push("Also write <<this>>".into());
        assert!(t.validate().is_err());
        t.step_texts.truncate(2);
        assert!(t.validate().is_err());
        let mut t = builtin_templates()[0].clone();
        t.system_text = " ".into();
        assert!(t.validate().is_err());
    }

    #[test]
    fn empty_selection_renders_template_only() {
        let t1 = &builtin_templates()[0];
        let sel = FeatureSelection {
            n_titles: 0,
            n_abstract_words: 0,
            top_words_pool: 0,
            top_words_sample: 0,
            include_keywords: false,
            include_ngrams: false,
            order_by_centroid: false,
            seed: 1,
        };
        let p = render_prompt(t1, &cluster(), &sel).unwrap();
        assert_eq!(format!("{}\n{}", p.system, p.user), WINNING_TEMPLATE);
        assert_eq!(p.manifest.item_count(), 0);
    }

    #[test]
    fn default_selection_injects_three_four_five() {
        let p = render_prompt(&builtin_templates()[0], &cluster(), &FeatureSelection::default())
            .unwrap();
        assert_eq!(p.manifest.abstract_words.len(), 3);
        assert_eq!(p.manifest.titles, ["Title 0", "Title 1", "Title 2", "Title 3"]);
        assert_eq!(p.manifest.top_words.len(), 5);
        assert_eq!(p.manifest.item_count(), 12);
        assert!(p.manifest.clamped.is_empty());
        let top8: Vec<String> = cluster().top_tokens[..8].iter().map(|t| t.token.clone()).collect();
        assert!(p.manifest.top_words.iter().all(|w| top8.contains(w)));
        assert!(p.user.contains("\nTop words: "));
        assert!(p.user.contains("\nTitles:\n- Title 0"));
    }

    #[test]
    fn render_is_deterministic_and_seed_sensitive() {
        let t = &builtin_templates()[0];
        let sel = FeatureSelection { order_by_centroid: false, ..Default::default() };
        let a = render_prompt(t, &cluster(), &sel).unwrap();
        let b = render_prompt(t, &cluster(), &sel).unwrap();
        assert_eq!(a, b);
        let differs = (1..20u64).any(|s| {
            render_prompt(t, &cluster(), &FeatureSelection { seed: s, ..sel }).unwrap().manifest
                != a.manifest
        });
        assert!(differs);
    }

    #[test]
    fn clamping_is_recorded() {
        let sel = FeatureSelection {
            n_titles: 50,
            top_words_pool: 40,
            top_words_sample: 30,
            ..Default::default()
        };
        let p = render_prompt(&builtin_templates()[0], &cluster(), &sel).unwrap();
        assert_eq!(p.manifest.titles.len(), 6);
        assert_eq!(p.manifest.top_words.len(), 10);
        let sections: Vec<&str> = p.manifest.clamped.iter().map(|c| c.section.as_str()).collect();
        assert_eq!(sections, ["titles", "top_words_pool", "top_words_sample"]);
    }

    #[test]
    fn required_and_optional_sections() {
        let templates = builtin_templates();
        let sel = FeatureSelection::default();
        let p = render_prompt(&templates[3], &cluster(), &sel).unwrap();
        assert_eq!(p.manifest.keywords, ["graphs"]);
        assert!(p.user.contains("\nKeywords: graphs"));
        let p = render_prompt(&templates[0], &cluster(), &sel).unwrap();
        assert!(p.manifest.keywords.is_empty());
        let p = render_prompt(
            &templates[0],
            &cluster(),
            &FeatureSelection { include_ngrams: true, ..sel },
        )
        .unwrap();
        assert!(p.user.ends_with("N-grams: graph embedding, link prediction"));
    }

    #[test]
    fn render_errors() {
        let mut empty = cluster();
        empty.member_ids.clear();
        let t = &builtin_templates()[0];
        assert!(matches!(
            render_prompt(t, &empty, &FeatureSelection::default()),
            Err(PromptError::EmptyCluster(3))
        ));
        let bad = FeatureSelection { top_words_pool: 2, top_words_sample: 3, ..Default::default() };
        assert!(matches!(
            render_prompt(t, &cluster(), &bad),
            Err(PromptError::InvalidSelection(_))
        ));
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(
            extract_answer("Step 3: <<Graph Embeddings>>"),
            ExtractionResult { label: "Graph Embeddings".into(), status: ExtractionStatus::Marker }
        );
        assert_eq!(
            extract_answer("guess A <<X>>\nStep 3: final <<Ontology Construction>>").label,
            "Ontology Construction"
        );
        assert_eq!(
            extract_answer("I think the topic is NLP"),
            ExtractionResult {
                label: "I think the topic is NLP".into(),
                status: ExtractionStatus::FallbackLastLine
            }
        );
        assert_eq!(extract_answer("  \n ").status, ExtractionStatus::Failed);
        assert_eq!(extract_answer("").status, ExtractionStatus::Failed);
        assert_eq!(extract_answer("<<[Knowledge Graphs]>>").label, "Knowledge Graphs");
        assert_eq!(extract_answer("<<A>> then << >>").label, "A");
        assert_eq!(
            extract_answer("first line\nsecond <<").status,
            ExtractionStatus::FallbackLastLine
        );
    }

    #[test]
    fn templates_load_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        for t in builtin_templates().iter().take(2) {
            fs::write(
                dir.path().join(format!("{}.json", t.id)),
                serde_json::to_string(t).unwrap(),
            )
            .unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let loaded = load_templates_dir(dir.path()).unwrap();
        assert_eq!(loaded, builtin_templates()[..2]);

        let minimal = r#"{"id":"custom","system_text":"Label it.","step_texts":["Answer as <<[ANSWER]>>."]}"#;
        fs::write(dir.path().join("z.json"), minimal).unwrap();
        let loaded = load_templates_dir(dir.path()).unwrap();
        assert_eq!(loaded[2].document_header, DOCUMENT_HEADER);

        fs::write(dir.path().join("zz.json"), minimal).unwrap();
        assert!(matches!(
            load_templates_dir(dir.path()),
            Err(PromptError::DuplicateTemplate(_))
        ));
    }

    proptest! {
        #[test]
        fn manifest_items_come_from_cluster(
            n_titles in 0usize..12,
            n_abstract_words in 0usize..15,
            pool in 0usize..15,
            sample in 0usize..15,
            keywords: bool,
            ngrams: bool,
            centroid: bool,
            seed: u64,
        ) {
            let c = cluster();
            let sel = FeatureSelection {
                n_titles,
                n_abstract_words,
                top_words_pool: pool.max(sample),
                top_words_sample: sample,
                include_keywords: keywords,
                include_ngrams: ngrams,
                order_by_centroid: centroid,
                seed,
            };
            let p = render_prompt(&builtin_templates()[0], &c, &sel).unwrap();
            let m = &p.manifest;
            let abstract_tokens = tokenize(&c.top_abstracts[0]);
            prop_assert!(m.titles.iter().all(|t| c.top_titles.contains(t)));
            prop_assert!(m.abstract_words.iter().all(|w| abstract_tokens.contains(w)));
            prop_assert!(m.top_words.iter().all(|w| c.top_tokens.iter().any(|t| &t.token == w)));
            for items in [&m.titles, &m.abstract_words, &m.top_words, &m.keywords, &m.ngrams] {
                let mut sorted = items.clone();
                sorted.sort();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), items.len());
            }
            prop_assert_eq!(m.titles.len(), n_titles.min(6));
            prop_assert_eq!(m.top_words.len(), sample.min(10));
        }

        #[test]
        fn echoed_marker_round_trips(label in "[A-Za-z][A-Za-z ]{0,30}[A-Za-z]") {
            let r = extract_answer(&format!("Step 1: thinking\nStep 3: <<{label}>>"));
            prop_assert_eq!(r.status, ExtractionStatus::Marker);
            prop_assert_eq!(r.label, label.trim());
        }
    }
}

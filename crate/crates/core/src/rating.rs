//! Durable store for human ratings of candidate labels.
//!
//! A store directory holds `items.jsonl` (the items to rate) and
//! `ratings.jsonl`, an append-only log. Every rating is written and synced
//! to disk before it is acknowledged; the latest rating of a rater for an
//! item supersedes earlier ones.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, AgreementReport, KappaWeighting, MetricsError, RatedScore};
use crate::optimizer::{good_trial_commonality, DimensionSummary, TrialRecord};

pub const ITEMS_FILE: &str = "items.jsonl";
pub const RATINGS_FILE: &str = "ratings.jsonl";

#[derive(Debug, Error)]
pub enum RatingError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),
    #[error("item {0:?} has an empty candidate label")]
    EmptyLabel(String),
    #[error("rater id must not be empty")]
    EmptyRater,
    #[error("unsupported scale {0}; use 3 or 5")]
    UnsupportedScale(u8),
    #[error("this session rates on a {expected}-point scale, got {got}")]
    ScaleMismatch { expected: u8, got: u8 },
    #[error("score {score} outside 1..={scale}")]
    ScoreOutOfRange { score: u8, scale: u8 },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RatingError + '_ {
    move |source| RatingError::Io {
        path: path.to_owned(),
        source,
    }
}

/// What the rater sees next to the candidate label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    #[serde(default)]
    pub top_words: Vec<String>,
    #[serde(default)]
    pub titles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingItem {
    pub item_id: String,
    #[serde(default)]
    pub trial_id: Option<u64>,
    pub topic_id: usize,
    pub candidate_label: String,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub features: FeatureSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    /// NLG scores of the candidate, correlated against ratings.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub rater_id: String,
    pub item_id: String,
    pub scale: u8,
    pub score: u8,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// Request body for a new rating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub rater_id: String,
    pub item_id: String,
    pub scale: u8,
    pub score: u8,
    #[serde(default)]
    pub group: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub rated: usize,
    pub remaining: usize,
}

pub fn validate_scale(scale: u8) -> Result<(), RatingError> {
    match scale {
        3 | 5 => Ok(()),
        other => Err(RatingError::UnsupportedScale(other)),
    }
}

/// Kappa weighting used for a scale: plain agreement on the 3-point
/// scale, linear weights on the ordinal 5-point scale.
pub fn weighting_for(scale: u8) -> KappaWeighting {
    if scale == 5 {
        KappaWeighting::Linear
    } else {
        KappaWeighting::None
    }
}

/// Latest rating per (rater, item), in log order.
pub fn latest_ratings(log: &[Rating]) -> BTreeMap<(String, String), Rating> {
    log.iter()
        .map(|r| ((r.rater_id.clone(), r.item_id.clone()), r.clone()))
        .collect()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<(Vec<T>, u64), RatingError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    let mut valid = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let complete = line.ends_with('\n');
        if line.trim().is_empty() {
            valid += line.len() as u64;
            continue;
        }
        match (serde_json::from_str(line), complete) {
            (Ok(v), true) => {
                out.push(v);
                valid += line.len() as u64;
            }
            // Torn final write from a crash before acknowledgment.
            (_, false) => break,
            (Err(e), true) => {
                return Err(RatingError::Corrupt {
                    path: path.to_owned(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((out, valid))
}

/// Replays a ratings log without opening a store.
pub fn replay_log(path: impl AsRef<Path>) -> Result<Vec<Rating>, RatingError> {
    Ok(read_jsonl(path.as_ref())?.0)
}

pub fn load_items(path: impl AsRef<Path>) -> Result<Vec<RatingItem>, RatingError> {
    let (items, _) = read_jsonl::<RatingItem>(path.as_ref())?;
    check_items(&items)?;
    Ok(items)
}

fn check_items(items: &[RatingItem]) -> Result<(), RatingError> {
    let mut seen = HashMap::new();
    for item in items {
        if item.candidate_label.trim().is_empty() {
            return Err(RatingError::EmptyLabel(item.item_id.clone()));
        }
        if seen.insert(item.item_id.as_str(), ()).is_some() {
            return Err(RatingError::DuplicateItem(item.item_id.clone()));
        }
    }
    Ok(())
}

/// Writes `items.jsonl` into `dir` (replacing any previous item set).
pub fn write_items(dir: impl AsRef<Path>, items: &[RatingItem]) -> Result<(), RatingError> {
    check_items(items)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("item serializes"));
        text.push('\n');
    }
    write_atomic(&dir.join(ITEMS_FILE), text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RatingError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Agreement report over a set of ratings and items.
pub fn report_from(
    items: &[RatingItem],
    latest: &BTreeMap<(String, String), Rating>,
    weighting: KappaWeighting,
) -> Result<AgreementReport, RatingError> {
    let scores: Vec<RatedScore<'_>> = latest
        .values()
        .map(|r| RatedScore {
            rater: &r.rater_id,
            group: r.group.as_deref(),
            item: &r.item_id,
            score: r.score as i64,
        })
        .collect();
    let item_metrics: BTreeMap<String, BTreeMap<String, f64>> = items
        .iter()
        .map(|i| (i.item_id.clone(), i.metrics.clone()))
        .collect();
    Ok(metrics::agreement_report(&scores, &item_metrics, weighting)?)
}

struct State {
    items: Vec<RatingItem>,
    index: HashMap<String, usize>,
    latest: BTreeMap<(String, String), Rating>,
    /// Distinct raters per item.
    counts: Vec<usize>,
    log_lines: usize,
}

impl State {
    fn apply(&mut self, rating: Rating) {
        let idx = self.index[&rating.item_id];
        let key = (rating.rater_id.clone(), rating.item_id.clone());
        if self.latest.insert(key, rating).is_none() {
            self.counts[idx] += 1;
        }
        self.log_lines += 1;
    }
}

pub struct RatingStore {
    dir: PathBuf,
    scale: u8,
    reveal: bool,
    state: RwLock<State>,
    log: Mutex<File>,
}

impl RatingStore {
    /// Opens the store in `dir`, replaying the rating log. A torn final
    /// line is discarded; the log is compacted when more than half of it is
    /// superseded.
    pub fn open(dir: impl AsRef<Path>, scale: u8, reveal: bool) -> Result<Self, RatingError> {
        validate_scale(scale)?;
        let dir = dir.as_ref().to_owned();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let items = load_items(dir.join(ITEMS_FILE))?;
        let mut items = items;
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        let index: HashMap<String, usize> = items
            .iter()
            .enumerate()
            .map(|(i, item)| (item.item_id.clone(), i))
            .collect();
        let log_path = dir.join(RATINGS_FILE);
        let (log, valid_len) = read_jsonl::<Rating>(&log_path)?;
        let mut state = State {
            counts: vec![0; items.len()],
            items,
            index,
            latest: BTreeMap::new(),
            log_lines: 0,
        };
        for (i, rating) in log.into_iter().enumerate() {
            if rating.scale != scale {
                return Err(RatingError::Corrupt {
                    path: log_path.clone(),
                    line: i + 1,
                    message: format!("rating on a {}-point scale in a {scale}-point store", rating.scale),
                });
            }
            if !state.index.contains_key(&rating.item_id) {
                return Err(RatingError::Corrupt {
                    path: log_path.clone(),
                    line: i + 1,
                    message: format!("unknown item {:?}", rating.item_id),
                });
            }
            state.apply(rating);
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        if file.metadata().map_err(io_err(&log_path))?.len() != valid_len {
            file.set_len(valid_len).map_err(io_err(&log_path))?;
        }
        let store = Self {
            dir,
            scale,
            reveal,
            state: RwLock::new(state),
            log: Mutex::new(file),
        };
        let needs_compaction = {
            let s = store.read();
            s.log_lines > 2 * s.latest.len()
        };
        if needs_compaction {
            store.compact()?;
        }
        Ok(store)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn scale(&self) -> u8 {
        self.scale
    }

    pub fn reveal(&self) -> bool {
        self.reveal
    }

    pub fn items(&self) -> Vec<RatingItem> {
        self.read().items.clone()
    }

    fn present(&self, item: &RatingItem) -> RatingItem {
        let mut item = item.clone();
        if !self.reveal {
            item.ground_truth = None;
        }
        item
    }

    /// An item `rater` has not rated yet, preferring the least-rated item
    /// and then the smallest id.
    pub fn next_item(&self, rater: &str) -> Option<RatingItem> {
        let s = self.read();
        s.items
            .iter()
            .enumerate()
            .filter(|(_, item)| {
                !s.latest
                    .contains_key(&(rater.to_owned(), item.item_id.clone()))
            })
            .min_by_key(|(i, _)| s.counts[*i])
            .map(|(_, item)| self.present(item))
    }

    pub fn progress(&self, rater: &str) -> Progress {
        let s = self.read();
        let rated = s
            .items
            .iter()
            .filter(|item| s.latest.contains_key(&(rater.to_owned(), item.item_id.clone())))
            .count();
        Progress {
            rated,
            remaining: s.items.len() - rated,
        }
    }

    /// Validates, persists and applies a rating. Returns once the rating is
    /// on disk.
    pub fn submit(&self, submission: RatingSubmission) -> Result<Rating, RatingError> {
        if submission.rater_id.trim().is_empty() {
            return Err(RatingError::EmptyRater);
        }
        if submission.scale != self.scale {
            return Err(RatingError::ScaleMismatch {
                expected: self.scale,
                got: submission.scale,
            });
        }
        if !(1..=self.scale).contains(&submission.score) {
            return Err(RatingError::ScoreOutOfRange {
                score: submission.score,
                scale: self.scale,
            });
        }
        if !self.read().index.contains_key(&submission.item_id) {
            return Err(RatingError::UnknownItem(submission.item_id));
        }
        let rating = Rating {
            rater_id: submission.rater_id,
            item_id: submission.item_id,
            scale: submission.scale,
            score: submission.score,
            timestamp: Utc::now(),
            group: submission.group.filter(|g| !g.trim().is_empty()),
        };
        let mut line = serde_json::to_string(&rating).expect("rating serializes");
        line.push('\n');
        let path = self.dir.join(RATINGS_FILE);
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        log.sync_data().map_err(io_err(&path))?;
        self.state
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .apply(rating.clone());
        Ok(rating)
    }

    /// Current ratings, latest per (rater, item).
    pub fn ratings(&self) -> Vec<Rating> {
        self.read().latest.values().cloned().collect()
    }

    /// Rewrites the log keeping only the latest rating per (rater, item).
    pub fn compact(&self) -> Result<(), RatingError> {
        let path = self.dir.join(RATINGS_FILE);
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        let mut state = self.state.write().unwrap_or_else(|e| e.into_inner());
        let mut kept: Vec<&Rating> = state.latest.values().collect();
        kept.sort_by_key(|r| r.timestamp);
        let mut text = String::new();
        for r in &kept {
            text.push_str(&serde_json::to_string(r).expect("rating serializes"));
            text.push('\n');
        }
        write_atomic(&path, text.as_bytes())?;
        *log = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        state.log_lines = state.latest.len();
        Ok(())
    }

    pub fn agreement_report(&self) -> Result<AgreementReport, RatingError> {
        let s = self.read();
        report_from(&s.items, &s.latest, weighting_for(self.scale))
    }

    /// Mean rating per trial over the items that belong to a trial.
    pub fn trial_means(&self) -> BTreeMap<u64, f64> {
        let s = self.read();
        let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in s.latest.values() {
            let item = &s.items[s.index[&r.item_id]];
            if let Some(trial) = item.trial_id {
                let e = sums.entry(trial).or_default();
                e.0 += r.score as f64;
                e.1 += 1;
            }
        }
        sums.into_iter().map(|(t, (sum, n))| (t, sum / n as f64)).collect()
    }

    /// Mean rating per model id.
    pub fn model_means(&self) -> BTreeMap<String, f64> {
        let s = self.read();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in s.latest.values() {
            let item = &s.items[s.index[&r.item_id]];
            let model = item.model_id.clone().unwrap_or_else(|| "unknown".into());
            let e = sums.entry(model).or_default();
            e.0 += r.score as f64;
            e.1 += 1;
        }
        sums.into_iter().map(|(m, (sum, n))| (m, sum / n as f64)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodTrials {
    pub threshold: f64,
    pub trial_ids: Vec<u64>,
    pub trial_means: BTreeMap<u64, f64>,
    pub commonality: Option<BTreeMap<String, DimensionSummary>>,
}

/// Trials whose mean item rating reaches `min_mean_score`, with the
/// shared parameter values among them.
pub fn filter_good_trials(
    trial_means: &BTreeMap<u64, f64>,
    min_mean_score: f64,
    history: &[TrialRecord],
) -> GoodTrials {
    let trial_ids: Vec<u64> = trial_means
        .iter()
        .filter(|(_, m)| **m >= min_mean_score)
        .map(|(t, _)| *t)
        .collect();
    let good: Vec<&TrialRecord> = history
        .iter()
        .filter(|t| trial_ids.contains(&t.trial_id))
        .collect();
    GoodTrials {
        threshold: min_mean_score,
        commonality: good_trial_commonality(&good).ok(),
        trial_means: trial_means.clone(),
        trial_ids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{ParamValue, Params, TrialStatus};

    fn item(id: &str, trial: u64, bert: f64) -> RatingItem {
        RatingItem {
            item_id: id.into(),
            trial_id: Some(trial),
            topic_id: 0,
            candidate_label: format!("label {id}"),
            model_id: Some("mock".into()),
            features: FeatureSummary {
                top_words: vec!["graph".into()],
                titles: vec![],
            },
            ground_truth: Some("truth".into()),
            metrics: BTreeMap::from([("bertscore_f".to_owned(), bert)]),
        }
    }

    fn sub(rater: &str, item: &str, score: u8) -> RatingSubmission {
        RatingSubmission {
            rater_id: rater.into(),
            item_id: item.into(),
            scale: 3,
            score,
            group: None,
        }
    }

    fn store(items: &[RatingItem]) -> (tempfile::TempDir, RatingStore) {
        let dir = tempfile::tempdir().unwrap();
        write_items(dir.path(), items).unwrap();
        let store = RatingStore::open(dir.path(), 3, false).unwrap();
        (dir, store)
    }

    #[test]
    fn serving_order() {
        let (_d, s) = store(&[item("b", 0, 0.1), item("a", 0, 0.2)]);
        assert_eq!(s.next_item("r1").unwrap().item_id, "a");
        s.submit(sub("r2", "a", 2)).unwrap();
        s.submit(sub("r3", "a", 2)).unwrap();
        assert_eq!(s.next_item("r1").unwrap().item_id, "b");
        s.submit(sub("r1", "b", 1)).unwrap();
        s.submit(sub("r1", "a", 1)).unwrap();
        assert!(s.next_item("r1").is_none());
        assert_eq!(s.progress("r1"), Progress { rated: 2, remaining: 0 });
        assert_eq!(s.progress("new"), Progress { rated: 0, remaining: 2 });
    }

    #[test]
    fn ground_truth_hidden_unless_revealed() {
        let (d, s) = store(&[item("a", 0, 0.1)]);
        assert_eq!(s.next_item("r").unwrap().ground_truth, None);
        drop(s);
        let s = RatingStore::open(d.path(), 3, true).unwrap();
        assert_eq!(s.next_item("r").unwrap().ground_truth.as_deref(), Some("truth"));
    }

    #[test]
    fn submission_validation() {
        let (_d, s) = store(&[item("a", 0, 0.1)]);
        assert!(s.submit(sub("r", "a", 3)).is_ok());
        assert!(matches!(s.submit(sub("r", "a", 4)), Err(RatingError::ScoreOutOfRange { score: 4, scale: 3 })));
        assert!(matches!(s.submit(sub("r", "a", 0)), Err(RatingError::ScoreOutOfRange { .. })));
        assert!(matches!(s.submit(sub("r", "zz", 1)), Err(RatingError::UnknownItem(_))));
        assert!(matches!(s.submit(sub(" ", "a", 1)), Err(RatingError::EmptyRater)));
        let five = RatingSubmission { scale: 5, ..sub("r", "a", 4) };
        assert!(matches!(s.submit(five), Err(RatingError::ScaleMismatch { expected: 3, got: 5 })));
        assert!(matches!(RatingStore::open(_d.path(), 4, false), Err(RatingError::UnsupportedScale(4))));
    }

    #[test]
    fn resubmission_supersedes() {
        let (d, s) = store(&[item("a", 0, 0.1)]);
        s.submit(sub("r", "a", 1)).unwrap();
        s.submit(sub("r", "a", 3)).unwrap();
        assert_eq!(s.ratings().len(), 1);
        assert_eq!(s.ratings()[0].score, 3);
        assert_eq!(s.trial_means()[&0], 3.0);
        drop(s);
        let s = RatingStore::open(d.path(), 3, false).unwrap();
        assert_eq!(s.ratings()[0].score, 3);
    }

    #[test]
    fn restart_recovers_every_acknowledged_rating() {
        let items: Vec<RatingItem> = (0..5).map(|i| item(&format!("i{i}"), i, i as f64)).collect();
        let (d, s) = store(&items);
        let mut acked = Vec::new();
        for (rater, offset) in [("ann", 0u8), ("bob", 1)] {
            for i in 0..5u8 {
                acked.push(s.submit(sub(rater, &format!("i{i}"), (i + offset) % 3 + 1)).unwrap());
            }
        }
        let before = s.agreement_report().unwrap();
        drop(s);
        // A torn write after the last acknowledgment.
        let mut f = OpenOptions::new().append(true).open(d.path().join(RATINGS_FILE)).unwrap();
        f.write_all(b"{\"rater_id\":\"ann\",\"ite").unwrap();
        drop(f);
        let s = RatingStore::open(d.path(), 3, false).unwrap();
        let mut recovered = s.ratings();
        recovered.sort_by_key(|r| r.timestamp);
        assert_eq!(recovered, acked);
        assert_eq!(s.agreement_report().unwrap(), before);
        // Appends after recovery land on a clean line.
        s.submit(sub("cy", "i0", 2)).unwrap();
        assert_eq!(replay_log(d.path().join(RATINGS_FILE)).unwrap().len(), 11);
    }

    #[test]
    fn report_equals_log_replay() {
        let items: Vec<RatingItem> = (0..6).map(|i| item(&format!("i{i}"), i % 2, i as f64 / 6.0)).collect();
        let (d, s) = store(&items);
        for (rater, scores) in [("ann", [1, 2, 3, 3, 2, 1]), ("bob", [1, 2, 3, 2, 2, 1]), ("cy", [3, 3, 1, 1, 2, 2])] {
            for (i, score) in scores.iter().enumerate() {
                s.submit(sub(rater, &format!("i{i}"), *score)).unwrap();
            }
        }
        s.submit(sub("cy", "i0", 1)).unwrap();
        let live = s.agreement_report().unwrap();
        let replayed = replay_log(d.path().join(RATINGS_FILE)).unwrap();
        let offline = report_from(&load_items(d.path().join(ITEMS_FILE)).unwrap(), &latest_ratings(&replayed), KappaWeighting::None).unwrap();
        assert_eq!(live, offline);
        assert_eq!(live.raters, ["ann", "bob", "cy"]);
        assert!(live.r2.contains_key("bertscore_f"));
    }

    #[test]
    fn agreement_examples() {
        let items: Vec<RatingItem> = (0..3).map(|i| item(&format!("i{i}"), 0, (i + 1) as f64)).collect();
        let (_d, s) = store(&items);
        for i in 0..3u8 {
            s.submit(sub("ann", &format!("i{i}"), i + 1)).unwrap();
        }
        assert!(matches!(s.agreement_report(), Err(RatingError::Metrics(MetricsError::InsufficientOverlap))));
        for i in 0..3u8 {
            s.submit(sub("bob", &format!("i{i}"), i + 1)).unwrap();
        }
        let r = s.agreement_report().unwrap();
        assert_eq!(r.kappa[0][1], Some(1.0));
        assert!((r.r2["bertscore_f"].unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compaction_keeps_latest() {
        let (d, s) = store(&[item("a", 0, 0.1), item("b", 0, 0.2)]);
        for score in [1, 2, 3, 1, 2] {
            s.submit(sub("r", "a", score)).unwrap();
        }
        s.submit(sub("r", "b", 3)).unwrap();
        let before = s.ratings();
        s.compact().unwrap();
        assert_eq!(replay_log(d.path().join(RATINGS_FILE)).unwrap().len(), 2);
        s.submit(sub("q", "a", 2)).unwrap();
        drop(s);
        let s = RatingStore::open(d.path(), 3, false).unwrap();
        assert_eq!(s.ratings().len(), 3);
        assert!(before.iter().all(|r| s.ratings().contains(r)));
    }

    #[test]
    fn item_set_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_items(dir.path(), &[item("a", 0, 0.0), item("a", 1, 0.0)]), Err(RatingError::DuplicateItem(_))));
        let mut blank = item("b", 0, 0.0);
        blank.candidate_label = "  ".into();
        assert!(matches!(write_items(dir.path(), &[blank]), Err(RatingError::EmptyLabel(_))));
    }

    fn trial(id: u64, template: &str) -> TrialRecord {
        TrialRecord {
            trial_id: id,
            params: Params::from([("template".to_owned(), ParamValue::Str(template.into()))]),
            objective: Some(0.5),
            status: TrialStatus::Complete,
            topics: vec![],
            error: None,
        }
    }

    #[test]
    fn good_trial_filtering() {
        let history = [trial(0, "T1"), trial(1, "T1"), trial(2, "T2")];
        let means = BTreeMap::from([(0, 2.7), (1, 2.5), (2, 1.2)]);
        let good = filter_good_trials(&means, 2.5, &history);
        assert_eq!(good.trial_ids, [0, 1]);
        match &good.commonality.unwrap()["template"] {
            DimensionSummary::Mode { values, .. } => assert_eq!(values, &[ParamValue::Str("T1".into())]),
            other => panic!("{other:?}"),
        }
        let none = filter_good_trials(&BTreeMap::new(), 2.5, &history);
        assert!(none.trial_ids.is_empty());
        assert!(none.commonality.is_none());
    }

    #[test]
    fn concurrent_submissions_are_all_logged() {
        let items: Vec<RatingItem> = (0..8).map(|i| item(&format!("i{i}"), 0, 0.0)).collect();
        let (d, s) = store(&items);
        std::thread::scope(|scope| {
            for r in 0..4 {
                let s = &s;
                scope.spawn(move || {
                    for i in 0..8 {
                        s.submit(sub(&format!("r{r}"), &format!("i{i}"), (i % 3 + 1) as u8)).unwrap();
                    }
                });
            }
        });
        assert_eq!(s.ratings().len(), 32);
        assert_eq!(replay_log(d.path().join(RATINGS_FILE)).unwrap().len(), 32);
    }
}

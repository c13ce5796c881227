//! Corpus, click-log, query, and judgment ingestion, plus training-instance
//! construction and the deterministic cross-validation split.

mod instance;
mod synth;

pub use instance::{
    apply_mlm_mask, build_doc_sequence, build_sequence, make_finetune_instances,
    make_qdpp_instance, FinetuneStats, InputSequence, Label, MaskScope,
};
pub use synth::{generate_synthetic_corpus, SynthConfig, SynthData};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use crate::error::DataError;
use crate::rng::{derive_rng, Stream};

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn line_err(path: &Path, line: usize, reason: impl Into<String>) -> DataError {
    DataError::MalformedLine {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Document collection: docid → text with stable insertion order.
#[derive(Debug, Clone, Default)]
pub struct DocStore {
    texts: BTreeMap<String, String>,
    order: Vec<String>,
}

#[derive(Deserialize)]
struct DocRecord {
    docid: String,
    text: String,
}

impl DocStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, docid: String, text: String) -> Result<(), DataError> {
        if self.texts.contains_key(&docid) {
            return Err(DataError::DuplicateDocId(docid));
        }
        self.order.push(docid.clone());
        self.texts.insert(docid, text);
        Ok(())
    }

    /// Load JSON-lines with `docid` and `text` fields.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut store = DocStore::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocRecord = serde_json::from_str(&line)
                .map_err(|e| line_err(path, i + 1, e.to_string()))?;
            store
                .insert(rec.docid, rec.text)
                .map_err(|e| line_err(path, i + 1, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn get(&self, docid: &str) -> Result<&str, DataError> {
        self.texts
            .get(docid)
            .map(String::as_str)
            .ok_or_else(|| DataError::UnknownDocId(docid.to_string()))
    }

    pub fn contains(&self, docid: &str) -> bool {
        self.texts.contains_key(docid)
    }

    /// Docids in insertion order.
    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Texts in insertion order; the language-model training corpus.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|id| self.texts[id].as_str())
    }
}

/// One click-log line: this query led to a click on this document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickLogEntry {
    pub qid: String,
    pub query: String,
    pub docid: String,
}

/// Result of loading a click log: the sampled entries plus drop accounting.
#[derive(Debug, Clone)]
pub struct ClickLog {
    pub entries: Vec<ClickLogEntry>,
    /// Lines sampled in but referencing a docid absent from the store.
    pub dropped_unknown_doc: usize,
}

impl ClickLog {
    /// qid → set of clicked docids, the exclusion set for negative sampling.
    pub fn clicked_map(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.qid.clone()).or_default().insert(e.docid.clone());
        }
        map
    }
}

/// Load a tab-separated click log (`qid<TAB>query<TAB>docid[<TAB>url]`),
/// keeping each line independently with probability `sample_rate`. Sampling
/// is a per-line decision from a derived stream, so the result depends only
/// on (file, seed, rate). Entries whose docid is missing from `docs` are
/// dropped and counted.
pub fn load_clicklog(
    path: &Path,
    docs: &DocStore,
    sample_rate: f64,
    seed: u64,
) -> Result<ClickLog, DataError> {
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(DataError::BadSampleRate(sample_rate));
    }
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut entries = Vec::new();
    let mut dropped_unknown_doc = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(line_err(path, i + 1, format!("expected ≥3 tab-separated columns, got {}", cols.len())));
        }
        let (qid, query, docid) = (cols[0], cols[1], cols[2]);
        if qid.is_empty() || query.is_empty() || docid.is_empty() {
            return Err(line_err(path, i + 1, "empty qid, query, or docid"));
        }
        let mut rng = derive_rng(seed, Stream::ClickSample, &[i as u64]);
        if rng.gen::<f64>() >= sample_rate {
            continue;
        }
        if !docs.contains(docid) {
            dropped_unknown_doc += 1;
            continue;
        }
        entries.push(ClickLogEntry {
            qid: qid.to_string(),
            query: query.to_string(),
            docid: docid.to_string(),
        });
    }
    Ok(ClickLog { entries, dropped_unknown_doc })
}

/// Load queries (`qid<TAB>query text`), preserving file order.
pub fn load_queries(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((qid, text)) = line.split_once('\t') else {
            return Err(line_err(path, i + 1, "expected qid<TAB>text"));
        };
        if qid.is_empty() || text.is_empty() {
            return Err(line_err(path, i + 1, "empty qid or query text"));
        }
        if !seen.insert(qid.to_string()) {
            return Err(line_err(path, i + 1, format!("duplicate qid {qid}")));
        }
        out.push((qid.to_string(), text.to_string()));
    }
    Ok(out)
}

/// One relevance judgment, with the pre-collapse grade kept for audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judgment {
    /// 0 or 1; input grade 2 collapses to 1.
    pub grade: u8,
    pub original_grade: u8,
}

/// Relevance judgments keyed by (qid, docid).
#[derive(Debug, Clone, Default)]
pub struct Qrels {
    entries: BTreeMap<String, BTreeMap<String, Judgment>>,
}

impl Qrels {
    /// Load TREC-convention judgments: `qid 0 docid grade`, whitespace
    /// separated, grades in {0, 1, 2}.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut qrels = Qrels::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(line_err(path, i + 1, format!("expected 4 columns, got {}", cols.len())));
            }
            let grade: i64 = cols[3]
                .parse()
                .map_err(|_| line_err(path, i + 1, format!("bad grade {:?}", cols[3])))?;
            if !(0..=2).contains(&grade) {
                return Err(DataError::BadGrade { grade });
            }
            qrels.insert(cols[0], cols[2], grade as u8);
        }
        Ok(qrels)
    }

    pub fn insert(&mut self, qid: &str, docid: &str, grade: u8) {
        let judgment = Judgment { grade: grade.min(1), original_grade: grade };
        self.entries
            .entry(qid.to_string())
            .or_default()
            .insert(docid.to_string(), judgment);
    }

    /// Collapsed grade; `None` when the pair is unjudged.
    pub fn grade(&self, qid: &str, docid: &str) -> Option<u8> {
        self.entries.get(qid).and_then(|m| m.get(docid)).map(|j| j.grade)
    }

    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Judged documents for one query, sorted by docid.
    pub fn judgments(&self, qid: &str) -> impl Iterator<Item = (&str, Judgment)> {
        self.entries
            .get(qid)
            .into_iter()
            .flat_map(|m| m.iter().map(|(d, &j)| (d.as_str(), j)))
    }

    pub fn n_relevant(&self, qid: &str) -> usize {
        self.judgments(qid).filter(|(_, j)| j.grade > 0).count()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keep only the listed qids; used to restrict evaluation to a fold.
    pub fn restrict_to(&self, qids: &BTreeSet<String>) -> Qrels {
        Qrels {
            entries: self
                .entries
                .iter()
                .filter(|(q, _)| qids.contains(*q))
                .map(|(q, m)| (q.clone(), m.clone()))
                .collect(),
        }
    }
}

/// Deal qids into `k` folds: sort lexicographically, then round-robin.
/// Sizes differ by at most one and the result is independent of input order.
pub fn fold_split(qids: &[String], k: usize) -> Result<Vec<Vec<String>>, DataError> {
    if k < 2 {
        return Err(DataError::TooFewFolds(k));
    }
    let mut sorted: Vec<String> = qids.to_vec();
    sorted.sort();
    sorted.dedup();
    if k > sorted.len() {
        return Err(DataError::TooManyFolds { k, n: sorted.len() });
    }
    let mut folds = vec![Vec::new(); k];
    for (i, qid) in sorted.into_iter().enumerate() {
        folds[i % k].push(qid);
    }
    Ok(folds)
}

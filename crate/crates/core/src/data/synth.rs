//! Deterministic synthetic retrieval collection.
//!
//! Documents are drawn from a topic-structured word distribution; every
//! query samples salient words from a planted source document, the click
//! log pairs each query with that document, and the judgments mark it
//! relevant alongside same-topic non-relevant distractors. Salient words are
//! rare (roughly one document each), so a lexical first stage can recover
//! the planted document — the property the generator is tuned for.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ClickLogEntry, DocStore, Qrels};
use crate::error::DataError;
use crate::rng::{derive_rng, Stream};

const SYLLABLES: [&str; 40] = [
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "ka", "ke", "ki", "ko", "ku",
    "la", "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu", "na", "ne", "ni", "no", "nu",
    "ra", "re", "ri", "ro", "ru", "sa", "se", "si", "so", "su",
];

/// Distinct pronounceable word for an index: base-40 syllable expansion,
/// offset so every word has at least three syllables.
fn word(i: usize) -> String {
    let mut n = i + SYLLABLES.len() * SYLLABLES.len();
    let mut parts = Vec::new();
    while n > 0 {
        parts.push(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    parts.reverse();
    parts.concat()
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_queries: usize,
    /// Total distinct words across the common/topic/salient pools.
    pub vocab_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_docs: 200, n_queries: 50, vocab_words: 1200, seed: 17 }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub docs: DocStore,
    pub clicklog: Vec<ClickLogEntry>,
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
}

impl SynthData {
    /// Write the four collection files into `dir` using the loader formats
    /// (`docs.jsonl`, `clicklog.tsv`, `queries.tsv`, `qrels.txt`).
    pub fn write_to(&self, dir: &Path) -> Result<(), DataError> {
        let io = |e: std::io::Error, p: &Path| DataError::Io {
            path: p.display().to_string(),
            source: e,
        };
        let docs_path = dir.join("docs.jsonl");
        let mut body = String::new();
        for id in self.docs.ids() {
            let rec = serde_json::json!({ "docid": id, "text": self.docs.get(id)? });
            body.push_str(&rec.to_string());
            body.push('\n');
        }
        std::fs::write(&docs_path, body).map_err(|e| io(e, &docs_path))?;

        let clicks_path = dir.join("clicklog.tsv");
        let body: String = self
            .clicklog
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.qid, e.query, e.docid))
            .collect();
        std::fs::write(&clicks_path, body).map_err(|e| io(e, &clicks_path))?;

        let queries_path = dir.join("queries.tsv");
        let body: String = self
            .queries
            .iter()
            .map(|(qid, text)| format!("{qid}\t{text}\n"))
            .collect();
        std::fs::write(&queries_path, body).map_err(|e| io(e, &queries_path))?;

        let qrels_path = dir.join("qrels.txt");
        let mut body = String::new();
        for qid in self.qrels.qids().map(str::to_string).collect::<Vec<_>>() {
            for (docid, j) in self.qrels.judgments(&qid) {
                body.push_str(&format!("{qid} 0 {docid} {}\n", j.original_grade));
            }
        }
        std::fs::write(&qrels_path, body).map_err(|e| io(e, &qrels_path))?;
        Ok(())
    }
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> SynthData {
    assert!(cfg.n_docs >= 2, "need at least two documents");
    assert!(cfg.n_queries >= 1, "need at least one query");
    let n_topics = (cfg.n_docs / 20).clamp(2, 20);
    let n_common = (cfg.vocab_words / 20).clamp(8, 60);
    let salient_per_doc = 2;
    // Two thirds of the remaining budget goes to topic cores, the rest to
    // the per-document salient pool.
    let non_common = cfg.vocab_words.saturating_sub(n_common).max(60);
    let per_topic = ((non_common * 2 / 3) / n_topics).max(10);
    let salient_pool = (non_common - per_topic * n_topics).max(2 * cfg.n_docs.min(500));

    let mut next = 0usize;
    let mut take = |n: usize| -> Vec<String> {
        let words = (next..next + n).map(word).collect();
        next += n;
        words
    };
    let common = take(n_common);
    let topics: Vec<Vec<String>> = (0..n_topics).map(|_| take(per_topic)).collect();
    let salient = take(salient_pool);

    let id_width = |n: usize| n.max(10).ilog10() as usize + 1;
    let dw = id_width(cfg.n_docs);
    let qw = id_width(cfg.n_queries);

    let mut docs = DocStore::new();
    let mut doc_topic = Vec::with_capacity(cfg.n_docs);
    let mut doc_salient: Vec<Vec<String>> = Vec::with_capacity(cfg.n_docs);
    for d in 0..cfg.n_docs {
        let mut rng = derive_rng(cfg.seed, Stream::Synth, &[0, d as u64]);
        let topic = d % n_topics;
        let len = rng.gen_range(30..=70);
        let mut words: Vec<String> = (0..len)
            .map(|_| {
                let r = rng.gen::<f64>();
                if r < 0.25 {
                    common.choose(&mut rng).unwrap().clone()
                } else if r < 0.92 {
                    topics[topic].choose(&mut rng).unwrap().clone()
                } else {
                    let other = rng.gen_range(0..n_topics);
                    topics[other].choose(&mut rng).unwrap().clone()
                }
            })
            .collect();
        // Plant this document's salient words at random positions.
        let mine: Vec<String> = (0..salient_per_doc)
            .map(|k| salient[(d * salient_per_doc + k) % salient.len()].clone())
            .collect();
        for w in &mine {
            let pos = rng.gen_range(0..=words.len());
            words.insert(pos, w.clone());
        }
        doc_topic.push(topic);
        doc_salient.push(mine);
        docs.insert(format!("d{d:0dw$}"), words.join(" ")).expect("docids are unique");
    }

    let mut clicklog = Vec::with_capacity(cfg.n_queries);
    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut qrels = Qrels::default();
    for q in 0..cfg.n_queries {
        let mut rng = derive_rng(cfg.seed, Stream::Synth, &[1, q as u64]);
        let d = if cfg.n_queries >= cfg.n_docs {
            rng.gen_range(0..cfg.n_docs)
        } else {
            // Spread planted documents so folds see distinct ones.
            (q * cfg.n_docs / cfg.n_queries + rng.gen_range(0..cfg.n_docs / cfg.n_queries.max(1)).min(cfg.n_docs / cfg.n_queries))
                .min(cfg.n_docs - 1)
        };
        let topic = doc_topic[d];
        let mut q_words: Vec<String> = doc_salient[d].clone();
        for _ in 0..rng.gen_range(0..=2usize) {
            q_words.push(topics[topic].choose(&mut rng).unwrap().clone());
        }
        q_words.dedup();
        let qid = format!("q{q:0qw$}");
        let docid = format!("d{d:0dw$}");
        let text = q_words.join(" ");
        clicklog.push(ClickLogEntry { qid: qid.clone(), query: text.clone(), docid: docid.clone() });
        queries.push((qid.clone(), text));

        let grade = if rng.gen::<f64>() < 0.25 { 2 } else { 1 };
        qrels.insert(&qid, &docid, grade);
        // Same-topic distractors, judged non-relevant.
        let mut same_topic: Vec<usize> =
            (0..cfg.n_docs).filter(|&o| o != d && doc_topic[o] == topic).collect();
        same_topic.shuffle(&mut rng);
        for other in same_topic.into_iter().take(5) {
            qrels.insert(&qid, &format!("d{other:0dw$}"), 0);
        }
    }

    SynthData { docs, clicklog, queries, qrels }
}

//! Ranked run lists and their TREC-format file representation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::RankEvalError;

/// Per-query document rankings under one tag. Entries are stored in rank
/// order; scores are non-increasing and docids unique within a query, which
/// [`RankedRun::push_ranking`] enforces at insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRun {
    tag: String,
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RankedRun {
    pub fn new(tag: impl Into<String>) -> Self {
        RankedRun { tag: tag.into(), rankings: BTreeMap::new() }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn ranking(&self, qid: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(qid).map(Vec::as_slice)
    }

    pub fn n_queries(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    /// Insert one query's ranking, already ordered best-first.
    pub fn push_ranking(
        &mut self,
        qid: &str,
        ranking: Vec<(String, f64)>,
    ) -> Result<(), RankEvalError> {
        let bad = |reason: String| RankEvalError::BadRun { qid: qid.to_string(), reason };
        if self.rankings.contains_key(qid) {
            return Err(bad("query already present in this run".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for pair in ranking.windows(2) {
            if pair[1].1 > pair[0].1 {
                return Err(bad(format!(
                    "scores increase at {} ({} -> {})",
                    pair[1].0, pair[0].1, pair[1].1
                )));
            }
        }
        for (docid, score) in &ranking {
            if !score.is_finite() {
                return Err(bad(format!("non-finite score for {docid}")));
            }
            if !seen.insert(docid.as_str()) {
                return Err(bad(format!("duplicate docid {docid}")));
            }
        }
        self.rankings.insert(qid.to_string(), ranking);
        Ok(())
    }

    /// Write `qid Q0 docid rank score tag` lines, queries in ascending qid
    /// order. Scores print in the shortest form that parses back to the
    /// same float, so a written run reloads losslessly.
    pub fn save_trec(&self, path: &Path) -> Result<(), RankEvalError> {
        let mut out = String::new();
        for (qid, ranking) in &self.rankings {
            for (rank0, (docid, score)) in ranking.iter().enumerate() {
                writeln!(out, "{qid} Q0 {docid} {} {score} {}", rank0 + 1, self.tag)
                    .expect("string write");
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_trec(path: &Path) -> Result<RankedRun, RankEvalError> {
        let body = std::fs::read_to_string(path)?;
        let err = |line: usize, reason: String| RankEvalError::Format {
            path: path.display().to_string(),
            line,
            reason,
        };
        let mut tag: Option<String> = None;
        let mut rankings: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (i, raw) in body.lines().enumerate() {
            let line_no = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split_whitespace().collect();
            let [qid, q0, docid, rank, score, line_tag] = fields[..] else {
                return Err(err(line_no, format!("expected 6 fields, got {}", fields.len())));
            };
            if q0 != "Q0" {
                return Err(err(line_no, format!("second field must be Q0, got {q0:?}")));
            }
            let rank: usize = rank
                .parse()
                .map_err(|_| err(line_no, format!("bad rank {rank:?}")))?;
            let score: f64 = score
                .parse()
                .map_err(|_| err(line_no, format!("bad score {score:?}")))?;
            if !score.is_finite() {
                return Err(err(line_no, format!("non-finite score {score}")));
            }
            match &tag {
                None => tag = Some(line_tag.to_string()),
                Some(t) if t != line_tag => {
                    return Err(err(line_no, format!("mixed tags {t:?} and {line_tag:?}")));
                }
                Some(_) => {}
            }
            let list = rankings.entry(qid.to_string()).or_default();
            if rank != list.len() + 1 {
                return Err(err(
                    line_no,
                    format!("rank {rank} for {qid}, expected {}", list.len() + 1),
                ));
            }
            if let Some((prev_doc, prev_score)) = list.last() {
                if score > *prev_score {
                    return Err(err(
                        line_no,
                        format!("score rises after {prev_doc} ({prev_score} -> {score})"),
                    ));
                }
            }
            if list.iter().any(|(d, _)| d == docid) {
                return Err(err(line_no, format!("duplicate docid {docid} for {qid}")));
            }
            list.push((docid.to_string(), score));
        }
        let tag = tag.ok_or_else(|| err(0, "empty run file".into()))?;
        Ok(RankedRun { tag, rankings })
    }
}

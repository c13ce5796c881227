//! Model input construction: the fixed sequence template, MLM masking, and
//! labeled instances for pair prediction and relevance classification.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ClickLogEntry, DocStore, Qrels};
use crate::error::DataError;
use crate::numerics::IGNORE_TARGET;
use crate::tokenizer::{Vocabulary, CLS_ID, D_ID, MASK_ID, PAD_ID, Q_ID, SEP_ID};

/// Training-stage label. A plain language-model instance carries none.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// Query–document pair prediction; `true` = the pair co-occurred.
    Pair { is_pair: bool },
    /// Relevance classification; `true` = judged relevant.
    Relevance { relevant: bool },
}

impl Label {
    /// Class index for the two-way heads: 1 = positive.
    pub fn target(self) -> u32 {
        match self {
            Label::Pair { is_pair: p } => p as u32,
            Label::Relevance { relevant: r } => r as u32,
        }
    }
}

/// One padded model input. Query–document instances follow the template
/// `[CLS] [Q] q… [SEP] [D] d… [SEP] [PAD]…`; single-document instances are
/// `[CLS] tokens [SEP] [PAD]…`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    /// Token ids, padded to the builder's max_len.
    pub ids: Vec<u32>,
    /// 0 through the first [SEP], 1 from [D] to the final [SEP], 0 at pads.
    pub segments: Vec<u8>,
    /// True at real tokens, false at [PAD].
    pub attention: Vec<bool>,
    /// Original token id at masked positions, [`IGNORE_TARGET`] elsewhere.
    pub mlm_targets: Vec<u32>,
    pub label: Option<Label>,
    /// Provenance; empty strings where not applicable.
    pub qid: String,
    pub docid: String,
}

/// Which positions MLM masking may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskScope {
    #[serde(rename = "all-tokens")]
    AllTokens,
    #[serde(rename = "query-only")]
    QueryOnly,
}

impl std::fmt::Display for MaskScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskScope::AllTokens => "all-tokens",
            MaskScope::QueryOnly => "query-only",
        })
    }
}

impl std::str::FromStr for MaskScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all-tokens" => Ok(MaskScope::AllTokens),
            "query-only" => Ok(MaskScope::QueryOnly),
            other => Err(format!("unknown mask scope {other:?} (all-tokens or query-only)")),
        }
    }
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Count of non-pad positions.
    pub fn n_real(&self) -> usize {
        self.attention.iter().filter(|&&a| a).count()
    }

    /// Positions carrying an MLM target.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.mlm_targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != IGNORE_TARGET)
            .map(|(i, _)| i)
            .collect()
    }

    /// Check the structural invariants; used by property tests and debug
    /// assertions, not on the hot path.
    pub fn check_template(&self) -> Result<(), String> {
        let n = self.ids.len();
        if self.segments.len() != n || self.attention.len() != n || self.mlm_targets.len() != n {
            return Err("parallel arrays differ in length".into());
        }
        let real = self.n_real();
        if real == 0 {
            return Err("no real tokens".into());
        }
        if self.attention[..real].iter().any(|&a| !a) || self.attention[real..].iter().any(|&a| a) {
            return Err("padding must be a contiguous suffix".into());
        }
        if self.ids[real..].iter().any(|&id| id != PAD_ID) {
            return Err("non-PAD token in padding".into());
        }
        if self.segments[real..].iter().any(|&s| s != 0) {
            return Err("pad positions must have segment 0".into());
        }
        if self.ids[0] != CLS_ID {
            return Err("sequence must start with [CLS]".into());
        }
        if self.ids[real - 1] != SEP_ID {
            return Err("last real token must be [SEP]".into());
        }
        let seps: Vec<usize> =
            (0..real).filter(|&i| self.ids[i] == SEP_ID).collect();
        if self.ids[1] == Q_ID {
            // Query–document template.
            if seps.len() != 2 {
                return Err(format!("expected 2 [SEP], found {}", seps.len()));
            }
            let first_sep = seps[0];
            if self.ids[first_sep + 1] != D_ID {
                return Err("[D] must follow the first [SEP]".into());
            }
            for i in 0..real {
                let want = if i <= first_sep { 0 } else { 1 };
                if self.segments[i] != want {
                    return Err(format!("segment at {i} is {}, want {want}", self.segments[i]));
                }
            }
        } else {
            // Single-document template.
            if seps.len() != 1 {
                return Err(format!("expected 1 [SEP], found {}", seps.len()));
            }
            if self.segments[..real].iter().any(|&s| s != 0) {
                return Err("single-document sequences use segment 0 throughout".into());
            }
        }
        for i in 0..n {
            let t = self.mlm_targets[i];
            if t == IGNORE_TARGET {
                continue;
            }
            if !self.attention[i] {
                return Err(format!("MLM target at pad position {i}"));
            }
            if self.ids[i] != MASK_ID {
                return Err(format!("MLM target at unmasked position {i}"));
            }
            if t <= D_ID {
                return Err(format!("MLM target {t} is a special token"));
            }
        }
        Ok(())
    }
}

/// Build a query–document instance. The query is tokenized in full and never
/// silently cut: exceeding `max_query_tokens` (or the room left by the
/// template) is an error. Document tokens are truncated to fit `max_len`.
pub fn build_sequence(
    query: &str,
    doc: &str,
    vocab: &Vocabulary,
    max_len: usize,
    max_query_tokens: usize,
) -> Result<InputSequence, DataError> {
    // [CLS] [Q] … [SEP] [D] … [SEP]
    const N_SPECIAL: usize = 5;
    let q_ids = vocab.encode(query);
    if q_ids.is_empty() {
        return Err(DataError::EmptyQuery);
    }
    let budget = max_len.saturating_sub(N_SPECIAL);
    let q_cap = max_query_tokens.min(budget);
    if q_ids.len() > q_cap {
        return Err(DataError::QueryTooLong { got: q_ids.len(), max: q_cap });
    }
    let mut d_ids = vocab.encode(doc);
    d_ids.truncate(budget - q_ids.len());

    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.push(Q_ID);
    ids.extend_from_slice(&q_ids);
    ids.push(SEP_ID);
    let first_sep = ids.len() - 1;
    ids.push(D_ID);
    ids.extend_from_slice(&d_ids);
    ids.push(SEP_ID);
    let real = ids.len();
    ids.resize(max_len, PAD_ID);

    let segments = (0..max_len)
        .map(|i| u8::from(i > first_sep && i < real))
        .collect();
    let attention = (0..max_len).map(|i| i < real).collect();
    Ok(InputSequence {
        ids,
        segments,
        attention,
        mlm_targets: vec![IGNORE_TARGET; max_len],
        label: None,
        qid: String::new(),
        docid: String::new(),
    })
}

/// Build a single-document instance (`[CLS] tokens [SEP]`), the layout used
/// for language-model training without a query. Tokens beyond `max_len − 2`
/// are truncated; an empty document is an error.
pub fn build_doc_sequence(
    text: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<InputSequence, DataError> {
    let mut t_ids = vocab.encode(text);
    if t_ids.is_empty() {
        return Err(DataError::EmptyQuery);
    }
    t_ids.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend_from_slice(&t_ids);
    ids.push(SEP_ID);
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let attention = (0..max_len).map(|i| i < real).collect();
    Ok(InputSequence {
        ids,
        segments: vec![0; max_len],
        attention,
        mlm_targets: vec![IGNORE_TARGET; max_len],
        label: None,
        qid: String::new(),
        docid: String::new(),
    })
}

/// Positions eligible for masking: real, non-special tokens, optionally
/// restricted to the query span. A sequence without a [Q] marker has no
/// query span, so query-only scope yields nothing there.
fn eligible_positions(seq: &InputSequence, scope: MaskScope) -> Vec<usize> {
    let (lo, hi) = match scope {
        MaskScope::AllTokens => (0, seq.len()),
        MaskScope::QueryOnly => {
            if seq.ids.get(1) == Some(&Q_ID) {
                let first_sep = seq.ids.iter().position(|&id| id == SEP_ID).unwrap_or(0);
                (2, first_sep)
            } else {
                (0, 0)
            }
        }
    };
    (lo..hi)
        .filter(|&i| seq.attention[i] && seq.ids[i] > D_ID)
        .collect()
}

/// Replace each eligible token with `[MASK]` independently at `rate`,
/// recording the original id as the prediction target. A draw that masks
/// nothing is redrawn, so the result always has at least one target.
pub fn apply_mlm_mask(
    seq: &InputSequence,
    rate: f64,
    scope: MaskScope,
    rng: &mut ChaCha8Rng,
) -> Result<InputSequence, DataError> {
    assert!(rate > 0.0 && rate < 1.0, "mask rate must be in (0, 1), got {rate}");
    let eligible = eligible_positions(seq, scope);
    if eligible.is_empty() {
        return Err(DataError::NoEligiblePositions);
    }
    let mut out = seq.clone();
    loop {
        let mut any = false;
        for &pos in &eligible {
            if rng.gen::<f64>() < rate {
                out.mlm_targets[pos] = seq.ids[pos];
                out.ids[pos] = MASK_ID;
                any = true;
            }
        }
        if any {
            return Ok(out);
        }
    }
}

/// Build one pair-prediction instance from a click-log entry. With
/// probability `p_ispair` the clicked document is used (label IsPair);
/// otherwise a uniformly random document outside the query's entire clicked
/// set substitutes (label NotPair).
#[allow(clippy::too_many_arguments)]
pub fn make_qdpp_instance(
    entry: &ClickLogEntry,
    docs: &DocStore,
    clicked: &BTreeMap<String, BTreeSet<String>>,
    vocab: &Vocabulary,
    max_len: usize,
    max_query_tokens: usize,
    p_ispair: f64,
    rng: &mut ChaCha8Rng,
) -> Result<InputSequence, DataError> {
    assert!((0.0..=1.0).contains(&p_ispair), "p_ispair must be in [0, 1]");
    let clicked_set = clicked.get(&entry.qid);
    let is_pair = rng.gen::<f64>() < p_ispair;
    let docid = if is_pair {
        entry.docid.clone()
    } else {
        let excluded = |id: &str| clicked_set.map_or(false, |s| s.contains(id));
        let n_eligible = docs.ids().iter().filter(|id| !excluded(id)).count();
        if n_eligible == 0 {
            return Err(DataError::NoEligibleNegative);
        }
        // Rejection sampling stays uniform over the eligible set.
        loop {
            let idx = rng.gen_range(0..docs.len());
            let candidate = &docs.ids()[idx];
            if !excluded(candidate) {
                break candidate.clone();
            }
        }
    };
    let text = docs.get(&docid)?;
    let mut seq = build_sequence(&entry.query, text, vocab, max_len, max_query_tokens)?;
    seq.label = Some(Label::Pair { is_pair });
    seq.qid = entry.qid.clone();
    seq.docid = docid;
    Ok(seq)
}

/// Skip accounting for relevance-instance construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FinetuneStats {
    pub skipped_unknown_doc: usize,
    pub skipped_missing_query: usize,
    pub skipped_bad_sequence: usize,
}

/// One relevance instance per resolvable judgment, labeled with the
/// collapsed grade. Unresolvable docids or qids without query text are
/// counted and skipped, not fatal. Order is deterministic (qid, then docid);
/// the training loop shuffles per epoch.
pub fn make_finetune_instances(
    qrels: &Qrels,
    queries: &[(String, String)],
    docs: &DocStore,
    vocab: &Vocabulary,
    max_len: usize,
    max_query_tokens: usize,
) -> Result<(Vec<InputSequence>, FinetuneStats), DataError> {
    let query_text: BTreeMap<&str, &str> =
        queries.iter().map(|(q, t)| (q.as_str(), t.as_str())).collect();
    let mut out = Vec::new();
    let mut stats = FinetuneStats::default();
    for qid in qrels.qids().map(str::to_string).collect::<Vec<_>>() {
        let Some(&text) = query_text.get(qid.as_str()) else {
            stats.skipped_missing_query += qrels.judgments(&qid).count();
            continue;
        };
        for (docid, judgment) in qrels.judgments(&qid) {
            let Ok(doc_text) = docs.get(docid) else {
                stats.skipped_unknown_doc += 1;
                continue;
            };
            match build_sequence(text, doc_text, vocab, max_len, max_query_tokens) {
                Ok(mut seq) => {
                    seq.label = Some(Label::Relevance { relevant: judgment.grade > 0 });
                    seq.qid = qid.clone();
                    seq.docid = docid.to_string();
                    out.push(seq);
                }
                Err(DataError::EmptyQuery | DataError::QueryTooLong { .. }) => {
                    stats.skipped_bad_sequence += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((out, stats))
}

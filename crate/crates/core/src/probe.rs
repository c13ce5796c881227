//! Query-slot prediction diagnostic.
//!
//! Builds `[CLS] [Q] [MASK]×n [SEP] [D] doc… [SEP]`, runs one forward pass,
//! and reads the language-model head's top guesses at each masked position.
//! A checkpoint that has learned query–document structure fills the slot with
//! query-like tokens; an untrained one leaks artifacts such as word-internal
//! "##" continuation pieces into the first position.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InputSequence;
use crate::error::ProbeError;
use crate::model::{check_vocab_size, encode_sequence, mlm_logits, BoundWeights, EncoderWeights};
use crate::numerics::{Graph, IGNORE_TARGET};
use crate::tokenizer::{Vocabulary, CLS_ID, D_ID, PAD_ID, Q_ID, SEP_ID};
use crate::tokenizer::MASK_ID;

/// Width of the masked query slot.
pub const DEFAULT_N_MASKS: usize = 3;
/// Predictions listed per position.
pub const DEFAULT_TOP_K: usize = 5;

/// One ranked prediction: a vocabulary token and its softmax probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub prob: f64,
}

/// Ranked predictions for each masked query position, probabilities
/// descending, ties broken by ascending token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub positions: Vec<Vec<TokenProb>>,
}

/// The probe input: `[CLS] [Q] [MASK]×n [SEP] [D] doc… [SEP]`, document
/// truncated to fit `max_len`. The mask slot sets no prediction targets;
/// the caller reads logits at the slot positions directly.
fn probe_sequence(
    doc_text: &str,
    vocab: &Vocabulary,
    max_len: usize,
    n_masks: usize,
) -> Result<InputSequence, ProbeError> {
    const N_SPECIAL: usize = 5;
    let mut d_ids = vocab.encode(doc_text);
    if d_ids.is_empty() {
        return Err(ProbeError::EmptyDocument);
    }
    let need = N_SPECIAL + n_masks + 1;
    if need > max_len {
        return Err(ProbeError::SlotTooWide { n_masks, max_len });
    }
    d_ids.truncate(max_len - N_SPECIAL - n_masks);

    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.push(Q_ID);
    ids.extend(std::iter::repeat(MASK_ID).take(n_masks));
    ids.push(SEP_ID);
    let first_sep = ids.len() - 1;
    ids.push(D_ID);
    ids.extend_from_slice(&d_ids);
    ids.push(SEP_ID);
    let real = ids.len();
    ids.resize(max_len, PAD_ID);

    let segments = (0..max_len).map(|i| u8::from(i > first_sep && i < real)).collect();
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

/// Mask the query slot of a document sequence and rank the model's token
/// predictions at each slot position. One forward pass, no dropout, no
/// iterative refinement; positions are predicted independently. `top_k` is
/// clamped to the vocabulary size.
pub fn predict_query(
    weights: &EncoderWeights,
    doc_text: &str,
    vocab: &Vocabulary,
    n_masks: usize,
    top_k: usize,
) -> Result<ProbeResult, ProbeError> {
    if n_masks == 0 {
        return Err(ProbeError::NoMasks);
    }
    check_vocab_size(weights, vocab)?;
    let seq = probe_sequence(doc_text, vocab, weights.config().max_len, n_masks)?;
    let slot: Vec<usize> = (2..2 + n_masks).collect();

    let mut g = Graph::new();
    let b = BoundWeights::bind(&mut g, weights);
    let hidden = encode_sequence(&mut g, weights, &b, &seq, None)?;
    let logits = mlm_logits(&mut g, weights, &b, hidden, &seq, &slot)?;
    let probs = g.softmax_rows(logits, None);
    let values = g.values(probs);

    let v = vocab.len();
    let k = top_k.min(v);
    let positions = (0..n_masks)
        .map(|row| {
            let row_probs = &values[row * v..(row + 1) * v];
            let mut ranked: Vec<(u32, f64)> =
                (0..v as u32).map(|id| (id, row_probs[id as usize])).collect();
            ranked.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).expect("softmax output is finite").then(a.0.cmp(&b.0))
            });
            ranked
                .into_iter()
                .take(k)
                .map(|(id, prob)| TokenProb { token: vocab.token(id).to_string(), prob })
                .collect()
        })
        .collect();
    Ok(ProbeResult { positions })
}

/// [`predict_query`] over many documents, fanned out across threads over the
/// shared immutable weights.
pub fn predict_queries(
    weights: &EncoderWeights,
    doc_texts: &[&str],
    vocab: &Vocabulary,
    n_masks: usize,
    top_k: usize,
) -> Result<Vec<ProbeResult>, ProbeError> {
    doc_texts
        .par_iter()
        .map(|text| predict_query(weights, text, vocab, n_masks, top_k))
        .collect()
}

/// True when any predicted token at any position is a token of `query` under
/// the same vocabulary. Drives the hit-rate diagnostic: the rate should rise
/// after training on click pairs.
pub fn mentions_query_token(result: &ProbeResult, query: &str, vocab: &Vocabulary) -> bool {
    let truth: BTreeSet<&str> =
        vocab.encode(query).iter().map(|&id| vocab.token(id)).collect();
    result.positions.iter().flatten().any(|tp| truth.contains(tp.token.as_str()))
}

/// True when the top prediction for the first slot position is a "##"
/// continuation piece. Encoded text never starts a word with one, so a high
/// rate across documents marks a checkpoint that has not learned what
/// belongs at the start of a query.
pub fn leading_continuation_anomaly(result: &ProbeResult) -> bool {
    result
        .positions
        .first()
        .and_then(|preds| preds.first())
        .is_some_and(|tp| tp.token.starts_with("##"))
}

/// One labelled column group of a side-by-side report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeColumn {
    pub label: String,
    #[serde(flatten)]
    pub result: ProbeResult,
}

/// Predictions for one document across several checkpoints, arranged for
/// side-by-side comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub columns: Vec<ProbeColumn>,
}

/// Probe one document with each checkpoint and collect the results into a
/// side-by-side report. All checkpoints must share the vocabulary.
pub fn probe_report(
    checkpoints: &[(String, &EncoderWeights)],
    doc_text: &str,
    vocab: &Vocabulary,
    n_masks: usize,
    top_k: usize,
) -> Result<ProbeReport, ProbeError> {
    if let Some(((_, first), rest)) = checkpoints.split_first() {
        let first_v = first.config().vocab_size;
        for (_, w) in rest {
            if w.config().vocab_size != first_v {
                return Err(ProbeError::VocabMismatch(first_v, w.config().vocab_size));
            }
        }
    }
    let columns = checkpoints
        .iter()
        .map(|(label, w)| {
            Ok(ProbeColumn {
                label: label.clone(),
                result: predict_query(w, doc_text, vocab, n_masks, top_k)?,
            })
        })
        .collect::<Result<_, ProbeError>>()?;
    Ok(ProbeReport { columns })
}

impl ProbeReport {
    /// Aligned text table: one column group per checkpoint, a sub-column per
    /// slot position, rows Top1..Topk. Tokens render verbatim, so "##"
    /// continuation pieces are visible. Probabilities live in the JSON twin.
    pub fn render_table(&self) -> String {
        let k = self
            .columns
            .iter()
            .flat_map(|c| c.result.positions.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let row_label_w = format!("Top{k}").len().max(4);

        // Per-group sub-column widths; the last sub-column absorbs any extra
        // width the group label needs.
        let groups: Vec<(usize, Vec<usize>)> = self
            .columns
            .iter()
            .map(|c| {
                let mut widths: Vec<usize> = c
                    .result
                    .positions
                    .iter()
                    .enumerate()
                    .map(|(i, preds)| {
                        preds
                            .iter()
                            .map(|tp| tp.token.len())
                            .chain([format!("q^{}", i + 1).len()])
                            .max()
                            .unwrap_or(3)
                    })
                    .collect();
                if widths.is_empty() {
                    widths.push(c.label.len().max(3));
                }
                let inner: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                if c.label.len() > inner {
                    *widths.last_mut().unwrap() += c.label.len() - inner;
                }
                (widths.iter().sum::<usize>() + 2 * (widths.len() - 1), widths)
            })
            .collect();

        let mut out = String::new();
        let _ = write!(out, "{:row_label_w$}", "");
        for (c, (group_w, _)) in self.columns.iter().zip(&groups) {
            let _ = write!(out, "  | {:group_w$}", c.label);
        }
        out.push('\n');
        let _ = write!(out, "{:row_label_w$}", "");
        for (c, (_, widths)) in self.columns.iter().zip(&groups) {
            out.push_str("  | ");
            for (i, w) in widths.iter().enumerate() {
                if i > 0 {
                    out.push_str("  ");
                }
                let head =
                    if i < c.result.positions.len() { format!("q^{}", i + 1) } else { String::new() };
                let _ = write!(out, "{head:w$}");
            }
        }
        out.push('\n');
        for rank in 0..k {
            let _ = write!(out, "{:row_label_w$}", format!("Top{}", rank + 1));
            for (c, (_, widths)) in self.columns.iter().zip(&groups) {
                out.push_str("  | ");
                for (i, w) in widths.iter().enumerate() {
                    if i > 0 {
                        out.push_str("  ");
                    }
                    let token = c
                        .result
                        .positions
                        .get(i)
                        .and_then(|preds| preds.get(rank))
                        .map_or("", |tp| tp.token.as_str());
                    let _ = write!(out, "{token:w$}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Machine-readable twin of the table; parses back with [`ProbeReport::from_json`].
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

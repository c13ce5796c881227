//! Neural re-ranking of first-stage candidate lists.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{build_sequence, DocStore};
use crate::error::RankEvalError;
use crate::model::{check_vocab_size, score_relevance, EncoderWeights};
use crate::tokenizer::Vocabulary;

use super::run::RankedRun;

/// Re-score every candidate with the model's relevant-class probability and
/// re-sort (descending score, ties by ascending docid). The candidate set
/// per query is exactly preserved; queries fan out across threads over the
/// shared immutable weights.
pub fn rerank(
    weights: &EncoderWeights,
    queries: &[(String, String)],
    candidates: &RankedRun,
    docs: &DocStore,
    vocab: &Vocabulary,
    tag: &str,
    max_query_tokens: usize,
) -> Result<RankedRun, RankEvalError> {
    check_vocab_size(weights, vocab)?;
    let text_of: BTreeMap<&str, &str> =
        queries.iter().map(|(qid, text)| (qid.as_str(), text.as_str())).collect();
    let qids: Vec<&str> = candidates.qids().collect();
    let rescored: Vec<(String, Vec<(String, f64)>)> = qids
        .par_iter()
        .map(|&qid| {
            let text = text_of.get(qid).ok_or_else(|| RankEvalError::BadRun {
                qid: qid.to_string(),
                reason: "no query text supplied for this qid".into(),
            })?;
            let ranking = candidates.ranking(qid).expect("qid from this run");
            let mut rescored = Vec::with_capacity(ranking.len());
            for (docid, _) in ranking {
                let doc_text = docs
                    .get(docid)
                    .map_err(|_| RankEvalError::UnresolvableDocId(docid.clone()))?;
                let seq = build_sequence(
                    text,
                    doc_text,
                    vocab,
                    weights.config().max_len,
                    max_query_tokens,
                )?;
                rescored.push((docid.clone(), score_relevance(weights, &seq)?));
            }
            rescored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).expect("probabilities are finite").then(a.0.cmp(&b.0))
            });
            Ok((qid.to_string(), rescored))
        })
        .collect::<Result<_, RankEvalError>>()?;

    let mut out = RankedRun::new(tag);
    for (qid, ranking) in rescored {
        out.push_ranking(&qid, ranking)?;
    }
    Ok(out)
}

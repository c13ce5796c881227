//! Rank-quality metrics over binary relevance: reciprocal rank, average
//! precision, and nDCG at a cutoff.
//!
//! Judged grades arrive already collapsed to {0, 1}; unjudged documents
//! count as non-relevant. Queries with no relevant judged document carry no
//! signal for any of these metrics, so they are skipped and counted rather
//! than averaged in as zeros.

use std::collections::BTreeMap;

use crate::data::Qrels;
use crate::error::RankEvalError;

use super::run::RankedRun;

/// One metric over one run: per-query values for every query with at least
/// one relevant judged document, their arithmetic mean, and the number of
/// queries skipped for lack of one.
#[derive(Debug, Clone, PartialEq)]
pub struct PerQuery {
    pub values: BTreeMap<String, f64>,
    pub mean: f64,
    pub zero_relevant: usize,
}

fn collect(
    run: &RankedRun,
    qrels: &Qrels,
    value: impl Fn(&[(String, f64)], &str, usize) -> f64,
) -> PerQuery {
    let mut values = BTreeMap::new();
    let mut zero_relevant = 0usize;
    for qid in run.qids() {
        let total_relevant = qrels.n_relevant(qid);
        if total_relevant == 0 {
            zero_relevant += 1;
            continue;
        }
        let ranking = run.ranking(qid).expect("qid from this run");
        values.insert(qid.to_string(), value(ranking, qid, total_relevant));
    }
    let mean = if values.is_empty() {
        0.0
    } else {
        values.values().sum::<f64>() / values.len() as f64
    };
    PerQuery { values, mean, zero_relevant }
}

fn relevant(qrels: &Qrels, qid: &str, docid: &str) -> bool {
    qrels.grade(qid, docid) == Some(1)
}

/// Reciprocal rank of the first relevant document over the full ranking
/// depth; 0 when no relevant document is retrieved.
pub fn mrr(run: &RankedRun, qrels: &Qrels) -> PerQuery {
    collect(run, qrels, |ranking, qid, _| {
        ranking
            .iter()
            .position(|(d, _)| relevant(qrels, qid, d))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

/// Average precision: precision at each retrieved relevant document's rank,
/// summed and divided by the total number of relevant documents in the
/// judgments, so unretrieved relevants pull the value down.
pub fn average_precision(run: &RankedRun, qrels: &Qrels) -> PerQuery {
    collect(run, qrels, |ranking, qid, total_relevant| {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, (docid, _)) in ranking.iter().enumerate() {
            if relevant(qrels, qid, docid) {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / total_relevant as f64
    })
}

/// nDCG at cutoff `k` with binary gains: DCG = Σ rel_i / log2(rank_i + 1)
/// over the top k, normalized by the DCG of an ideal ranking.
pub fn ndcg_at(run: &RankedRun, qrels: &Qrels, k: usize) -> Result<PerQuery, RankEvalError> {
    if k == 0 {
        return Err(RankEvalError::BadRun {
            qid: "*".into(),
            reason: "nDCG cutoff must be at least 1".into(),
        });
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    Ok(collect(run, qrels, |ranking, qid, total_relevant| {
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, (d, _))| relevant(qrels, qid, d))
            .map(|(i, _)| discount(i + 1))
            .sum();
        let ideal: f64 = (1..=total_relevant.min(k)).map(discount).sum();
        dcg / ideal
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_of(rankings: &[(&str, &[&str])]) -> RankedRun {
        let mut run = RankedRun::new("test");
        for (qid, docs) in rankings {
            let ranking = docs
                .iter()
                .enumerate()
                .map(|(i, d)| (d.to_string(), 1.0 - 0.1 * i as f64))
                .collect();
            run.push_ranking(qid, ranking).unwrap();
        }
        run
    }

    fn qrels_of(judgments: &[(&str, &str, u8)]) -> Qrels {
        let mut qrels = Qrels::default();
        for (qid, docid, grade) in judgments {
            qrels.insert(qid, docid, *grade);
        }
        qrels
    }

    #[test]
    fn perfect_ranking_scores_one_everywhere() {
        let run = run_of(&[("q1", &["d1", "d2", "d3"])]);
        let qrels = qrels_of(&[("q1", "d1", 1), ("q1", "d2", 1), ("q1", "d3", 0)]);
        assert_eq!(mrr(&run, &qrels).mean, 1.0);
        assert_eq!(average_precision(&run, &qrels).mean, 1.0);
        for k in [1, 2, 5] {
            assert_eq!(ndcg_at(&run, &qrels, k).unwrap().mean, 1.0, "k={k}");
        }
    }

    #[test]
    fn first_relevant_at_rank_two_halves_mrr() {
        let run = run_of(&[("q1", &["d9", "d1"])]);
        let qrels = qrels_of(&[("q1", "d1", 1)]);
        assert_eq!(mrr(&run, &qrels).mean, 0.5);
    }

    #[test]
    fn relevant_at_ranks_one_and_three() {
        let run = run_of(&[("q1", &["d1", "d2", "d3", "d4", "d5"])]);
        let qrels = qrels_of(&[("q1", "d1", 1), ("q1", "d3", 1), ("q1", "d2", 0)]);

        let ap = average_precision(&run, &qrels).mean;
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.8333333333333333).abs() < 1e-9);

        let ndcg5 = ndcg_at(&run, &qrels, 5).unwrap().mean;
        let want = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((ndcg5 - want).abs() < 1e-15);
        assert!((ndcg5 - 0.9197207891481876).abs() < 1e-9);
    }

    #[test]
    fn no_relevant_retrieved_scores_zero_not_skipped() {
        // d1 is relevant but unretrieved: the query still counts, at value 0.
        let run = run_of(&[("q1", &["d2", "d3"])]);
        let qrels = qrels_of(&[("q1", "d1", 1), ("q1", "d2", 0)]);
        let m = mrr(&run, &qrels);
        assert_eq!(m.values["q1"], 0.0);
        assert_eq!(m.zero_relevant, 0);
        assert_eq!(average_precision(&run, &qrels).values["q1"], 0.0);
        assert_eq!(ndcg_at(&run, &qrels, 5).unwrap().values["q1"], 0.0);
    }

    #[test]
    fn queries_without_relevant_judgments_are_skipped_and_counted() {
        let run = run_of(&[("q1", &["d1"]), ("q2", &["d2"]), ("q3", &["d3"])]);
        let qrels = qrels_of(&[("q1", "d1", 1), ("q2", "d2", 0)]);
        // q2 is judged but has no relevant doc; q3 is entirely unjudged.
        let m = mrr(&run, &qrels);
        assert_eq!(m.values.len(), 1);
        assert_eq!(m.zero_relevant, 2);
        assert_eq!(m.mean, 1.0);
    }

    #[test]
    fn unjudged_documents_count_non_relevant() {
        let run = run_of(&[("q1", &["dx", "d1"])]);
        let qrels = qrels_of(&[("q1", "d1", 1)]);
        assert_eq!(mrr(&run, &qrels).mean, 0.5);
    }

    #[test]
    fn unretrieved_relevants_count_against_ap() {
        let run = run_of(&[("q1", &["d1"])]);
        let qrels = qrels_of(&[("q1", "d1", 1), ("q1", "d2", 1)]);
        assert_eq!(average_precision(&run, &qrels).mean, 0.5);
    }

    #[test]
    fn ndcg_cutoff_truncates_the_ranking() {
        let run = run_of(&[("q1", &["d9", "d8", "d1"])]);
        let qrels = qrels_of(&[("q1", "d1", 1)]);
        // Only relevant document sits at rank 3, outside k=2.
        assert_eq!(ndcg_at(&run, &qrels, 2).unwrap().mean, 0.0);
        let at3 = ndcg_at(&run, &qrels, 3).unwrap().mean;
        assert!((at3 - 1.0 / 4f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn ndcg_ideal_uses_min_of_relevant_count_and_cutoff() {
        // Three relevant total, cutoff 2: ideal DCG has two terms only.
        let run = run_of(&[("q1", &["d1", "d2", "d3"])]);
        let qrels = qrels_of(&[("q1", "d1", 1), ("q1", "d2", 1), ("q1", "d3", 1)]);
        assert_eq!(ndcg_at(&run, &qrels, 2).unwrap().mean, 1.0);
    }

    #[test]
    fn zero_cutoff_is_rejected() {
        let run = run_of(&[("q1", &["d1"])]);
        assert!(ndcg_at(&run, &qrels_of(&[("q1", "d1", 1)]), 0).is_err());
    }

    #[test]
    fn mean_averages_over_evaluated_queries() {
        let run = run_of(&[("q1", &["d1"]), ("q2", &["d9", "d2"])]);
        let qrels = qrels_of(&[("q1", "d1", 1), ("q2", "d2", 1)]);
        let m = mrr(&run, &qrels);
        assert_eq!(m.mean, (1.0 + 0.5) / 2.0);
    }
}

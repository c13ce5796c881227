//! Side-by-side evaluation of a run against a baseline: all metrics, paired
//! significance tests, and the rendered table / JSON twin.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::data::Qrels;
use crate::error::RankEvalError;

use super::metrics::{average_precision, mrr, ndcg_at, PerQuery};
use super::run::RankedRun;
use super::stats::paired_ttest;

/// Significance mark for a p-value: strongest threshold first. An undefined
/// p (zero-variance differences) earns no mark.
pub(crate) fn significance_mark(p: Option<f64>) -> &'static str {
    match p {
        Some(p) if p < 0.01 => "*",
        Some(p) if p < 0.05 => "†",
        Some(p) if p < 0.10 => "‡",
        _ => "",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub run_mean: f64,
    pub baseline_mean: f64,
    pub delta: f64,
    /// t statistic of the paired test; absent when the differences have
    /// zero variance or fewer than two queries were evaluated.
    pub t: Option<f64>,
    /// Two-sided p; absent in the same cases, printed as 1 in the table.
    pub p: Option<f64>,
    pub mark: String,
    pub per_query_run: std::collections::BTreeMap<String, f64>,
    pub per_query_baseline: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub run_tag: String,
    pub baseline_tag: String,
    /// Queries contributing to every mean (at least one relevant judgment).
    pub evaluated_queries: usize,
    /// Queries present in the runs but skipped for lack of one.
    pub zero_relevant_queries: usize,
    pub rows: Vec<MetricRow>,
}

fn row(metric: &str, run: PerQuery, baseline: PerQuery) -> MetricRow {
    let a: Vec<f64> = run.values.values().copied().collect();
    let b: Vec<f64> = baseline.values.values().copied().collect();
    let test = if a.len() >= 2 { paired_ttest(&a, &b).ok() } else { None };
    let (t, p) = match test {
        Some(t) => (t.t.is_finite().then_some(t.t), t.p),
        None => (None, None),
    };
    MetricRow {
        metric: metric.to_string(),
        run_mean: run.mean,
        baseline_mean: baseline.mean,
        delta: run.mean - baseline.mean,
        t,
        p,
        mark: significance_mark(p).to_string(),
        per_query_run: run.values,
        per_query_baseline: baseline.values,
    }
}

/// Compare `run` to `baseline` over the same queries: MRR, MAP, and nDCG at
/// each cutoff, with a paired two-sided t-test per metric. Both runs must
/// rank exactly the same qid set.
pub fn evaluate(
    run: &RankedRun,
    baseline: &RankedRun,
    qrels: &Qrels,
    cutoffs: &[usize],
) -> Result<MetricsReport, RankEvalError> {
    let run_qids: BTreeSet<&str> = run.qids().collect();
    let base_qids: BTreeSet<&str> = baseline.qids().collect();
    if run_qids != base_qids {
        let only_run: Vec<&&str> = run_qids.difference(&base_qids).take(3).collect();
        let only_base: Vec<&&str> = base_qids.difference(&run_qids).take(3).collect();
        return Err(RankEvalError::QidSetMismatch(format!(
            "only in {}: {only_run:?}; only in {}: {only_base:?}",
            run.tag(),
            baseline.tag()
        )));
    }

    let first = mrr(run, qrels);
    let evaluated_queries = first.values.len();
    let zero_relevant_queries = first.zero_relevant;

    let mut rows = vec![
        row("mrr", first, mrr(baseline, qrels)),
        row("map", average_precision(run, qrels), average_precision(baseline, qrels)),
    ];
    for &k in cutoffs {
        rows.push(row(
            &format!("ndcg@{k}"),
            ndcg_at(run, qrels, k)?,
            ndcg_at(baseline, qrels, k)?,
        ));
    }
    Ok(MetricsReport {
        run_tag: run.tag().to_string(),
        baseline_tag: baseline.tag().to_string(),
        evaluated_queries,
        zero_relevant_queries,
        rows,
    })
}

impl MetricsReport {
    /// Aligned text table. Significance marks follow the run mean; an
    /// undefined p prints as the conventional 1.0000.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "run {} vs baseline {} ({} queries evaluated, {} skipped with no relevant judgments)\n",
            self.run_tag, self.baseline_tag, self.evaluated_queries, self.zero_relevant_queries
        ));
        let metric_w = self
            .rows
            .iter()
            .map(|r| r.metric.len())
            .chain(["metric".len()])
            .max()
            .unwrap_or(6);
        let base_w = self.baseline_tag.len().max(8);
        let run_w = (self.run_tag.len() + 1).max(9);
        out.push_str(&format!(
            "{:<metric_w$}  {:>base_w$}  {:>run_w$}  {:>8}  {:>7}\n",
            "metric", self.baseline_tag, self.run_tag, "delta", "p"
        ));
        for r in &self.rows {
            let marked = format!("{:.4}{}", r.run_mean, r.mark);
            let p = r.p.map_or("1.0000".to_string(), |p| format!("{p:.4}"));
            out.push_str(&format!(
                "{:<metric_w$}  {:>base_w$.4}  {:>run_w$}  {:>+8.4}  {:>7}\n",
                r.metric, r.baseline_mean, marked, r.delta, p
            ));
        }
        out
    }

    /// Machine-readable twin of the table, including per-query values.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

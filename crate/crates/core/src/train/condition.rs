//! The six experimental conditions: composed training pipelines over
//! cross-validation folds and multiple seeds, producing TREC runs, stage
//! checkpoints, and an aggregated report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    fold_split, ClickLog, ClickLogEntry, DocStore, Qrels,
};
use crate::error::{Error, TrainError};
use crate::model::{
    save_checkpoint, CheckpointMeta, EncoderWeights, ModelConfig, Stage,
};
use crate::rankeval::{average_precision, mrr, ndcg_at, paired_ttest, rerank, MetricRow, MetricsReport, RankedRun};
use crate::rankeval::significance_mark;
use crate::retrieval::{Bm25Params, InvertedIndex};
use crate::rng::{derive_rng, Stream};
use crate::tokenizer::Vocabulary;

use super::adamw::AdamwConfig;
use super::engine::{coarse_tune, fine_tune, pretrain_mlm, EpochMetrics, TrainPlan};

/// One of the compared methods. The neural conditions differ only in which
/// stages run between random initialization and re-ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    /// First-stage ranking used verbatim; no neural model.
    #[serde(rename = "bm25")]
    Bm25,
    /// Language pre-training only; the relevance head stays at its random
    /// initialization.
    #[serde(rename = "pre-trained")]
    PreTrained,
    /// Pre-training then click-pair training; ranks with the pair head.
    #[serde(rename = "coarse-tuned")]
    CoarseTuned,
    /// Pre-training then relevance fine-tuning.
    #[serde(rename = "fine-tuned")]
    FineTuned,
    /// Pre-training, continued language training on the clicked documents,
    /// then fine-tuning.
    #[serde(rename = "cont-pre+fine")]
    ContPreFine,
    /// Pre-training, click-pair training, then fine-tuning.
    #[serde(rename = "coarse+fine")]
    CoarseFine,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Bm25,
        Condition::PreTrained,
        Condition::CoarseTuned,
        Condition::FineTuned,
        Condition::ContPreFine,
        Condition::CoarseFine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Bm25 => "bm25",
            Condition::PreTrained => "pre-trained",
            Condition::CoarseTuned => "coarse-tuned",
            Condition::FineTuned => "fine-tuned",
            Condition::ContPreFine => "cont-pre+fine",
            Condition::CoarseFine => "coarse+fine",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Condition::ALL.iter().map(|c| c.name()).collect();
                format!("unknown condition {s:?} (expected one of {})", names.join(", "))
            })
    }
}

/// Everything a condition run is parameterized by. Stage plans carry their
/// hyperparameters; their `seed` fields are overridden per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub condition: Condition,
    pub model: ModelConfig,
    pub pretrain: TrainPlan,
    pub cont_pre: TrainPlan,
    pub coarse: TrainPlan,
    pub finetune: TrainPlan,
    pub adamw: AdamwConfig,
    /// Fraction of the click log each trial keeps (sampled per seed).
    pub sampling_rate: f64,
    /// Cross-validation fold count.
    pub folds: usize,
    /// How many of the folds actually train and evaluate.
    pub folds_run: usize,
    /// One full train/evaluate trial per seed; scores average over them.
    pub seeds: Vec<u64>,
    pub bm25: Bm25Params,
    /// Candidate depth of the first stage.
    pub first_stage_k: usize,
    /// Cutoff of the reported nDCG.
    pub ndcg_k: usize,
}

impl ConditionSpec {
    pub fn new(condition: Condition, model: ModelConfig) -> Self {
        ConditionSpec {
            condition,
            model,
            pretrain: TrainPlan::pretrain(0),
            cont_pre: TrainPlan::cont_pre(0),
            coarse: TrainPlan::coarse(0),
            finetune: TrainPlan::finetune(0),
            adamw: AdamwConfig::default(),
            sampling_rate: 0.08,
            folds: 5,
            folds_run: 2,
            seeds: vec![1, 2, 3, 4, 5],
            bm25: Bm25Params::default(),
            first_stage_k: 100,
            ndcg_k: 5,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadCondition(msg));
        if self.folds_run == 0 || self.folds_run > self.folds {
            return bad(format!(
                "folds_run {} outside 1..={}",
                self.folds_run, self.folds
            ));
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return bad(format!("sampling rate {} outside (0, 1]", self.sampling_rate));
        }
        if self.first_stage_k == 0 {
            return bad("first_stage_k must be at least 1".into());
        }
        if self.ndcg_k == 0 {
            return bad("ndcg_k must be at least 1".into());
        }
        self.model.validate().map_err(TrainError::Model)
    }
}

/// The collection a condition runs over. The click log is the full,
/// unsampled log; sampling happens per trial inside the run.
#[derive(Debug, Clone, Copy)]
pub struct Collection<'a> {
    pub docs: &'a DocStore,
    pub log: &'a ClickLog,
    pub queries: &'a [(String, String)],
    pub qrels: &'a Qrels,
    pub vocab: &'a Vocabulary,
}

/// Scores of one (seed, fold) trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub seed: u64,
    pub fold: usize,
    pub mrr: f64,
    pub map: f64,
    pub ndcg: f64,
    pub evaluated_queries: usize,
}

/// Aggregated outcome of a condition: every trial's scores, per-query means
/// over seeds (folds concatenate, so each query appears once), and the
/// pooled means that headline the comparison tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub trials: Vec<TrialRow>,
    /// metric name → qid → value averaged over seeds.
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    /// metric name → mean over the per-query values.
    pub means: BTreeMap<String, f64>,
    /// Evaluation queries skipped for lack of a relevant judgment.
    pub zero_relevant_queries: usize,
    pub spec: ConditionSpec,
}

impl ConditionReport {
    pub fn metric_names(&self) -> Vec<&str> {
        self.per_query.keys().map(String::as_str).collect()
    }

    /// Aligned per-trial table plus the pooled means.
    pub fn render_table(&self) -> String {
        let ndcg_name = format!("ndcg@{}", self.spec.ndcg_k);
        let mut out = format!(
            "condition {} ({} folds of {}, seeds {:?})\n",
            self.condition, self.spec.folds_run, self.spec.folds, self.spec.seeds
        );
        out.push_str(&format!(
            "{:>6}  {:>4}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "seed", "fold", "mrr", "map", ndcg_name, "queries"
        ));
        for t in &self.trials {
            out.push_str(&format!(
                "{:>6}  {:>4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7}\n",
                t.seed, t.fold, t.mrr, t.map, t.ndcg, t.evaluated_queries
            ));
        }
        out.push_str("pooled per-query means:");
        for (metric, mean) in &self.means {
            out.push_str(&format!("  {metric} {mean:.4}"));
        }
        out.push('\n');
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Per-entry sampling decision keyed by entry index, mirroring the click-log
/// loader's per-line rule, so the kept set depends only on (log, seed, rate).
fn sample_entries(entries: &[ClickLogEntry], rate: f64, seed: u64) -> Vec<ClickLogEntry> {
    if rate >= 1.0 {
        return entries.to_vec();
    }
    entries
        .iter()
        .enumerate()
        .filter(|(i, _)| derive_rng(seed, Stream::ClickSample, &[*i as u64]).gen::<f64>() < rate)
        .map(|(_, e)| e.clone())
        .collect()
}

/// The documents clicked in a log, as a store for document-only training.
fn clicked_docs(entries: &[ClickLogEntry], docs: &DocStore) -> Result<DocStore, Error> {
    let mut out = DocStore::new();
    let mut seen = BTreeSet::new();
    for e in entries {
        if seen.insert(e.docid.as_str()) {
            out.insert(e.docid.clone(), docs.get(&e.docid)?.to_string())?;
        }
    }
    Ok(out)
}

struct WorkDirs {
    checkpoints: PathBuf,
    runs: PathBuf,
    reports: PathBuf,
    logs: PathBuf,
}

fn prepare_work_dir(work_dir: &Path) -> Result<WorkDirs, std::io::Error> {
    let dirs = WorkDirs {
        checkpoints: work_dir.join("checkpoints"),
        runs: work_dir.join("runs"),
        reports: work_dir.join("reports"),
        logs: work_dir.join("logs"),
    };
    for d in [&dirs.checkpoints, &dirs.runs, &dirs.reports, &dirs.logs] {
        std::fs::create_dir_all(d)?;
    }
    Ok(dirs)
}

/// Append-per-epoch JSON-lines log writer for one training stage.
fn stage_logger(path: PathBuf) -> impl FnMut(usize, &EncoderWeights, &EpochMetrics) -> Result<(), TrainError> {
    let mut file: Option<std::fs::File> = None;
    move |_epoch, _w, m| {
        if file.is_none() {
            file = Some(std::fs::File::create(&path).map_err(|e| {
                TrainError::Model(crate::error::ModelError::Io(e))
            })?);
        }
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(file.as_mut().unwrap(), "{line}")
            .map_err(|e| TrainError::Model(crate::error::ModelError::Io(e)))
    }
}

/// Run one condition end to end: split queries into folds, retrieve
/// candidates with BM25, train the condition's stages per (seed, fold) on
/// training-fold data only, re-rank the evaluation fold, and aggregate.
///
/// Writes under `work_dir`: `runs/{condition}-f{fold}-s{seed}.trec`, final
/// stage checkpoints under `checkpoints/`, per-epoch metrics under `logs/`,
/// and the aggregated report (JSON and text) under `reports/`. Everything
/// except the logs (which carry wall-clock times) is byte-stable across
/// repeat runs.
pub fn run_condition(
    spec: &ConditionSpec,
    data: &Collection<'_>,
    work_dir: &Path,
) -> Result<ConditionReport, Error> {
    spec.validate()?;
    let dirs = prepare_work_dir(work_dir)?;
    let ndcg_name = format!("ndcg@{}", spec.ndcg_k);

    let qids: Vec<String> = data.queries.iter().map(|(qid, _)| qid.clone()).collect();
    let folds = fold_split(&qids, spec.folds)?;
    let query_text: BTreeMap<&str, &str> =
        data.queries.iter().map(|(q, t)| (q.as_str(), t.as_str())).collect();

    let index = InvertedIndex::build(data.docs)?;

    // First-stage candidates per executed fold; seed-independent.
    let mut fold_candidates = Vec::with_capacity(spec.folds_run);
    let mut fold_eval_queries = Vec::with_capacity(spec.folds_run);
    for fold in folds.iter().take(spec.folds_run) {
        let mut run = RankedRun::new("bm25");
        let mut eval_queries = Vec::new();
        for qid in fold {
            let text = query_text[qid.as_str()];
            let hits = index.search(text, spec.first_stage_k, &spec.bm25);
            if hits.is_empty() {
                continue;
            }
            run.push_ranking(qid, hits)?;
            eval_queries.push((qid.clone(), text.to_string()));
        }
        if run.is_empty() {
            return Err(TrainError::EmptyData(format!(
                "first stage retrieved nothing for any query of fold {}",
                fold_candidates.len()
            ))
            .into());
        }
        fold_candidates.push(run);
        fold_eval_queries.push(eval_queries);
    }

    let mut trials = Vec::new();
    let mut per_query_sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    let mut zero_relevant_queries = 0usize;

    for (si, &seed) in spec.seeds.iter().enumerate() {
        // The pre-trained base depends on the seed but not the fold.
        let mut pretrained: Option<EncoderWeights> = None;
        let mut get_pretrained = |dirs: &WorkDirs| -> Result<EncoderWeights, Error> {
            if let Some(w) = &pretrained {
                return Ok(w.clone());
            }
            let plan = TrainPlan { seed, ..spec.pretrain.clone() };
            let mut hook = stage_logger(dirs.logs.join(format!("pretrain-s{seed}.jsonl")));
            let out = pretrain_mlm(
                EncoderWeights::init(&spec.model, seed)?,
                data.docs,
                data.vocab,
                &plan,
                &spec.adamw,
                Some(&mut hook),
            )?;
            let meta = CheckpointMeta {
                stage: Stage::Pretrained,
                seed_lineage: vec![seed],
                epoch: plan.epochs,
            };
            save_checkpoint(
                &out.weights,
                &meta,
                &dirs.checkpoints.join(format!("pretrained-s{seed}.ctnk")),
            )?;
            pretrained = Some(out.weights.clone());
            Ok(out.weights)
        };

        let sampled = sample_entries(&data.log.entries, spec.sampling_rate, seed);

        for fold_idx in 0..spec.folds_run {
            let eval_qids: BTreeSet<String> = folds[fold_idx].iter().cloned().collect();
            let train_qids: BTreeSet<String> =
                qids.iter().filter(|q| !eval_qids.contains(*q)).cloned().collect();

            // Click entries tied to evaluation queries never reach training.
            let train_log: Vec<ClickLogEntry> = sampled
                .iter()
                .filter(|e| !eval_qids.contains(&e.qid))
                .cloned()
                .collect();
            let train_queries: Vec<(String, String)> = data
                .queries
                .iter()
                .filter(|(qid, _)| train_qids.contains(qid))
                .cloned()
                .collect();
            let train_qrels = data.qrels.restrict_to(&train_qids);

            let tag = spec.condition.name();
            let stem = format!("{tag}-f{fold_idx}-s{seed}");

            let final_run = if spec.condition == Condition::Bm25 {
                let mut run = RankedRun::new(tag);
                for qid in fold_candidates[fold_idx].qids() {
                    run.push_ranking(
                        qid,
                        fold_candidates[fold_idx].ranking(qid).unwrap().to_vec(),
                    )?;
                }
                run
            } else {
                let weights = condition_weights(
                    spec,
                    data,
                    &dirs,
                    &mut get_pretrained,
                    &train_log,
                    &train_queries,
                    &train_qrels,
                    seed,
                    &stem,
                )?;
                rerank(
                    &weights,
                    &fold_eval_queries[fold_idx],
                    &fold_candidates[fold_idx],
                    data.docs,
                    data.vocab,
                    tag,
                    spec.finetune.max_query_tokens,
                )?
            };
            final_run.save_trec(&dirs.runs.join(format!("{stem}.trec")))?;

            let m_mrr = mrr(&final_run, data.qrels);
            let m_map = average_precision(&final_run, data.qrels);
            let m_ndcg = ndcg_at(&final_run, data.qrels, spec.ndcg_k)?;
            if si == 0 {
                zero_relevant_queries += m_mrr.zero_relevant;
            }
            trials.push(TrialRow {
                seed,
                fold: fold_idx,
                mrr: m_mrr.mean,
                map: m_map.mean,
                ndcg: m_ndcg.mean,
                evaluated_queries: m_mrr.values.len(),
            });
            for (name, pq) in
                [("mrr", &m_mrr), ("map", &m_map), (ndcg_name.as_str(), &m_ndcg)]
            {
                let slot = per_query_sums.entry(name.to_string()).or_default();
                for (qid, &v) in &pq.values {
                    let (sum, n) = slot.entry(qid.clone()).or_insert((0.0, 0));
                    *sum += v;
                    *n += 1;
                }
            }
        }
    }

    let per_query: BTreeMap<String, BTreeMap<String, f64>> = per_query_sums
        .into_iter()
        .map(|(metric, qids)| {
            let avg = qids
                .into_iter()
                .map(|(qid, (sum, n))| (qid, sum / n as f64))
                .collect();
            (metric, avg)
        })
        .collect();
    let means = per_query
        .iter()
        .map(|(metric, values)| {
            let mean = if values.is_empty() {
                0.0
            } else {
                values.values().sum::<f64>() / values.len() as f64
            };
            (metric.clone(), mean)
        })
        .collect();

    let report = ConditionReport {
        condition: spec.condition,
        trials,
        per_query,
        means,
        zero_relevant_queries,
        spec: spec.clone(),
    };
    let stem = dirs.reports.join(spec.condition.name().replace('+', "-"));
    std::fs::write(stem.with_extension("json"), report.to_json())?;
    std::fs::write(stem.with_extension("txt"), report.render_table())?;
    Ok(report)
}

/// Train the stages a neural condition needs and return the weights whose
/// relevance head the re-ranker should read.
#[allow(clippy::too_many_arguments)]
fn condition_weights(
    spec: &ConditionSpec,
    data: &Collection<'_>,
    dirs: &WorkDirs,
    get_pretrained: &mut impl FnMut(&WorkDirs) -> Result<EncoderWeights, Error>,
    train_log: &[ClickLogEntry],
    train_queries: &[(String, String)],
    train_qrels: &Qrels,
    seed: u64,
    stem: &str,
) -> Result<EncoderWeights, Error> {
    let base = get_pretrained(dirs)?;

    let run_coarse = |w: EncoderWeights| -> Result<EncoderWeights, Error> {
        let log = ClickLog { entries: train_log.to_vec(), dropped_unknown_doc: 0 };
        let plan = TrainPlan { seed, ..spec.coarse.clone() };
        let mut hook = stage_logger(dirs.logs.join(format!("{stem}-coarse.jsonl")));
        let out = coarse_tune(w, &log, data.docs, data.vocab, &plan, &spec.adamw, Some(&mut hook))?;
        let meta = CheckpointMeta {
            stage: Stage::Coarse,
            seed_lineage: vec![seed, seed],
            epoch: plan.epochs,
        };
        save_checkpoint(&out.weights, &meta, &dirs.checkpoints.join(format!("{stem}-coarse.ctnk")))?;
        Ok(out.weights)
    };

    let run_cont_pre = |w: EncoderWeights| -> Result<EncoderWeights, Error> {
        let docs = clicked_docs(train_log, data.docs)?;
        let plan = TrainPlan { seed, ..spec.cont_pre.clone() };
        let mut hook = stage_logger(dirs.logs.join(format!("{stem}-cont-pre.jsonl")));
        let out = pretrain_mlm(w, &docs, data.vocab, &plan, &spec.adamw, Some(&mut hook))?;
        let meta = CheckpointMeta {
            stage: Stage::ContPre,
            seed_lineage: vec![seed, seed],
            epoch: plan.epochs,
        };
        save_checkpoint(&out.weights, &meta, &dirs.checkpoints.join(format!("{stem}-cont-pre.ctnk")))?;
        Ok(out.weights)
    };

    let run_fine = |w: EncoderWeights, lineage: Vec<u64>| -> Result<EncoderWeights, Error> {
        let plan = TrainPlan { seed, ..spec.finetune.clone() };
        let mut hook = stage_logger(dirs.logs.join(format!("{stem}-finetune.jsonl")));
        let out = fine_tune(
            w,
            train_qrels,
            train_queries,
            data.docs,
            data.vocab,
            &plan,
            &spec.adamw,
            Some(&mut hook),
        )?;
        let meta = CheckpointMeta { stage: Stage::Finetuned, seed_lineage: lineage, epoch: plan.epochs };
        save_checkpoint(&out.weights, &meta, &dirs.checkpoints.join(format!("{stem}-finetuned.ctnk")))?;
        Ok(out.weights)
    };

    match spec.condition {
        Condition::Bm25 => unreachable!("bm25 short-circuits before training"),
        Condition::PreTrained => Ok(base),
        Condition::CoarseTuned => {
            let mut w = run_coarse(base)?;
            // Rank with what the pair head learned.
            w.copy_qdpp_into_relevance();
            Ok(w)
        }
        Condition::FineTuned => run_fine(base, vec![seed, seed]),
        Condition::ContPreFine => {
            let w = run_cont_pre(base)?;
            run_fine(w, vec![seed, seed, seed])
        }
        Condition::CoarseFine => {
            let w = run_coarse(base)?;
            run_fine(w, vec![seed, seed, seed])
        }
    }
}

/// Grid axes for a parameter sweep. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub sampling: Vec<f64>,
    pub coarse_epochs: Vec<usize>,
    pub fine_epochs: Vec<usize>,
}

/// One sweep cell: the grid point and the pooled metric means it reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sampling_rate: f64,
    pub coarse_epochs: usize,
    pub fine_epochs: usize,
    pub means: BTreeMap<String, f64>,
}

/// Render sweep rows as an aligned table, one line per grid cell.
pub fn render_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let metrics: Vec<&String> = rows.first().map_or_else(Vec::new, |r| r.means.keys().collect());
    out.push_str(&format!("{:>9}  {:>7}  {:>5}", "sampling", "coarse", "fine"));
    for m in &metrics {
        out.push_str(&format!("  {m:>8}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:>9.4}  {:>7}  {:>5}",
            r.sampling_rate, r.coarse_epochs, r.fine_epochs
        ));
        for m in &metrics {
            out.push_str(&format!("  {:>8.4}", r.means[*m]));
        }
        out.push('\n');
    }
    out
}

/// Run the base condition once per grid cell, varying click-log sampling
/// rate and the coarse / fine epoch counts. Each cell works in its own
/// subdirectory of `work_dir/sweep`; the collected table lands in
/// `work_dir/reports/sweep.{json,txt}`.
pub fn sweep(
    base: &ConditionSpec,
    grid: &SweepGrid,
    data: &Collection<'_>,
    work_dir: &Path,
) -> Result<Vec<SweepRow>, Error> {
    let or_base = |axis: &[f64], v: f64| if axis.is_empty() { vec![v] } else { axis.to_vec() };
    let or_base_n =
        |axis: &[usize], v: usize| if axis.is_empty() { vec![v] } else { axis.to_vec() };
    let sampling = or_base(&grid.sampling, base.sampling_rate);
    let coarse_epochs = or_base_n(&grid.coarse_epochs, base.coarse.epochs);
    let fine_epochs = or_base_n(&grid.fine_epochs, base.finetune.epochs);

    let mut rows = Vec::new();
    for &rate in &sampling {
        for &ce in &coarse_epochs {
            for &fe in &fine_epochs {
                let mut spec = base.clone();
                spec.sampling_rate = rate;
                spec.coarse.epochs = ce;
                spec.finetune.epochs = fe;
                let cell = work_dir
                    .join("sweep")
                    .join(format!("r{rate:.4}-c{ce}-f{fe}"));
                std::fs::create_dir_all(&cell)?;
                let report = run_condition(&spec, data, &cell)?;
                rows.push(SweepRow {
                    sampling_rate: rate,
                    coarse_epochs: ce,
                    fine_epochs: fe,
                    means: report.means,
                });
            }
        }
    }
    let reports = work_dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    std::fs::write(
        reports.join("sweep.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    std::fs::write(reports.join("sweep.txt"), render_sweep_table(&rows))?;
    Ok(rows)
}

/// Compare two condition reports metric by metric with a paired two-sided
/// t-test over the shared per-query means. Both reports must cover the same
/// queries and metrics.
pub fn compare_conditions(
    run: &ConditionReport,
    baseline: &ConditionReport,
) -> Result<MetricsReport, Error> {
    let metrics: Vec<&String> = run.per_query.keys().collect();
    if baseline.per_query.keys().collect::<Vec<_>>() != metrics {
        return Err(Error::RankEval(crate::error::RankEvalError::QidSetMismatch(format!(
            "metric sets differ: {:?} vs {:?}",
            run.metric_names(),
            baseline.metric_names()
        ))));
    }
    let mut rows = Vec::with_capacity(metrics.len());
    for metric in metrics {
        let a_map = &run.per_query[metric];
        let b_map = &baseline.per_query[metric];
        if a_map.keys().ne(b_map.keys()) {
            let only_a: Vec<&String> =
                a_map.keys().filter(|q| !b_map.contains_key(*q)).take(3).collect();
            let only_b: Vec<&String> =
                b_map.keys().filter(|q| !a_map.contains_key(*q)).take(3).collect();
            return Err(Error::RankEval(crate::error::RankEvalError::QidSetMismatch(
                format!(
                    "only in {}: {only_a:?}; only in {}: {only_b:?}",
                    run.condition, baseline.condition
                ),
            )));
        }
        let a: Vec<f64> = a_map.values().copied().collect();
        let b: Vec<f64> = b_map.values().copied().collect();
        let test = if a.len() >= 2 { paired_ttest(&a, &b).ok() } else { None };
        let (t, p) = match test {
            Some(t) => (t.t.is_finite().then_some(t.t), t.p),
            None => (None, None),
        };
        rows.push(MetricRow {
            metric: metric.clone(),
            run_mean: run.means[metric],
            baseline_mean: baseline.means[metric],
            delta: run.means[metric] - baseline.means[metric],
            t,
            p,
            mark: significance_mark(p).to_string(),
            per_query_run: a_map.clone(),
            per_query_baseline: b_map.clone(),
        });
    }
    let evaluated = run.per_query.values().next().map_or(0, BTreeMap::len);
    Ok(MetricsReport {
        run_tag: run.condition.name().to_string(),
        baseline_tag: baseline.condition.name().to_string(),
        evaluated_queries: evaluated,
        zero_relevant_queries: run.zero_relevant_queries,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_clicklog;
    use std::io::Write as _;

    fn fake_entries(n: usize) -> Vec<ClickLogEntry> {
        (0..n)
            .map(|i| ClickLogEntry {
                qid: format!("q{i}"),
                query: format!("query {i}"),
                docid: format!("d{}", i % 7),
            })
            .collect()
    }

    fn bare_report(condition: Condition, values: &[(&str, f64)]) -> ConditionReport {
        let per: BTreeMap<String, f64> =
            values.iter().map(|(q, v)| (q.to_string(), *v)).collect();
        let mean = per.values().sum::<f64>() / per.len() as f64;
        ConditionReport {
            condition,
            trials: Vec::new(),
            per_query: BTreeMap::from([("mrr".to_string(), per)]),
            means: BTreeMap::from([("mrr".to_string(), mean)]),
            zero_relevant_queries: 0,
            spec: ConditionSpec::new(condition, ModelConfig::tiny(50)),
        }
    }

    #[test]
    fn condition_names_round_trip() {
        for c in Condition::ALL {
            assert_eq!(c.name().parse::<Condition>().unwrap(), c);
            assert_eq!(format!("{c}"), c.name());
        }
        let err = "warm-started".parse::<Condition>().unwrap_err();
        assert!(err.contains("coarse+fine"), "error should list the valid names: {err}");
    }

    #[test]
    fn spec_validation_rejects_bad_setups() {
        let good = ConditionSpec::new(Condition::Bm25, ModelConfig::tiny(50));
        assert!(good.validate().is_ok());
        for break_it in [
            (|s: &mut ConditionSpec| s.folds_run = 0) as fn(&mut ConditionSpec),
            |s| s.folds_run = s.folds + 1,
            |s| s.seeds.clear(),
            |s| s.sampling_rate = 0.0,
            |s| s.sampling_rate = 1.5,
            |s| s.first_stage_k = 0,
            |s| s.ndcg_k = 0,
            |s| s.model.heads = 3,
        ] {
            let mut spec = good.clone();
            break_it(&mut spec);
            assert!(spec.validate().is_err(), "accepted an invalid spec");
        }
    }

    #[test]
    fn full_rate_sampling_keeps_every_entry() {
        let entries = fake_entries(40);
        assert_eq!(sample_entries(&entries, 1.0, 9), entries);
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        let entries = fake_entries(400);
        let a = sample_entries(&entries, 0.3, 1);
        assert_eq!(a, sample_entries(&entries, 0.3, 1));
        assert!(!a.is_empty() && a.len() < entries.len());
        let b = sample_entries(&entries, 0.3, 2);
        assert_ne!(a, b, "different seeds should keep different subsets");
    }

    #[test]
    fn in_memory_sampling_matches_the_loader() {
        let mut docs = DocStore::new();
        for i in 0..7 {
            docs.insert(format!("d{i}"), format!("document body {i}")).unwrap();
        }
        let entries = fake_entries(120);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clicks.tsv");
        let mut f = std::fs::File::create(&path).unwrap();
        for e in &entries {
            writeln!(f, "{}\t{}\t{}", e.qid, e.query, e.docid).unwrap();
        }
        drop(f);
        let loaded = load_clicklog(&path, &docs, 0.25, 17).unwrap();
        assert_eq!(loaded.entries, sample_entries(&entries, 0.25, 17));
    }

    #[test]
    fn clicked_docs_deduplicates_and_rejects_unknown_ids() {
        let mut docs = DocStore::new();
        for i in 0..7 {
            docs.insert(format!("d{i}"), format!("document body {i}")).unwrap();
        }
        let entries = fake_entries(20);
        let store = clicked_docs(&entries, &docs).unwrap();
        assert_eq!(store.len(), 7);

        let stray = vec![ClickLogEntry {
            qid: "q0".into(),
            query: "query".into(),
            docid: "nope".into(),
        }];
        assert!(clicked_docs(&stray, &docs).is_err());
    }

    #[test]
    fn comparison_pairs_queries_and_reports_deltas() {
        let run = bare_report(
            Condition::CoarseFine,
            &[("q1", 0.6), ("q2", 0.7), ("q3", 0.8), ("q4", 0.9)],
        );
        let base = bare_report(
            Condition::FineTuned,
            &[("q1", 0.5), ("q2", 0.75), ("q3", 0.55), ("q4", 0.95)],
        );
        let cmp = compare_conditions(&run, &base).unwrap();
        assert_eq!(cmp.run_tag, "coarse+fine");
        assert_eq!(cmp.baseline_tag, "fine-tuned");
        assert_eq!(cmp.evaluated_queries, 4);
        let row = &cmp.rows[0];
        assert_eq!(row.metric, "mrr");
        assert!((row.delta - (row.run_mean - row.baseline_mean)).abs() < 1e-12);
        assert!(row.t.is_some());
        let p = row.p.expect("variance in the differences gives a p-value");
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn comparison_with_constant_difference_has_no_p_value() {
        // Exactly representable values, so the paired differences are all
        // 0.25 to the last bit and the variance is a true zero.
        let run = bare_report(Condition::CoarseFine, &[("q1", 0.5), ("q2", 0.75), ("q3", 1.0)]);
        let base = bare_report(Condition::FineTuned, &[("q1", 0.25), ("q2", 0.5), ("q3", 0.75)]);
        let cmp = compare_conditions(&run, &base).unwrap();
        assert!((cmp.rows[0].delta - 0.25).abs() < 1e-12);
        assert!(cmp.rows[0].t.is_none(), "an infinite t statistic is withheld");
        assert!(cmp.rows[0].p.is_none());
        assert_eq!(cmp.rows[0].mark, "");
    }

    #[test]
    fn comparison_rejects_mismatched_query_sets() {
        let run = bare_report(Condition::CoarseFine, &[("q1", 0.6), ("q2", 0.7)]);
        let base = bare_report(Condition::FineTuned, &[("q1", 0.5), ("q9", 0.6)]);
        let err = compare_conditions(&run, &base).unwrap_err().to_string();
        assert!(err.contains("q2") && err.contains("q9"), "{err}");
    }

    #[test]
    fn sweep_table_lines_up_cells() {
        let rows = vec![
            SweepRow {
                sampling_rate: 0.01,
                coarse_epochs: 2,
                fine_epochs: 3,
                means: BTreeMap::from([("mrr".to_string(), 0.5), ("ndcg@5".to_string(), 0.4)]),
            },
            SweepRow {
                sampling_rate: 0.1,
                coarse_epochs: 4,
                fine_epochs: 3,
                means: BTreeMap::from([("mrr".to_string(), 0.625), ("ndcg@5".to_string(), 0.5)]),
            },
        ];
        let table = render_sweep_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("sampling") && lines[0].contains("mrr"));
        assert!(lines[1].contains("0.0100") && lines[1].contains("0.5000"));
        assert!(lines[2].contains("0.1000") && lines[2].contains("0.6250"));
    }
}

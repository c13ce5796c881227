//! Mini-batch loops for the three trainable stages. One logical writer owns
//! the weights; forward/backward fans out over fixed-size runs of sequences
//! and gradients merge in sequence order, so results do not depend on the
//! thread count.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_mlm_mask, build_doc_sequence, make_finetune_instances, make_qdpp_instance, ClickLog,
    DocStore, InputSequence, Label, MaskScope, Qrels,
};
use crate::error::TrainError;
use crate::model::{
    encode_sequence, mlm_logits, qdpp_logits, relevance_logits, BoundWeights, EncoderWeights,
    Stage,
};
use crate::numerics::{Graph, NodeId, Reduction};
use crate::rng::{derive_rng, Stream};
use crate::tokenizer::Vocabulary;

use super::adamw::{AdamwConfig, Optimizer};
use rand::seq::SliceRandom;

/// Sequences per backward graph. Batches split into runs of this size; the
/// runs may evaluate on worker threads but their gradients merge in order.
const GRAD_CHUNK: usize = 8;

/// What one stage trains, how long, and with which loss mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight on the masked-token loss. Exactly 0 removes that branch from
    /// the graph entirely.
    pub w_mlm: f64,
    /// Weight on the pair-prediction loss; same exact-zero rule.
    pub w_qdpp: f64,
    pub mlm_rate: f64,
    pub mask_scope: MaskScope,
    /// Probability a pair-prediction instance keeps its clicked document.
    pub p_ispair: f64,
    pub max_query_tokens: usize,
}

impl TrainPlan {
    pub fn pretrain(seed: u64) -> Self {
        TrainPlan { stage: Stage::Pretrained, epochs: 4, batch_size: 80, ..Self::base(seed) }
    }

    /// Continual pre-training; the published forty epochs scale down to four
    /// at desk size.
    pub fn cont_pre(seed: u64) -> Self {
        TrainPlan { stage: Stage::ContPre, epochs: 4, batch_size: 80, ..Self::base(seed) }
    }

    pub fn coarse(seed: u64) -> Self {
        TrainPlan { stage: Stage::Coarse, epochs: 4, batch_size: 80, ..Self::base(seed) }
    }

    pub fn finetune(seed: u64) -> Self {
        TrainPlan { stage: Stage::Finetuned, epochs: 3, batch_size: 128, ..Self::base(seed) }
    }

    fn base(seed: u64) -> Self {
        TrainPlan {
            stage: Stage::Pretrained,
            epochs: 1,
            batch_size: 80,
            seed,
            w_mlm: 1.0,
            w_qdpp: 1.0,
            mlm_rate: 0.15,
            mask_scope: MaskScope::AllTokens,
            p_ispair: 0.5,
            max_query_tokens: 64,
        }
    }

    fn check(&self) {
        assert!(self.epochs >= 1, "epochs must be at least 1");
        assert!(self.batch_size >= 1, "batch size must be at least 1");
        assert!(
            self.w_mlm >= 0.0 && self.w_qdpp >= 0.0,
            "loss weights must be non-negative"
        );
        if self.stage == Stage::Coarse {
            assert!(
                self.w_mlm > 0.0 || self.w_qdpp > 0.0,
                "coarse stage needs at least one active loss"
            );
        }
    }
}

/// One line of the JSON-lines metrics log. Fields that a stage does not
/// produce stay null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    /// 1-based.
    pub epoch: usize,
    pub mlm_loss: Option<f64>,
    pub qdpp_loss: Option<f64>,
    pub qdpp_acc: Option<f64>,
    pub cls_loss: Option<f64>,
    pub wall_s: f64,
}

/// Final weights plus the per-epoch log and any non-fatal conditions hit
/// while assembling the data.
#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: EncoderWeights,
    pub epochs: Vec<EpochMetrics>,
    pub warnings: Vec<String>,
}

/// Called after each epoch with the epoch number (1-based), the current
/// weights, and that epoch's metrics; used for checkpointing and logging.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &EncoderWeights, &EpochMetrics) -> Result<(), TrainError>;

// ── batch step ──────────────────────────────────────────────────────

#[derive(Default, Clone, Copy)]
struct StepStats {
    mlm_sum: f64,
    mlm_rows: usize,
    qdpp_sum: f64,
    qdpp_n: usize,
    qdpp_correct: usize,
    cls_sum: f64,
    cls_n: usize,
}

impl StepStats {
    fn merge(&mut self, o: &StepStats) {
        self.mlm_sum += o.mlm_sum;
        self.mlm_rows += o.mlm_rows;
        self.qdpp_sum += o.qdpp_sum;
        self.qdpp_n += o.qdpp_n;
        self.qdpp_correct += o.qdpp_correct;
        self.cls_sum += o.cls_sum;
        self.cls_n += o.cls_n;
    }
}

struct ChunkOut {
    grads: Option<Vec<Vec<f64>>>,
    loss: f64,
    stats: StepStats,
}

struct StepCtx {
    w_mlm: f64,
    w_qdpp: f64,
    w_cls: f64,
    /// Masked positions across the whole batch; the MLM loss is the mean
    /// over these, so per-run contributions are scaled by 1/total.
    total_masked: usize,
    batch_len: usize,
    seed: u64,
    epoch0: u64,
}

/// Forward/backward over one run of sequences. `seqs` carries each
/// sequence's position within the epoch, which keys its dropout stream.
fn chunk_pass(
    w: &EncoderWeights,
    seqs: &[(usize, InputSequence)],
    ctx: &StepCtx,
) -> Result<ChunkOut, TrainError> {
    let mut g = Graph::new();
    let b = BoundWeights::bind(&mut g, w);
    let mut stats = StepStats::default();
    let mut parts: Vec<NodeId> = Vec::new();

    for (pos, seq) in seqs {
        let mut drop_rng =
            derive_rng(ctx.seed, Stream::Dropout, &[ctx.epoch0, *pos as u64]);
        let rng = if w.config().dropout > 0.0 { Some(&mut drop_rng) } else { None };
        let hidden = encode_sequence(&mut g, w, &b, seq, rng)?;

        if ctx.w_mlm != 0.0 {
            let positions = seq.masked_positions();
            if !positions.is_empty() {
                let targets: Vec<u32> =
                    positions.iter().map(|&p| seq.mlm_targets[p]).collect();
                let logits = mlm_logits(&mut g, w, &b, hidden, seq, &positions)?;
                let ce = g.cross_entropy(logits, &targets, Reduction::Sum)?;
                stats.mlm_sum += g.values(ce)[0];
                stats.mlm_rows += targets.len();
                parts.push(g.scale(ce, ctx.w_mlm / ctx.total_masked as f64));
            }
        }

        match seq.label {
            Some(label @ Label::Pair { .. }) if ctx.w_qdpp != 0.0 => {
                let target = label.target();
                let logits = qdpp_logits(&mut g, w, &b, hidden);
                let ce = g.cross_entropy(logits, &[target], Reduction::Sum)?;
                stats.qdpp_sum += g.values(ce)[0];
                stats.qdpp_n += 1;
                let row = g.values(logits);
                let pred = (row[1] > row[0]) as u32;
                stats.qdpp_correct += (pred == target) as usize;
                parts.push(g.scale(ce, ctx.w_qdpp / ctx.batch_len as f64));
            }
            Some(label @ Label::Relevance { .. }) if ctx.w_cls != 0.0 => {
                let target = label.target();
                let logits = relevance_logits(&mut g, w, &b, hidden);
                let ce = g.cross_entropy(logits, &[target], Reduction::Sum)?;
                stats.cls_sum += g.values(ce)[0];
                stats.cls_n += 1;
                parts.push(g.scale(ce, ctx.w_cls / ctx.batch_len as f64));
            }
            _ => {}
        }
    }

    let Some(&first) = parts.first() else {
        return Ok(ChunkOut { grads: None, loss: 0.0, stats });
    };
    let loss = parts[1..].iter().fold(first, |acc, &p| g.add(acc, p));
    let loss_val = g.values(loss)[0];
    g.backward(loss)?;
    Ok(ChunkOut { grads: Some(b.grad_vectors(&g)), loss: loss_val, stats })
}

/// One optimizer step over `batch`. Returns the batch's contribution to the
/// epoch statistics.
fn batch_step(
    w: &mut EncoderWeights,
    opt: &mut Optimizer,
    batch: Vec<(usize, InputSequence)>,
    ctx: &StepCtx,
    epoch1: usize,
    batch_idx: usize,
) -> Result<StepStats, TrainError> {
    let chunks: Vec<&[(usize, InputSequence)]> = batch.chunks(GRAD_CHUNK).collect();
    let shared: &EncoderWeights = w;
    let outs: Vec<Result<ChunkOut, TrainError>> =
        chunks.par_iter().map(|c| chunk_pass(shared, c, ctx)).collect();

    let mut stats = StepStats::default();
    let mut loss = 0.0;
    let mut any = false;
    for out in outs {
        let out = out?;
        stats.merge(&out.stats);
        loss += out.loss;
        if let Some(grads) = out.grads {
            any = true;
            for (p, grad) in w.params_mut().iter_mut().zip(&grads) {
                p.accumulate(grad);
            }
        }
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: epoch1, batch: batch_idx });
    }
    if any {
        opt.step(w)?;
    }
    Ok(stats)
}

// ── epoch driver ────────────────────────────────────────────────────

fn run_epochs<F>(
    mut w: EncoderWeights,
    plan: &TrainPlan,
    adamw: &AdamwConfig,
    n_instances: usize,
    w_cls: f64,
    mut instance: F,
    hook: Option<EpochHook<'_>>,
    warnings: Vec<String>,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(u64, usize) -> Result<InputSequence, TrainError>,
{
    let mut opt = Optimizer::new(adamw.clone(), &w);
    let mut log = Vec::with_capacity(plan.epochs);
    let mut hook = hook;

    for e in 0..plan.epochs as u64 {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n_instances).collect();
        order.shuffle(&mut derive_rng(plan.seed, Stream::Shuffle, &[e]));

        let mut epoch_seqs = Vec::with_capacity(n_instances);
        for (pos, &idx) in order.iter().enumerate() {
            epoch_seqs.push((pos, instance(e, idx)?));
        }

        let mut stats = StepStats::default();
        let mut batch_idx = 0;
        let mut rest = epoch_seqs;
        while !rest.is_empty() {
            let take = plan.batch_size.min(rest.len());
            let batch: Vec<_> = rest.drain(..take).collect();
            let total_masked: usize =
                batch.iter().map(|(_, s)| s.masked_positions().len()).sum();
            let ctx = StepCtx {
                w_mlm: plan.w_mlm,
                w_qdpp: plan.w_qdpp,
                w_cls,
                total_masked: total_masked.max(1),
                batch_len: batch.len(),
                seed: plan.seed,
                epoch0: e,
            };
            stats.merge(&batch_step(&mut w, &mut opt, batch, &ctx, e as usize + 1, batch_idx)?);
            batch_idx += 1;
        }

        let ratio = |sum: f64, n: usize| if n > 0 { Some(sum / n as f64) } else { None };
        let m = EpochMetrics {
            stage: plan.stage.to_string(),
            epoch: e as usize + 1,
            mlm_loss: ratio(stats.mlm_sum, stats.mlm_rows),
            qdpp_loss: ratio(stats.qdpp_sum, stats.qdpp_n),
            qdpp_acc: ratio(stats.qdpp_correct as f64, stats.qdpp_n),
            cls_loss: ratio(stats.cls_sum, stats.cls_n),
            wall_s: started.elapsed().as_secs_f64(),
        };
        if let Some(h) = hook.as_deref_mut() {
            h(e as usize + 1, &w, &m)?;
        }
        log.push(m);
    }

    Ok(TrainOutcome { weights: w, epochs: log, warnings })
}

// ── stage procedures ────────────────────────────────────────────────

/// Masked-token training over single-document sequences. Serves both initial
/// pre-training and continual pre-training; `plan.stage` records which.
pub fn pretrain_mlm(
    weights: EncoderWeights,
    docs: &DocStore,
    vocab: &Vocabulary,
    plan: &TrainPlan,
    adamw: &AdamwConfig,
    hook: Option<EpochHook<'_>>,
) -> Result<TrainOutcome, TrainError> {
    plan.check();
    assert!(
        matches!(plan.stage, Stage::Pretrained | Stage::ContPre),
        "document-only training carries a pre-training stage tag"
    );
    let max_len = weights.config().max_len;
    let mut base = Vec::new();
    let mut skipped = 0usize;
    for docid in docs.ids() {
        match build_doc_sequence(docs.get(docid)?, vocab, max_len) {
            Ok(s) => base.push(s),
            Err(_) => skipped += 1,
        }
    }
    if base.is_empty() {
        return Err(TrainError::EmptyData("no usable documents in corpus".into()));
    }
    let mut warnings = Vec::new();
    if skipped > 0 {
        warnings.push(format!("{skipped} documents tokenized to nothing and were skipped"));
    }

    let seed = plan.seed;
    let rate = plan.mlm_rate;
    run_epochs(
        weights,
        plan,
        adamw,
        base.len(),
        0.0,
        move |e, idx| {
            let mut rng = derive_rng(seed, Stream::MlmMask, &[e, idx as u64]);
            Ok(apply_mlm_mask(&base[idx], rate, MaskScope::AllTokens, &mut rng)?)
        },
        hook,
        warnings,
    )
}

/// Joint masked-token and pair-prediction training over click-log instances.
/// Instances are resampled every epoch: the clicked/mismatched coin and the
/// mask pattern for entry `i` in epoch `e` come from streams keyed by
/// `(e, i)`, so runs differing only in loss weights see identical data.
pub fn coarse_tune(
    weights: EncoderWeights,
    log: &ClickLog,
    docs: &DocStore,
    vocab: &Vocabulary,
    plan: &TrainPlan,
    adamw: &AdamwConfig,
    hook: Option<EpochHook<'_>>,
) -> Result<TrainOutcome, TrainError> {
    plan.check();
    assert_eq!(plan.stage, Stage::Coarse, "plan stage must be coarse");
    if log.entries.is_empty() {
        return Err(TrainError::EmptyData("click log has no entries".into()));
    }
    let max_len = weights.config().max_len;
    let clicked = log.clicked_map();
    let entries = log.entries.clone();
    let seed = plan.seed;
    let (rate, scope) = (plan.mlm_rate, plan.mask_scope);
    let (p_ispair, mqt) = (plan.p_ispair, plan.max_query_tokens);
    let w_mlm = plan.w_mlm;

    run_epochs(
        weights,
        plan,
        adamw,
        entries.len(),
        0.0,
        move |e, idx| {
            let mut pair_rng = derive_rng(seed, Stream::PairSample, &[e, idx as u64]);
            let seq = make_qdpp_instance(
                &entries[idx],
                docs,
                &clicked,
                vocab,
                max_len,
                mqt,
                p_ispair,
                &mut pair_rng,
            )?;
            if w_mlm == 0.0 {
                return Ok(seq);
            }
            let mut mask_rng = derive_rng(seed, Stream::MlmMask, &[e, idx as u64]);
            Ok(apply_mlm_mask(&seq, rate, scope, &mut mask_rng)?)
        },
        hook,
        Vec::new(),
    )
}

/// Relevance classification over judged query–document pairs.
pub fn fine_tune(
    weights: EncoderWeights,
    qrels: &Qrels,
    queries: &[(String, String)],
    docs: &DocStore,
    vocab: &Vocabulary,
    plan: &TrainPlan,
    adamw: &AdamwConfig,
    hook: Option<EpochHook<'_>>,
) -> Result<TrainOutcome, TrainError> {
    plan.check();
    assert_eq!(plan.stage, Stage::Finetuned, "plan stage must be finetuned");
    let max_len = weights.config().max_len;
    let (instances, stats) =
        make_finetune_instances(qrels, queries, docs, vocab, max_len, plan.max_query_tokens)?;
    if instances.is_empty() {
        return Err(TrainError::EmptyData("no usable judgments".into()));
    }

    let mut warnings = Vec::new();
    let dropped = stats.skipped_unknown_doc + stats.skipped_missing_query + stats.skipped_bad_sequence;
    if dropped > 0 {
        warnings.push(format!("{dropped} judgments could not be turned into instances"));
    }
    let positives = instances
        .iter()
        .filter(|s| s.label == Some(Label::Relevance { relevant: true }))
        .count();
    if positives == 0 || positives == instances.len() {
        warnings.push("judgments contain a single relevance class; training proceeds".into());
    }

    run_epochs(
        weights,
        plan,
        adamw,
        instances.len(),
        1.0,
        move |_, idx| Ok(instances[idx].clone()),
        hook,
        warnings,
    )
}

// ── inference-side measurements ─────────────────────────────────────

/// Mean masked-token loss and top-1 accuracy over already-masked sequences,
/// without dropout. Sequences with no masked positions are skipped.
pub fn mlm_eval(
    w: &EncoderWeights,
    seqs: &[InputSequence],
) -> Result<(f64, f64), TrainError> {
    let per: Vec<Result<(f64, usize, usize), TrainError>> = seqs
        .par_iter()
        .map(|seq| {
            let positions = seq.masked_positions();
            if positions.is_empty() {
                return Ok((0.0, 0, 0));
            }
            let mut g = Graph::new();
            let b = BoundWeights::bind(&mut g, w);
            let hidden = encode_sequence(&mut g, w, &b, seq, None)?;
            let logits = mlm_logits(&mut g, w, &b, hidden, seq, &positions)?;
            let targets: Vec<u32> = positions.iter().map(|&p| seq.mlm_targets[p]).collect();
            let ce = g.cross_entropy(logits, &targets, Reduction::Sum)?;
            let v = g.shape(logits)[1];
            let lv = g.values(logits);
            let mut correct = 0usize;
            for (row, &t) in targets.iter().enumerate() {
                let row = &lv[row * v..(row + 1) * v];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                correct += (argmax == t as usize) as usize;
            }
            Ok((g.values(ce)[0], targets.len(), correct))
        })
        .collect();

    let (mut sum, mut n, mut correct) = (0.0, 0usize, 0usize);
    for r in per {
        let (s, rows, c) = r?;
        sum += s;
        n += rows;
        correct += c;
    }
    if n == 0 {
        return Err(TrainError::EmptyData("no masked positions to evaluate".into()));
    }
    Ok((sum / n as f64, correct as f64 / n as f64))
}

/// Pair-prediction accuracy over labeled instances, without dropout.
/// Instances without a pair label are skipped.
pub fn qdpp_accuracy(
    w: &EncoderWeights,
    seqs: &[InputSequence],
) -> Result<f64, TrainError> {
    let per: Vec<Result<Option<bool>, TrainError>> = seqs
        .par_iter()
        .map(|seq| {
            let Some(Label::Pair { is_pair }) = seq.label else {
                return Ok(None);
            };
            let mut g = Graph::new();
            let b = BoundWeights::bind(&mut g, w);
            let hidden = encode_sequence(&mut g, w, &b, seq, None)?;
            let logits = qdpp_logits(&mut g, w, &b, hidden);
            let row = g.values(logits);
            Ok(Some((row[1] > row[0]) == is_pair))
        })
        .collect();
    let mut n = 0usize;
    let mut correct = 0usize;
    for r in per {
        if let Some(hit) = r? {
            n += 1;
            correct += hit as usize;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyData("no pair-labeled instances".into()));
    }
    Ok(correct as f64 / n as f64)
}

/// Mean relevance cross-entropy over labeled instances, without dropout.
/// Used by tests probing loss movement on a fixed batch.
pub fn relevance_loss(
    w: &EncoderWeights,
    seqs: &[InputSequence],
) -> Result<f64, TrainError> {
    let per: Vec<Result<f64, TrainError>> = seqs
        .par_iter()
        .map(|seq| {
            let Some(label @ Label::Relevance { .. }) = seq.label else {
                return Err(TrainError::EmptyData("instance lacks a relevance label".into()));
            };
            let mut g = Graph::new();
            let b = BoundWeights::bind(&mut g, w);
            let hidden = encode_sequence(&mut g, w, &b, seq, None)?;
            let logits = relevance_logits(&mut g, w, &b, hidden);
            let ce = g.cross_entropy(logits, &[label.target()], Reduction::Sum)?;
            Ok(g.values(ce)[0])
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in per {
        sum += r?;
        n += 1;
    }
    if n == 0 {
        return Err(TrainError::EmptyData("no relevance-labeled instances".into()));
    }
    Ok(sum / n as f64)
}

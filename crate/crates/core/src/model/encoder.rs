//! Graph construction for the encoder trunk and its three heads.

use rand_chacha::ChaCha8Rng;

use super::{EncoderWeights, LAYER_NORM_EPS};
use crate::data::InputSequence;
use crate::error::ModelError;
use crate::numerics::{Graph, NodeId};

/// Weight tensors registered as leaves of one graph, in manifest order.
/// Rebuild per graph; ids are only valid for the graph they came from.
pub struct BoundWeights {
    ids: Vec<NodeId>,
}

impl BoundWeights {
    pub fn bind(g: &mut Graph, w: &EncoderWeights) -> BoundWeights {
        let ids = w.params().iter().map(|p| g.leaf(&p.value)).collect();
        BoundWeights { ids }
    }

    pub fn node(&self, w: &EncoderWeights, name: &str) -> NodeId {
        self.ids[w.index_of(name)]
    }

    /// Add the graph's gradients into the weight accumulators.
    pub fn accumulate_grads(&self, g: &Graph, w: &mut EncoderWeights) {
        for (i, &id) in self.ids.iter().enumerate() {
            w.params_mut()[i].accumulate(g.grad(id));
        }
    }

    /// Copy the graph's gradients out, one vector per parameter in weight
    /// order. Lets worker threads hand gradients back for an ordered merge.
    pub fn grad_vectors(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.ids.iter().map(|&id| g.grad(id).to_vec()).collect()
    }
}

fn affine(g: &mut Graph, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
    let xw = g.matmul(x, weight);
    g.add(xw, bias)
}

/// Run the encoder trunk over one sequence, returning hidden states
/// `[len × H]`. Attention never reads pad positions. `dropout_rng` enables
/// training-mode dropout at the configured rate; pass `None` for inference.
pub fn encode_sequence(
    g: &mut Graph,
    w: &EncoderWeights,
    b: &BoundWeights,
    seq: &InputSequence,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, ModelError> {
    let cfg = w.config();
    let len = seq.len();
    if len > cfg.max_len {
        return Err(ModelError::SequenceTooLong { len, max_len: cfg.max_len });
    }
    for &id in &seq.ids {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::TokenIdOutOfRange { id, vocab: cfg.vocab_size });
        }
    }
    let rate = cfg.dropout;
    let drop = |g: &mut Graph, x: NodeId, rng: &mut Option<&mut ChaCha8Rng>| match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r),
        _ => x,
    };

    let token_rows: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
    let seg_rows: Vec<usize> = seq.segments.iter().map(|&s| s as usize).collect();
    let pos_rows: Vec<usize> = (0..len).collect();
    let tok = b.node(w, "embeddings.token");
    let tok_e = g.gather_rows(tok, &token_rows);
    let pos_e = {
        let p = b.node(w, "embeddings.position");
        g.gather_rows(p, &pos_rows)
    };
    let seg_e = {
        let s = b.node(w, "embeddings.segment");
        g.gather_rows(s, &seg_rows)
    };
    let te_pe = g.add(tok_e, pos_e);
    let mut x = g.add(te_pe, seg_e);

    let col_mask: Option<&[bool]> =
        if seq.attention.iter().all(|&a| a) { None } else { Some(&seq.attention) };
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    for l in 0..cfg.layers {
        let name = |part: &str| format!("layer{l}.{part}");
        let q = affine(g, x, b.node(w, &name("attn.q.weight")), b.node(w, &name("attn.q.bias")));
        let k = affine(g, x, b.node(w, &name("attn.k.weight")), b.node(w, &name("attn.k.bias")));
        let v = affine(g, x, b.node(w, &name("attn.v.weight")), b.node(w, &name("attn.v.bias")));

        let dh = cfg.head_dim();
        let mut heads = Vec::with_capacity(cfg.heads);
        for a in 0..cfg.heads {
            let qa = g.slice_cols(q, a * dh, dh);
            let ka = g.slice_cols(k, a * dh, dh);
            let va = g.slice_cols(v, a * dh, dh);
            let kat = g.transpose(ka);
            let raw = g.matmul(qa, kat);
            let scaled = g.scale(raw, scale);
            let probs = g.softmax_rows(scaled, col_mask);
            let probs = drop(g, probs, &mut dropout_rng);
            heads.push(g.matmul(probs, va));
        }
        let ctx = g.concat_cols(&heads);
        let out =
            affine(g, ctx, b.node(w, &name("attn.out.weight")), b.node(w, &name("attn.out.bias")));
        let out = drop(g, out, &mut dropout_rng);
        let res = g.add(x, out);
        let x1 = g.layer_norm(
            res,
            b.node(w, &name("attn.norm.gain")),
            b.node(w, &name("attn.norm.bias")),
            LAYER_NORM_EPS,
        );

        let h1 = affine(g, x1, b.node(w, &name("ff.in.weight")), b.node(w, &name("ff.in.bias")));
        let h1 = g.gelu(h1);
        let h2 = affine(g, h1, b.node(w, &name("ff.out.weight")), b.node(w, &name("ff.out.bias")));
        let h2 = drop(g, h2, &mut dropout_rng);
        let res2 = g.add(x1, h2);
        x = g.layer_norm(
            res2,
            b.node(w, &name("ff.norm.gain")),
            b.node(w, &name("ff.norm.bias")),
            LAYER_NORM_EPS,
        );
    }
    Ok(x)
}

/// Vocabulary logits at the masked positions: transform, GELU, layer-norm,
/// then projection through the transposed token embeddings plus a free bias.
/// An empty position list yields a `[0 × V]` node.
pub fn mlm_logits(
    g: &mut Graph,
    w: &EncoderWeights,
    b: &BoundWeights,
    hidden: NodeId,
    seq: &InputSequence,
    positions: &[usize],
) -> Result<NodeId, ModelError> {
    for &pos in positions {
        if pos >= seq.len() || !seq.attention[pos] {
            return Err(ModelError::PositionOutOfRange { pos, len: seq.n_real() });
        }
    }
    let rows = g.gather_rows(hidden, positions);
    let t = affine(g, rows, b.node(w, "mlm.transform.weight"), b.node(w, "mlm.transform.bias"));
    let t = g.gelu(t);
    let t = g.layer_norm(t, b.node(w, "mlm.norm.gain"), b.node(w, "mlm.norm.bias"), LAYER_NORM_EPS);
    let emb_t = {
        let tok = b.node(w, "embeddings.token");
        g.transpose(tok)
    };
    let proj = g.matmul(t, emb_t);
    Ok(g.add(proj, b.node(w, "mlm.output.bias")))
}

/// Pair-prediction logits from the first hidden row: `[1 × 2]`,
/// column 1 = the pair co-occurred.
pub fn qdpp_logits(g: &mut Graph, w: &EncoderWeights, b: &BoundWeights, hidden: NodeId) -> NodeId {
    let cls = g.gather_rows(hidden, &[0]);
    affine(g, cls, b.node(w, "qdpp.weight"), b.node(w, "qdpp.bias"))
}

/// Relevance logits from the first hidden row: `[1 × 2]`, column 1 = relevant.
pub fn relevance_logits(
    g: &mut Graph,
    w: &EncoderWeights,
    b: &BoundWeights,
    hidden: NodeId,
) -> NodeId {
    let cls = g.gather_rows(hidden, &[0]);
    affine(g, cls, b.node(w, "relevance.weight"), b.node(w, "relevance.bias"))
}

/// Probability the relevance head assigns to the positive class: one forward
/// pass, no dropout. With a zeroed head both logits are 0 and this is 0.5.
pub fn score_relevance(w: &EncoderWeights, seq: &InputSequence) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let b = BoundWeights::bind(&mut g, w);
    let hidden = encode_sequence(&mut g, w, &b, seq, None)?;
    let logits = relevance_logits(&mut g, w, &b, hidden);
    let probs = g.softmax_rows(logits, None);
    Ok(g.values(probs)[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_sequence;
    use crate::model::ModelConfig;
    use crate::numerics::{Reduction, IGNORE_TARGET};
    use crate::tokenizer::Vocabulary;

    fn fixture() -> (Vocabulary, EncoderWeights) {
        let vocab = Vocabulary::build(
            ["river bank flood water", "money bank loan rate", "dam water level"].iter(),
            48,
            1,
        )
        .unwrap();
        let cfg = ModelConfig::tiny(vocab.len());
        let w = EncoderWeights::init(&cfg, 11).unwrap();
        (vocab, w)
    }

    fn seq_of(vocab: &Vocabulary, max_len: usize) -> InputSequence {
        build_sequence("river bank", "dam water level", vocab, max_len, 8).unwrap()
    }

    #[test]
    fn hidden_shape_is_len_by_hidden() {
        let (vocab, w) = fixture();
        let seq = seq_of(&vocab, 16);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w);
        let h = encode_sequence(&mut g, &w, &b, &seq, None).unwrap();
        assert_eq!(g.shape(h), &[16, 8]);
    }

    #[test]
    fn forward_is_deterministic() {
        let (vocab, w) = fixture();
        let seq = seq_of(&vocab, 16);
        let run = || {
            let mut g = Graph::new();
            let b = BoundWeights::bind(&mut g, &w);
            let h = encode_sequence(&mut g, &w, &b, &seq, None).unwrap();
            g.values(h).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_pad_outputs_ignore_padding_length() {
        let (vocab, w) = fixture();
        let short = seq_of(&vocab, 12);
        let long = seq_of(&vocab, 16);
        assert_eq!(short.n_real(), long.n_real());
        let run = |seq: &InputSequence| {
            let mut g = Graph::new();
            let b = BoundWeights::bind(&mut g, &w);
            let h = encode_sequence(&mut g, &w, &b, seq, None).unwrap();
            g.values(h).to_vec()
        };
        let (hs, hl) = (run(&short), run(&long));
        let real = short.n_real();
        let hdim = w.config().hidden;
        assert_eq!(
            &hs[..real * hdim],
            &hl[..real * hdim],
            "non-pad hidden states must not depend on pad count"
        );
    }

    #[test]
    fn zero_weights_give_constant_rows() {
        let (vocab, _) = fixture();
        let cfg = ModelConfig::tiny(vocab.len());
        let w = EncoderWeights::zeroed(&cfg).unwrap();
        let seq = seq_of(&vocab, 16);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w);
        let h = encode_sequence(&mut g, &w, &b, &seq, None).unwrap();
        let vals = g.values(h);
        let hdim = cfg.hidden;
        let first = &vals[..hdim];
        for row in 1..seq.n_real() {
            assert_eq!(&vals[row * hdim..(row + 1) * hdim], first, "row {row} differs");
        }
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let (vocab, w) = fixture();
        let seq = seq_of(&vocab, 20);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w);
        let err = encode_sequence(&mut g, &w, &b, &seq, None).unwrap_err();
        assert!(matches!(err, ModelError::SequenceTooLong { len: 20, max_len: 16 }));
    }

    #[test]
    fn out_of_vocab_id_is_rejected() {
        let (vocab, w) = fixture();
        let mut seq = seq_of(&vocab, 16);
        seq.ids[3] = vocab.len() as u32 + 5;
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w);
        let err = encode_sequence(&mut g, &w, &b, &seq, None).unwrap_err();
        assert!(matches!(err, ModelError::TokenIdOutOfRange { .. }));
    }

    #[test]
    fn mlm_logit_shape_and_empty_positions() {
        let (vocab, w) = fixture();
        let seq = seq_of(&vocab, 16);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w);
        let h = encode_sequence(&mut g, &w, &b, &seq, None).unwrap();
        let three = mlm_logits(&mut g, &w, &b, h, &seq, &[2, 3, 4]).unwrap();
        assert_eq!(g.shape(three), &[3, vocab.len()]);
        let none = mlm_logits(&mut g, &w, &b, h, &seq, &[]).unwrap();
        assert_eq!(g.shape(none), &[0, vocab.len()]);
    }

    #[test]
    fn mlm_rejects_pad_and_out_of_range_positions() {
        let (vocab, w) = fixture();
        let seq = seq_of(&vocab, 16);
        let pad_pos = seq.n_real();
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w);
        let h = encode_sequence(&mut g, &w, &b, &seq, None).unwrap();
        assert!(matches!(
            mlm_logits(&mut g, &w, &b, h, &seq, &[pad_pos]),
            Err(ModelError::PositionOutOfRange { .. })
        ));
        assert!(matches!(
            mlm_logits(&mut g, &w, &b, h, &seq, &[99]),
            Err(ModelError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn tied_projection_tracks_token_embedding() {
        let (vocab, mut w) = fixture();
        let seq = seq_of(&vocab, 16);
        let logits_at = |w: &EncoderWeights| {
            let mut g = Graph::new();
            let b = BoundWeights::bind(&mut g, w);
            let h = encode_sequence(&mut g, w, &b, &seq, None).unwrap();
            let l = mlm_logits(&mut g, w, &b, h, &seq, &[2, 3]).unwrap();
            g.values(l).to_vec()
        };
        let before = logits_at(&w);
        // Perturb one token-embedding row that does not occur in the input:
        // only that vocabulary column of the logits may move.
        let target = (7..vocab.len() as u32)
            .find(|id| !seq.ids.contains(id))
            .expect("some vocab id unused by the sequence");
        let hdim = w.config().hidden;
        let row = target as usize;
        for j in 0..hdim {
            w.param_mut("embeddings.token").value.values_mut()[row * hdim + j] += 0.5;
        }
        let after = logits_at(&w);
        let v = vocab.len();
        for (i, (x, y)) in before.iter().zip(&after).enumerate() {
            if i % v == target as usize {
                assert_ne!(x, y, "tied column {i} should change");
            } else {
                assert_eq!(x, y, "untied column {i} should not change");
            }
        }
    }

    #[test]
    fn zero_heads_give_even_odds() {
        let (vocab, _) = fixture();
        let cfg = ModelConfig::tiny(vocab.len());
        let mut w = EncoderWeights::init(&cfg, 2).unwrap();
        for name in ["qdpp.weight", "qdpp.bias", "relevance.weight", "relevance.bias"] {
            for v in w.param_mut(name).value.values_mut() {
                *v = 0.0;
            }
        }
        let seq = seq_of(&vocab, 16);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w);
        let h = encode_sequence(&mut g, &w, &b, &seq, None).unwrap();
        let q = qdpp_logits(&mut g, &w, &b, h);
        let r = relevance_logits(&mut g, &w, &b, h);
        assert_eq!(g.values(q), &[0.0, 0.0]);
        assert_eq!(g.values(r), &[0.0, 0.0]);
        let p = g.softmax_rows(q, None);
        assert_eq!(g.values(p), &[0.5, 0.5]);
    }

    #[test]
    fn pair_loss_reaches_the_embeddings() {
        let (vocab, mut w) = fixture();
        let seq = seq_of(&vocab, 16);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w);
        let h = encode_sequence(&mut g, &w, &b, &seq, None).unwrap();
        let logits = qdpp_logits(&mut g, &w, &b, h);
        let loss = g.cross_entropy(logits, &[1], Reduction::Mean).unwrap();
        g.backward(loss).unwrap();
        b.accumulate_grads(&g, &mut w);
        let grad_norm: f64 =
            w.param("embeddings.token").grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(grad_norm > 0.0, "gradient must flow into the trunk");
    }

    #[test]
    fn identical_documents_score_identically() {
        let (vocab, w) = fixture();
        let score = |q: &str, d: &str| {
            let seq = build_sequence(q, d, &vocab, 16, 8).unwrap();
            let mut g = Graph::new();
            let b = BoundWeights::bind(&mut g, &w);
            let h = encode_sequence(&mut g, &w, &b, &seq, None).unwrap();
            let logits = relevance_logits(&mut g, &w, &b, h);
            let p = g.softmax_rows(logits, None);
            g.values(p)[1]
        };
        assert_eq!(score("river bank", "dam water"), score("river bank", "dam water"));
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let (vocab, _) = fixture();
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.dropout = 0.3;
        let w = EncoderWeights::init(&cfg, 4).unwrap();
        let seq = seq_of(&vocab, 16);
        let run = |rng: Option<u64>| {
            let mut g = Graph::new();
            let b = BoundWeights::bind(&mut g, &w);
            let mut r = rng.map(|s| crate::rng::derive_rng(s, crate::rng::Stream::Dropout, &[0]));
            let h = encode_sequence(&mut g, &w, &b, &seq, r.as_mut()).unwrap();
            g.values(h).to_vec()
        };
        assert_eq!(run(None), run(None), "inference ignores dropout");
        assert_ne!(run(Some(1)), run(None), "training dropout perturbs activations");
        assert_eq!(run(Some(1)), run(Some(1)), "same stream, same masks");
    }

    #[test]
    fn trunk_update_moves_all_three_heads() {
        let (vocab, mut w) = fixture();
        let seq = {
            let mut s = seq_of(&vocab, 16);
            // Give the MLM head a masked position to look at.
            s.mlm_targets[2] = s.ids[2];
            s.ids[2] = crate::tokenizer::MASK_ID;
            s
        };
        let outputs = |w: &EncoderWeights| {
            let mut g = Graph::new();
            let b = BoundWeights::bind(&mut g, w);
            let h = encode_sequence(&mut g, w, &b, &seq, None).unwrap();
            let m = mlm_logits(&mut g, w, &b, h, &seq, &[2]).unwrap();
            let q = qdpp_logits(&mut g, w, &b, h);
            let r = relevance_logits(&mut g, w, &b, h);
            (g.values(m).to_vec(), g.values(q).to_vec(), g.values(r).to_vec())
        };
        let (m0, q0, r0) = outputs(&w);
        w.param_mut("layer0.attn.q.weight").value.values_mut()[5] += 0.25;
        let (m1, q1, r1) = outputs(&w);
        assert_ne!(m0, m1);
        assert_ne!(q0, q1);
        assert_ne!(r0, r1);
    }

    #[test]
    fn mlm_targets_align_with_positions() {
        // The masked-position list and the target extraction must agree.
        let (vocab, w) = fixture();
        let mut seq = seq_of(&vocab, 16);
        seq.mlm_targets[3] = seq.ids[3];
        seq.ids[3] = crate::tokenizer::MASK_ID;
        let positions = seq.masked_positions();
        assert_eq!(positions, [3]);
        let targets: Vec<u32> = positions.iter().map(|&p| seq.mlm_targets[p]).collect();
        assert_ne!(targets[0], IGNORE_TARGET);
        let mut g = Graph::new();
        let b = BoundWeights::bind(&mut g, &w);
        let h = encode_sequence(&mut g, &w, &b, &seq, None).unwrap();
        let logits = mlm_logits(&mut g, &w, &b, h, &seq, &positions).unwrap();
        let loss = g.cross_entropy(logits, &targets, Reduction::Mean).unwrap();
        assert!(g.values(loss)[0] > 0.0);
    }
}

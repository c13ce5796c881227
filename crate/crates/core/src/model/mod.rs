//! Bidirectional transformer encoder with masked-token, pair-prediction,
//! and relevance heads sharing one trunk.

mod checkpoint;
mod encoder;

pub use checkpoint::{check_vocab_size, load_checkpoint, save_checkpoint, CheckpointMeta, Stage};
pub use encoder::{
    encode_sequence, mlm_logits, qdpp_logits, relevance_logits, score_relevance, BoundWeights,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numerics::{Param, Tensor};
use crate::rng::{derive_rng, Stream};

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Standard deviation of weight initialization, truncated at two sigma.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer layer count.
    pub layers: usize,
    /// Hidden size.
    pub hidden: usize,
    /// Attention heads; must divide `hidden`.
    pub heads: usize,
    /// Feed-forward inner size.
    pub ff_inner: usize,
    /// Vocabulary size.
    pub vocab_size: usize,
    /// Maximum (and stored) sequence length.
    pub max_len: usize,
    pub n_segments: usize,
    /// Dropout on attention probabilities and sub-layer outputs during
    /// training; 0 disables.
    pub dropout: f64,
}

impl ModelConfig {
    /// Two layers and 128 hidden units: small enough to train on one desk
    /// machine in reasonable time.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 128,
            heads: 2,
            ff_inner: 512,
            vocab_size,
            max_len: 256,
            n_segments: 2,
            dropout: 0.1,
        }
    }

    /// Narrow model for smoke runs on synthetic corpora. Width 32 is the
    /// observed floor for the sequence-summary heads to train at all; the
    /// short context keeps a training step cheap.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 32,
            heads: 4,
            ff_inner: 64,
            vocab_size,
            max_len: 32,
            n_segments: 2,
            dropout: 0.0,
        }
    }

    /// Miniature configuration for finite-difference checks and fast tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ff_inner: 16,
            vocab_size,
            max_len: 16,
            n_segments: 2,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(ModelError::BadHeadCount { hidden: self.hidden, heads: self.heads });
        }
        assert!(self.max_len >= 8, "max_len must be at least 8");
        assert!(self.layers >= 1 && self.ff_inner >= 1 && self.vocab_size > 7);
        assert_eq!(self.n_segments, 2, "two-segment inputs are assumed throughout");
        assert!((0.0..1.0).contains(&self.dropout));
        Ok(())
    }

    /// Expected tensor names and shapes, in storage order. The checkpoint
    /// manifest must match this exactly.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f, v) = (self.hidden, self.ff_inner, self.vocab_size);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![v, h]),
            ("embeddings.position".to_string(), vec![self.max_len, h]),
            ("embeddings.segment".to_string(), vec![self.n_segments, h]),
        ];
        for l in 0..self.layers {
            for proj in ["q", "k", "v", "out"] {
                out.push((format!("layer{l}.attn.{proj}.weight"), vec![h, h]));
                out.push((format!("layer{l}.attn.{proj}.bias"), vec![h]));
            }
            out.push((format!("layer{l}.attn.norm.gain"), vec![h]));
            out.push((format!("layer{l}.attn.norm.bias"), vec![h]));
            out.push((format!("layer{l}.ff.in.weight"), vec![h, f]));
            out.push((format!("layer{l}.ff.in.bias"), vec![f]));
            out.push((format!("layer{l}.ff.out.weight"), vec![f, h]));
            out.push((format!("layer{l}.ff.out.bias"), vec![h]));
            out.push((format!("layer{l}.ff.norm.gain"), vec![h]));
            out.push((format!("layer{l}.ff.norm.bias"), vec![h]));
        }
        out.push(("mlm.transform.weight".to_string(), vec![h, h]));
        out.push(("mlm.transform.bias".to_string(), vec![h]));
        out.push(("mlm.norm.gain".to_string(), vec![h]));
        out.push(("mlm.norm.bias".to_string(), vec![h]));
        // The output projection is tied to the token embeddings; only its
        // bias is a free parameter.
        out.push(("mlm.output.bias".to_string(), vec![v]));
        out.push(("qdpp.weight".to_string(), vec![h, 2]));
        out.push(("qdpp.bias".to_string(), vec![2]));
        out.push(("relevance.weight".to_string(), vec![h, 2]));
        out.push(("relevance.bias".to_string(), vec![2]));
        out
    }
}

/// All trainable tensors, addressable by manifest name and by index.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Param>,
}

fn truncated_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    loop {
        // Box–Muller; the sine mate is discarded.
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * INIT_STD;
        }
    }
}

impl EncoderWeights {
    /// Random initialization: weights from a truncated normal, biases zero,
    /// layer-norm gains one. Each tensor draws from its own derived stream,
    /// keyed by manifest position.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let manifest = config.manifest();
        let mut names = Vec::with_capacity(manifest.len());
        let mut params = Vec::with_capacity(manifest.len());
        for (idx, (name, shape)) in manifest.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else {
                let mut rng = derive_rng(seed, Stream::Init, &[idx as u64]);
                (0..n).map(|_| truncated_normal(&mut rng)).collect()
            };
            names.push(name);
            params.push(Param::new(Tensor::new(shape, values)));
        }
        Ok(EncoderWeights { config: config.clone(), names, params })
    }

    /// All-zero weights with unit layer-norm gains; a fixture for tests.
    pub fn zeroed(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let manifest = config.manifest();
        let mut names = Vec::with_capacity(manifest.len());
        let mut params = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".gain") { vec![1.0; n] } else { vec![0.0; n] };
            names.push(name);
            params.push(Param::new(Tensor::new(shape, values)));
        }
        Ok(EncoderWeights { config: config.clone(), names, params })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        names: Vec<String>,
        params: Vec<Param>,
    ) -> Self {
        EncoderWeights { config, names, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn param(&self, name: &str) -> &Param {
        &self.params[self.index_of(name)]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param {
        let i = self.index_of(name);
        &mut self.params[i]
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copy the relevance head from the pair-prediction head; the optional
    /// warm start when fine-tuning follows coarse-tuning.
    pub fn copy_qdpp_into_relevance(&mut self) {
        for part in ["weight", "bias"] {
            let src = self.param(&format!("qdpp.{part}")).value.clone();
            self.param_mut(&format!("relevance.{part}")).value = src;
        }
    }

    /// Re-randomize the relevance head (fresh classifier at fine-tuning start).
    pub fn reinit_relevance(&mut self, seed: u64) {
        let idx = self.index_of("relevance.weight");
        let mut rng = derive_rng(seed, Stream::Init, &[idx as u64, 1]);
        let p = &mut self.params[idx];
        for v in p.value.values_mut() {
            *v = truncated_normal(&mut rng);
        }
        let bias = self.param_mut("relevance.bias");
        for v in bias.value.values_mut() {
            *v = 0.0;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Name of the first parameter holding a non-finite value, if any.
    pub fn find_non_finite(&self) -> Option<&str> {
        for (name, p) in self.names.iter().zip(&self.params) {
            if p.value.values().iter().any(|v| !v.is_finite()) {
                return Some(name);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_matches_hand_enumeration_for_tiny_config() {
        let cfg = ModelConfig::tiny(50);
        let names: Vec<String> = cfg.manifest().into_iter().map(|(n, _)| n).collect();
        let expected = [
            "embeddings.token",
            "embeddings.position",
            "embeddings.segment",
            "layer0.attn.q.weight",
            "layer0.attn.q.bias",
            "layer0.attn.k.weight",
            "layer0.attn.k.bias",
            "layer0.attn.v.weight",
            "layer0.attn.v.bias",
            "layer0.attn.out.weight",
            "layer0.attn.out.bias",
            "layer0.attn.norm.gain",
            "layer0.attn.norm.bias",
            "layer0.ff.in.weight",
            "layer0.ff.in.bias",
            "layer0.ff.out.weight",
            "layer0.ff.out.bias",
            "layer0.ff.norm.gain",
            "layer0.ff.norm.bias",
            "layer1.attn.q.weight",
            "layer1.attn.q.bias",
            "layer1.attn.k.weight",
            "layer1.attn.k.bias",
            "layer1.attn.v.weight",
            "layer1.attn.v.bias",
            "layer1.attn.out.weight",
            "layer1.attn.out.bias",
            "layer1.attn.norm.gain",
            "layer1.attn.norm.bias",
            "layer1.ff.in.weight",
            "layer1.ff.in.bias",
            "layer1.ff.out.weight",
            "layer1.ff.out.bias",
            "layer1.ff.norm.gain",
            "layer1.ff.norm.bias",
            "mlm.transform.weight",
            "mlm.transform.bias",
            "mlm.norm.gain",
            "mlm.norm.bias",
            "mlm.output.bias",
            "qdpp.weight",
            "qdpp.bias",
            "relevance.weight",
            "relevance.bias",
        ];
        assert_eq!(names, expected);
    }

    #[test]
    fn init_is_seed_deterministic_and_truncated() {
        let cfg = ModelConfig::tiny(50);
        let a = EncoderWeights::init(&cfg, 7).unwrap();
        let b = EncoderWeights::init(&cfg, 7).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.value.values(), y.value.values());
        }
        let c = EncoderWeights::init(&cfg, 8).unwrap();
        assert_ne!(
            a.param("embeddings.token").value.values(),
            c.param("embeddings.token").value.values()
        );
        for v in a.param("embeddings.token").value.values() {
            assert!(v.abs() <= 2.0 * INIT_STD + 1e-12, "value {v} outside truncation");
        }
    }

    #[test]
    fn biases_zero_and_gains_one_at_init() {
        let cfg = ModelConfig::tiny(50);
        let w = EncoderWeights::init(&cfg, 3).unwrap();
        assert!(w.param("layer0.attn.q.bias").value.values().iter().all(|&v| v == 0.0));
        assert!(w.param("mlm.output.bias").value.values().iter().all(|&v| v == 0.0));
        assert!(w.param("layer1.ff.norm.gain").value.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_head_count_is_rejected() {
        let mut cfg = ModelConfig::tiny(50);
        cfg.heads = 3;
        assert!(matches!(
            EncoderWeights::init(&cfg, 1),
            Err(ModelError::BadHeadCount { .. })
        ));
    }

    #[test]
    fn qdpp_head_copy_and_relevance_reinit() {
        let cfg = ModelConfig::tiny(50);
        let mut w = EncoderWeights::init(&cfg, 5).unwrap();
        assert_ne!(
            w.param("qdpp.weight").value.values(),
            w.param("relevance.weight").value.values()
        );
        w.copy_qdpp_into_relevance();
        assert_eq!(
            w.param("qdpp.weight").value.values(),
            w.param("relevance.weight").value.values()
        );
        w.reinit_relevance(99);
        assert_ne!(
            w.param("qdpp.weight").value.values(),
            w.param("relevance.weight").value.values()
        );
    }

    #[test]
    fn non_finite_detection_names_the_parameter() {
        let cfg = ModelConfig::tiny(50);
        let mut w = EncoderWeights::init(&cfg, 5).unwrap();
        assert_eq!(w.find_non_finite(), None);
        w.param_mut("layer1.ff.in.weight").value.values_mut()[3] = f64::NAN;
        assert_eq!(w.find_non_finite(), Some("layer1.ff.in.weight"));
    }
}

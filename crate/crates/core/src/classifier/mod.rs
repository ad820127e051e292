//! Desk-scale text classifier: embedding -> optional single-head
//! self-attention block (residual + layer norm) -> mean pooling ->
//! FC -> ReLU -> FC(K).
//!
//! Parameters live in a [`ModelCheckpoint`] keyed by layer name. Names
//! starting with `encoder.` belong to the shared encoder (embeddings
//! included) and are seeded from the encoder seed; names starting with
//! `head.` are seeded from the head seed.

mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{TokenizedDoc, UNK_ID};

pub use train::{
    make_variants, pretrain_encoder, train, AdamW, EpochLog, TrainConfig, TrainingLog, VariantSeeds, Variants,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderType {
    None,
    SelfAttentionBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_type: EncoderType,
    /// Width of the attention projections.
    pub encoder_dim: usize,
    pub hidden_units: usize,
    pub classes: usize,
    pub max_seq_len: usize,
    pub fine_tune_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 16,
            encoder_type: EncoderType::SelfAttentionBlock,
            encoder_dim: 16,
            hidden_units: 64,
            classes: 2,
            max_seq_len: 64,
            fine_tune_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_dim", self.encoder_dim),
            ("hidden_units", self.hidden_units),
            ("classes", self.classes),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model.{name} must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(Error::contract("model.vocab_size must include PAD and UNK"));
        }
        if self.hidden_units < self.classes {
            return Err(Error::contract("model.hidden_units must be at least model.classes"));
        }
        Ok(())
    }

    /// `(name, shape, kind)` for every parameter.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, Init)> {
        let (e, a, h, k) = (self.embed_dim, self.encoder_dim, self.hidden_units, self.classes);
        let mut v = vec![("encoder.embedding", vec![self.vocab_size, e], Init::Embedding)];
        if self.encoder_type == EncoderType::SelfAttentionBlock {
            v.extend([
                ("encoder.attn.wq", vec![e, a], Init::He),
                ("encoder.attn.wk", vec![e, a], Init::He),
                ("encoder.attn.wv", vec![e, a], Init::He),
                ("encoder.attn.wo", vec![a, e], Init::He),
                ("encoder.ln.gamma", vec![e], Init::Ones),
                ("encoder.ln.beta", vec![e], Init::Zeros),
            ]);
        }
        v.extend([
            ("head.fc1.weight", vec![e, h], Init::He),
            ("head.fc1.bias", vec![h], Init::Zeros),
            ("head.fc2.weight", vec![h, k], Init::He),
            ("head.fc2.bias", vec![k], Init::Zeros),
        ]);
        v
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He,
    Embedding,
    Zeros,
    Ones,
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    FirstInit,
    SecondInit,
    RandInit,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::FirstInit => "FirstInit",
            Variant::SecondInit => "SecondInit",
            Variant::RandInit => "RandInit",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What a gradient or value-function query measures for a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTarget {
    #[default]
    Logit,
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub encoder_seed: u64,
    pub head_seed: u64,
    pub variant: Option<Variant>,
    pub train_config: Option<TrainConfig>,
    pub trained: bool,
    pub params: BTreeMap<String, Tensor>,
}

/// Fresh parameters: He-normal weight matrices (variance 2/fan_in), zero
/// biases, unit layer-norm gain, and N(0, 1/embed_dim) embeddings.
pub fn init_params(config: &ModelConfig, encoder_seed: u64, head_seed: u64) -> Result<ModelCheckpoint> {
    config.validate()?;
    let mut params = BTreeMap::new();
    for (name, shape, init) in config.layout() {
        let owner = if is_encoder_param(name) { encoder_seed } else { head_seed };
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::He | Init::Embedding => {
                let var = match init {
                    Init::He => 2.0 / shape[0] as f64,
                    _ => 1.0 / config.embed_dim as f64,
                };
                let normal = Normal::new(0.0, var.sqrt()).map_err(|e| Error::contract(e.to_string()))?;
                let mut rng = seed::rng(seed::for_name(owner, name));
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        params.insert(name.to_string(), Tensor::new(shape, data)?);
    }
    Ok(ModelCheckpoint {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        encoder_seed,
        head_seed,
        variant: None,
        train_config: None,
        trained: false,
        params,
    })
}

/// Handles to parameters pushed onto a tape.
pub(crate) struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    fn get(&self, name: &str) -> Var {
        self.0[name]
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl ModelCheckpoint {
    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub(crate) fn push_params(
        &self,
        tape: &mut Tape,
        include: impl Fn(&str) -> bool,
        trainable: impl Fn(&str) -> bool,
    ) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .filter(|(n, _)| include(n))
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable(n))))
                .collect(),
        )
    }

    /// `[L, E]` embeddings of `ids`.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::contract("empty document"));
        }
        let table = self.param("encoder.embedding");
        let (v, e) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::contract(format!("token id {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(table.row(id));
        }
        Tensor::matrix(ids.len(), e, out)
    }

    pub fn unk_embedding(&self) -> Vec<f64> {
        self.param("encoder.embedding").row(UNK_ID).to_vec()
    }

    /// Encoder + pooling: `[L,E] -> [1,E]`.
    pub(crate) fn encode_on(&self, tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
        let h = match self.config.encoder_type {
            EncoderType::None => x,
            EncoderType::SelfAttentionBlock => {
                let q = tape.matmul(x, p.get("encoder.attn.wq"))?;
                let k = tape.matmul(x, p.get("encoder.attn.wk"))?;
                let v = tape.matmul(x, p.get("encoder.attn.wv"))?;
                let scores = tape.matmul_t(q, k)?;
                let scores = tape.scale(scores, 1.0 / (self.config.encoder_dim as f64).sqrt())?;
                let attn = tape.softmax(scores, 1)?;
                let ctx = tape.matmul(attn, v)?;
                let out = tape.matmul(ctx, p.get("encoder.attn.wo"))?;
                let res = tape.add(x, out)?;
                tape.layer_norm(res, p.get("encoder.ln.gamma"), p.get("encoder.ln.beta"))?
            }
        };
        tape.mean_rows(h)
    }

    /// Head: `[1,E] -> [1,K]` logits.
    pub(crate) fn head_on(&self, tape: &mut Tape, p: &ParamVars, pooled: Var) -> Result<Var> {
        let h = tape.matmul(pooled, p.get("head.fc1.weight"))?;
        let h = tape.add_bias(h, p.get("head.fc1.bias"))?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, p.get("head.fc2.weight"))?;
        tape.add_bias(o, p.get("head.fc2.bias"))
    }

    fn non_embedding(name: &str) -> bool {
        name != "encoder.embedding"
    }

    /// Logits for the given input embeddings.
    pub fn logits_from_embeddings(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.push_params(&mut tape, Self::non_embedding, |_| false);
        let xv = tape.constant(x.clone());
        let pooled = self.encode_on(&mut tape, &p, xv)?;
        let logits = self.head_on(&mut tape, &p, pooled)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Pooled encoder output for `ids`.
    pub fn pooled(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let x = self.embed_ids(ids)?;
        let mut tape = Tape::new();
        let p = self.push_params(&mut tape, |n| is_encoder_param(n) && Self::non_embedding(n), |_| false);
        let xv = tape.constant(x);
        let pooled = self.encode_on(&mut tape, &p, xv)?;
        Ok(tape.value(pooled).data().to_vec())
    }

    /// Class logits plus the `[L,E]` input embeddings that gradient-based
    /// attribution differentiates against.
    pub fn forward(&self, doc: &TokenizedDoc) -> Result<(Vec<f64>, Tensor)> {
        let x = self.embed_ids(&doc.ids)?;
        Ok((self.logits_from_embeddings(&x)?, x))
    }

    pub fn predict(&self, doc: &TokenizedDoc) -> Result<usize> {
        Ok(argmax(&self.forward(doc)?.0))
    }

    /// Target score for `class` and its gradient with respect to `x`.
    pub fn score_and_grad(&self, x: &Tensor, class: usize, target: ScoreTarget) -> Result<(f64, Tensor)> {
        if class >= self.classes() {
            return Err(Error::contract(format!("class {class} out of range")));
        }
        let mut tape = Tape::new();
        let p = self.push_params(&mut tape, Self::non_embedding, |_| false);
        let xv = tape.leaf(x.clone(), true);
        let pooled = self.encode_on(&mut tape, &p, xv)?;
        let logits = self.head_on(&mut tape, &p, pooled)?;
        let out = match target {
            ScoreTarget::Logit => tape.select(logits, class)?,
            ScoreTarget::Probability => {
                let probs = tape.softmax(logits, 1)?;
                tape.select(probs, class)?
            }
        };
        tape.backward(out)?;
        let value = tape.value(out).item().expect("scalar");
        let grad = tape.grad(xv).expect("input requires grad");
        Ok((value, grad))
    }

    /// Content hash over config, seeds, variant and parameters.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(s)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        ckpt.config.validate()?;
        for (name, shape, _) in ckpt.config.layout() {
            match ckpt.params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::contract(format!("checkpoint parameter `{name}` missing or misshapen"))),
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Copy with every `head.` parameter replaced from `other`.
    pub fn with_head_of(&self, other: &ModelCheckpoint) -> Self {
        let mut out = self.clone();
        for (n, t) in &other.params {
            if !is_encoder_param(n) {
                out.params.insert(n.clone(), t.clone());
            }
        }
        out.head_seed = other.head_seed;
        out
    }

    /// True when every `encoder.` parameter is bit-identical to `other`'s.
    pub fn same_encoder(&self, other: &ModelCheckpoint) -> bool {
        self.params
            .iter()
            .filter(|(n, _)| is_encoder_param(n))
            .all(|(n, t)| other.params.get(n) == Some(t))
    }
}

/// Read-only view of a classifier used by attribution methods and metrics.
pub trait TextModel: Sync {
    fn num_classes(&self) -> usize;

    /// `[L, D]` input embeddings.
    fn embed(&self, ids: &[usize]) -> Result<Tensor>;

    /// Embedding used to simulate removing a token.
    fn unk_embedding(&self) -> Vec<f64>;

    fn logits_from_embeddings(&self, x: &Tensor) -> Result<Vec<f64>>;

    fn score_and_grad(&self, x: &Tensor, class: usize, target: ScoreTarget) -> Result<(f64, Tensor)>;

    fn logits(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.logits_from_embeddings(&self.embed(ids)?)
    }

    fn predict_ids(&self, ids: &[usize]) -> Result<usize> {
        Ok(argmax(&self.logits(ids)?))
    }

    fn score(&self, x: &Tensor, class: usize, target: ScoreTarget) -> Result<f64> {
        let logits = self.logits_from_embeddings(x)?;
        Ok(match target {
            ScoreTarget::Logit => logits[class],
            ScoreTarget::Probability => {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                (logits[class] - m).exp() / z
            }
        })
    }
}

impl TextModel for ModelCheckpoint {
    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        self.embed_ids(ids)
    }

    fn unk_embedding(&self) -> Vec<f64> {
        ModelCheckpoint::unk_embedding(self)
    }

    fn logits_from_embeddings(&self, x: &Tensor) -> Result<Vec<f64>> {
        ModelCheckpoint::logits_from_embeddings(self, x)
    }

    fn score_and_grad(&self, x: &Tensor, class: usize, target: ScoreTarget) -> Result<(f64, Tensor)> {
        ModelCheckpoint::score_and_grad(self, x, class, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, max_relative_error};

    fn cfg(encoder: EncoderType) -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            embed_dim: 8,
            encoder_dim: 6,
            hidden_units: 12,
            classes: 3,
            encoder_type: encoder,
            ..Default::default()
        }
    }

    fn doc(ids: &[usize]) -> TokenizedDoc {
        TokenizedDoc {
            doc_id: "d".into(),
            tokens: ids.iter().map(|i| i.to_string()).collect(),
            ids: ids.to_vec(),
            label: 0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = cfg(EncoderType::SelfAttentionBlock);
        assert_eq!(init_params(&c, 0, 1).unwrap(), init_params(&c, 0, 1).unwrap());
    }

    #[test]
    fn head_seed_only_changes_head() {
        let c = cfg(EncoderType::SelfAttentionBlock);
        let a = init_params(&c, 0, 1).unwrap();
        let b = init_params(&c, 0, 2).unwrap();
        assert!(a.same_encoder(&b));
        assert_ne!(a.param("head.fc1.weight"), b.param("head.fc1.weight"));
        assert_ne!(a.param("head.fc2.weight"), b.param("head.fc2.weight"));
    }

    #[test]
    fn he_variance_of_wide_matrix() {
        let c = ModelConfig {
            vocab_size: 10,
            embed_dim: 512,
            encoder_dim: 512,
            hidden_units: 512,
            ..Default::default()
        };
        let ck = init_params(&c, 3, 4).unwrap();
        for name in ["head.fc1.weight", "encoder.attn.wq", "head.fc2.weight"] {
            let w = ck.param(name);
            let fan_in = w.shape()[0] as f64;
            let n = w.len() as f64;
            let mean = w.data().iter().sum::<f64>() / n;
            let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 0.1 * (2.0 / fan_in).sqrt(), "{name} mean {mean}");
            assert!((var / (2.0 / fan_in) - 1.0).abs() < 0.1, "{name} var {var}");
        }
        let fc1_bias = ck.param("head.fc1.bias");
        assert!(fc1_bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn single_token_pooling_is_identity() {
        let c = cfg(EncoderType::None);
        let ck = init_params(&c, 0, 1).unwrap();
        let pooled = ck.pooled(&[5]).unwrap();
        assert_eq!(pooled, ck.param("encoder.embedding").row(5));
    }

    #[test]
    fn logits_have_k_entries_and_empty_doc_fails() {
        let ck = init_params(&cfg(EncoderType::SelfAttentionBlock), 0, 1).unwrap();
        assert_eq!(ck.forward(&doc(&[2, 3, 4])).unwrap().0.len(), 3);
        assert!(ck.forward(&doc(&[])).is_err());
        assert!(ck.forward(&doc(&[99])).is_err());
    }

    #[test]
    fn bag_of_embeddings_is_permutation_invariant() {
        let ck = init_params(&cfg(EncoderType::None), 0, 1).unwrap();
        let a = ck.forward(&doc(&[2, 7, 9, 11, 3])).unwrap().0;
        let b = ck.forward(&doc(&[11, 3, 9, 2, 7])).unwrap().0;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ties_to_lower_index() {
        assert_eq!(argmax(&[0.2, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        for s in 0..10 {
            let ck = init_params(&cfg(EncoderType::SelfAttentionBlock), s, s + 100).unwrap();
            let x = ck.embed_ids(&[2, 5, 7, 2, 9]).unwrap();
            for target in [ScoreTarget::Logit, ScoreTarget::Probability] {
                let (_, g) = ck.score_and_grad(&x, 1, target).unwrap();
                let fd = finite_difference_gradient(|t| TextModel::score(&ck, t, 1, target), &x, 1e-5).unwrap();
                let err = max_relative_error(g.data(), fd.data(), 1e-4);
                assert!(err < 1e-4, "seed {s}: {err}");
            }
        }
    }

    #[test]
    fn checkpoint_json_round_trip_is_bit_exact() {
        let ck = init_params(&cfg(EncoderType::SelfAttentionBlock), 7, 8).unwrap();
        let back = ModelCheckpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        for (n, t) in &ck.params {
            let b = &back.params[n];
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let mut ck = init_params(&cfg(EncoderType::None), 1, 2).unwrap();
        ck.format_version = 99;
        assert!(ModelCheckpoint::from_json(&ck.to_json().unwrap()).is_err());
    }
}

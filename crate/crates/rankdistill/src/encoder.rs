//! Transformer cross-encoder over (query, document) token pairs.
//!
//! The encoder is a post-layer-norm BERT-style stack: summed token, position,
//! and segment embeddings through layer norm, then per layer multi-head
//! attention and a GELU feed-forward block, each followed by a residual
//! connection and layer norm. A tanh pooler reads the first ([CLS]) position
//! of the final layer and a linear classifier produces two logits; index 0 is
//! the "relevant" class. The ranking score is `softmax(logits)[0]` by default
//! or the raw difference `logits[0] - logits[1]` (the two orderings agree;
//! scoring only changes the numeric scale).
//!
//! [`encode`] returns a [`ForwardTrace`] rather than bare logits: per-layer
//! hidden states and pre-softmax attention scores are what the layer-wise
//! distillation losses consume.
//!
//! Token id space: ids 0, 1, 2 are reserved for [CLS], [SEP], [PAD]; task
//! tokens `0..vocab` are shifted up by 3 when packed. Attention masking is
//! additive: masked key columns get -1e9 before softmax, which underflows to
//! exactly zero weight, so padding a sequence leaves every real position's
//! activations bitwise unchanged.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
/// Number of reserved ids below the shifted task vocabulary.
pub const SPECIAL_TOKENS: usize = 3;
/// Segment ids are 0 (query side, up to and including the first [SEP]) or 1.
pub const SEGMENT_TYPES: usize = 2;

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;
const MASK_OFF: f64 = -1e9;

/// How a trace's two logits become one ranking score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// `softmax(logits)[0]`, a probability in (0, 1).
    #[default]
    Probability,
    /// `logits[0] - logits[1]`; orders candidates identically.
    RawLogit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Task vocabulary size; the model additionally embeds the 3 special ids.
    pub vocab: usize,
    pub max_query_len: usize,
    pub max_doc_len: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
    #[serde(default)]
    pub scoring: Scoring,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig("num_layers must be >= 1".into()));
        }
        if self.hidden == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("hidden and heads must be >= 1".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::InvalidConfig("ffn_dim must be >= 1".into()));
        }
        if self.vocab == 0 {
            return Err(Error::InvalidConfig("vocab must be >= 1".into()));
        }
        if self.max_query_len == 0 || self.max_doc_len == 0 {
            return Err(Error::InvalidConfig(
                "max_query_len and max_doc_len must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Longest packed sequence: [CLS] + query + [SEP] + document + [SEP].
    pub fn max_seq_len(&self) -> usize {
        self.max_query_len + self.max_doc_len + 3
    }

    /// Rows of the token embedding table (task vocab plus specials).
    pub fn model_vocab(&self) -> usize {
        self.vocab + SPECIAL_TOKENS
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub attn_norm: LayerNormParams,
    pub ffn_inner: LinearParams,
    pub ffn_output: LinearParams,
    pub ffn_norm: LayerNormParams,
}

/// All weights of one encoder, together with the configuration that shaped
/// them. Parameter traversal order is fixed (embeddings, embedding norm,
/// layers in depth order with query/key/value/output/attn_norm/ffn_inner/
/// ffn_output/ffn_norm, pooler, classifier); initialization, checkpoints,
/// and the optimizer all rely on it.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `[model_vocab, hidden]`
    pub token_embedding: Tensor,
    /// `[max_seq_len, hidden]`
    pub position_embedding: Tensor,
    /// `[SEGMENT_TYPES, hidden]`
    pub segment_embedding: Tensor,
    pub embedding_norm: LayerNormParams,
    pub layers: Vec<LayerParams>,
    pub pooler: LinearParams,
    pub classifier: LinearParams,
}

fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).expect("static shapes are valid")
}

fn zero_linear(input: usize, output: usize) -> LinearParams {
    LinearParams {
        weight: zeros(vec![input, output]),
        bias: zeros(vec![output]),
    }
}

fn zero_norm(width: usize) -> LayerNormParams {
    LayerNormParams {
        gain: zeros(vec![width]),
        bias: zeros(vec![width]),
    }
}

/// Sample a truncated normal: N(0, std^2) with draws outside two standard
/// deviations rejected and redrawn.
pub(crate) fn trunc_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let x: f64 = rng.sample(rand_distr::StandardNormal);
        let x = x * std;
        if x.abs() <= 2.0 * std {
            data.push(x);
        }
    }
    Tensor::from_vec(shape, data).expect("shape/data lengths agree by construction")
}

/// Weight std used by every freshly initialized module in the crate.
pub(crate) const WEIGHT_STD: f64 = INIT_STD;

/// Initialize parameters from `config.seed`: weights and embeddings are
/// truncated normal (std 0.02), biases zero, layer norm gains one. The draw
/// order is the documented parameter traversal order, so equal seeds give
/// bitwise-equal parameters.
pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut params = skeleton(config);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
    for (name, t) in params.named_mut() {
        if name.ends_with(".gain") {
            *t = Tensor::from_vec(t.shape().to_vec(), vec![1.0; t.numel()])?;
        } else if name.ends_with(".bias") {
            // Already zero.
        } else {
            *t = trunc_normal(&mut rng, t.shape().to_vec(), INIT_STD);
        }
    }
    Ok(params)
}

/// Zero-valued parameters with the right shapes for `config`.
fn skeleton(config: &EncoderConfig) -> EncoderParams {
    let h = config.hidden;
    let layers = (0..config.num_layers)
        .map(|_| LayerParams {
            query: zero_linear(h, h),
            key: zero_linear(h, h),
            value: zero_linear(h, h),
            output: zero_linear(h, h),
            attn_norm: zero_norm(h),
            ffn_inner: zero_linear(h, config.ffn_dim),
            ffn_output: zero_linear(config.ffn_dim, h),
            ffn_norm: zero_norm(h),
        })
        .collect();
    EncoderParams {
        config: config.clone(),
        token_embedding: zeros(vec![config.model_vocab(), h]),
        position_embedding: zeros(vec![config.max_seq_len(), h]),
        segment_embedding: zeros(vec![SEGMENT_TYPES, h]),
        embedding_norm: zero_norm(h),
        layers,
        pooler: zero_linear(h, h),
        classifier: zero_linear(h, 2),
    }
}

macro_rules! visit_linear {
    ($f:expr, $prefix:expr, $lin:expr) => {
        $f(format!("{}.weight", $prefix), &mut $lin.weight);
        $f(format!("{}.bias", $prefix), &mut $lin.bias);
    };
}

macro_rules! visit_norm {
    ($f:expr, $prefix:expr, $ln:expr) => {
        $f(format!("{}.gain", $prefix), &mut $ln.gain);
        $f(format!("{}.bias", $prefix), &mut $ln.bias);
    };
}

impl EncoderParams {
    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Tensor)) {
        f("token_embedding".into(), &mut self.token_embedding);
        f("position_embedding".into(), &mut self.position_embedding);
        f("segment_embedding".into(), &mut self.segment_embedding);
        visit_norm!(f, "embedding_norm", self.embedding_norm);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            visit_linear!(f, format!("layer.{i}.query"), layer.query);
            visit_linear!(f, format!("layer.{i}.key"), layer.key);
            visit_linear!(f, format!("layer.{i}.value"), layer.value);
            visit_linear!(f, format!("layer.{i}.output"), layer.output);
            visit_norm!(f, format!("layer.{i}.attn_norm"), layer.attn_norm);
            visit_linear!(f, format!("layer.{i}.ffn_inner"), layer.ffn_inner);
            visit_linear!(f, format!("layer.{i}.ffn_output"), layer.ffn_output);
            visit_norm!(f, format!("layer.{i}.ffn_norm"), layer.ffn_norm);
        }
        visit_linear!(f, "pooler", self.pooler);
        visit_linear!(f, "classifier", self.classifier);
    }

    /// `(name, tensor)` pairs in traversal order. Tensors are cheap clones
    /// sharing storage with `self`.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut me = self.clone();
        me.visit_mut(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Mutable `(name, tensor)` pairs in traversal order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, t| out.push((name, t)));
        out
    }

    /// A copy whose every tensor went through `f` (same structure).
    fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> EncoderParams {
        let mut me = self.clone();
        me.visit_mut(&mut |_, t| *t = f(t));
        me
    }

    /// Register every tensor on `tape` for differentiation.
    pub fn watched(&self, tape: &Tape) -> EncoderParams {
        self.map(|t| tape.watch(t))
    }

    /// Rebuild parameters from named tensors (checkpoint loading). Every
    /// expected name must be present with the right shape; unknown names are
    /// rejected.
    pub fn from_named(config: &EncoderConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut by_name: HashMap<String, Tensor> = HashMap::new();
        for (name, t) in entries {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        let mut params = skeleton(config);
        let mut missing = Vec::new();
        for (name, slot) in params.named_mut() {
            match by_name.remove(&name) {
                Some(t) => {
                    if t.shape() != slot.shape() {
                        return Err(Error::Checkpoint(format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t;
                }
                None => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing tensors: {}",
                missing.join(", ")
            )));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// A packed (query, document) pair ready for [`encode`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInput {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Assemble `[CLS] query [SEP] document [SEP]` with task tokens shifted past
/// the special ids. Query and document are truncated to the configured
/// maxima; no padding is emitted (the mask is all true).
pub fn pack_input(query: &[usize], doc: &[usize], config: &EncoderConfig) -> Result<PackedInput> {
    if query.is_empty() || doc.is_empty() {
        return Err(Error::Data("query and document must be nonempty".into()));
    }
    for &tok in query.iter().chain(doc) {
        if tok >= config.vocab {
            return Err(Error::IndexOutOfBounds {
                op: "pack_input",
                index: tok,
                len: config.vocab,
            });
        }
    }
    let q = &query[..query.len().min(config.max_query_len)];
    let d = &doc[..doc.len().min(config.max_doc_len)];
    let mut ids = Vec::with_capacity(q.len() + d.len() + 3);
    ids.push(CLS_ID);
    ids.extend(q.iter().map(|t| t + SPECIAL_TOKENS));
    ids.push(SEP_ID);
    let boundary = ids.len();
    ids.extend(d.iter().map(|t| t + SPECIAL_TOKENS));
    ids.push(SEP_ID);
    let mut segments = vec![0; ids.len()];
    for s in segments[boundary..].iter_mut() {
        *s = 1;
    }
    let mask = vec![true; ids.len()];
    Ok(PackedInput {
        ids,
        segments,
        mask,
    })
}

/// Everything a forward pass produces, kept as tensors so losses built on a
/// trace stay differentiable when the parameters were watched.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Embedding output after layer norm, `[seq, hidden]`.
    pub emb_out: Tensor,
    /// Output of each encoder layer, `[seq, hidden]` each.
    pub hidden: Vec<Tensor>,
    /// Pre-softmax attention scores of each layer (mask already added),
    /// `[heads, seq, seq]` each.
    pub attn_scores: Vec<Tensor>,
    /// Classifier output, `[2]`; index 0 is the "relevant" class.
    pub logits: Tensor,
}

fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    x.matmul(&p.weight)?.add(&p.bias)
}

fn norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    x.layer_norm(&p.gain, &p.bias, LN_EPS)
}

/// Run the encoder over one packed input.
pub fn encode(params: &EncoderParams, input: &PackedInput) -> Result<ForwardTrace> {
    let config = &params.config;
    let seq = input.ids.len();
    if seq == 0 {
        return Err(Error::Data("cannot encode an empty sequence".into()));
    }
    if input.segments.len() != seq || input.mask.len() != seq {
        return Err(Error::Data(format!(
            "ids/segments/mask lengths disagree: {}/{}/{}",
            seq,
            input.segments.len(),
            input.mask.len()
        )));
    }
    if seq > config.max_seq_len() {
        return Err(Error::Data(format!(
            "sequence length {seq} exceeds maximum {}",
            config.max_seq_len()
        )));
    }
    if !input.mask.iter().any(|&m| m) {
        return Err(Error::Data("mask hides every position".into()));
    }

    let positions: Vec<usize> = (0..seq).collect();
    let summed = params
        .token_embedding
        .gather(&input.ids)?
        .add(&params.position_embedding.gather(&positions)?)?
        .add(&params.segment_embedding.gather(&input.segments)?)?;
    let emb_out = norm(&summed, &params.embedding_norm)?;

    // Additive key mask, broadcast over every query row.
    let mask_row = Tensor::from_vec(
        vec![seq],
        input
            .mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_OFF })
            .collect(),
    )?;

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut h = emb_out.clone();
    let mut hidden = Vec::with_capacity(config.num_layers);
    let mut attn_scores = Vec::with_capacity(config.num_layers);
    for layer in &params.layers {
        let q = linear(&h, &layer.query)?;
        let k = linear(&h, &layer.key)?;
        let v = linear(&h, &layer.value)?;
        let mut ctx_parts = Vec::with_capacity(config.heads);
        let mut score_parts = Vec::with_capacity(config.heads);
        for a in 0..config.heads {
            let (lo, hi) = (a * dh, (a + 1) * dh);
            let qa = q.slice_cols(lo, hi)?;
            let ka = k.slice_cols(lo, hi)?;
            let va = v.slice_cols(lo, hi)?;
            let scores = qa
                .matmul(&ka.transpose()?)?
                .scale(scale)
                .add(&mask_row)?;
            let weights = scores.softmax();
            ctx_parts.push(weights.matmul(&va)?);
            score_parts.push(scores.reshape(&[1, seq * seq])?);
        }
        let ctx_refs: Vec<&Tensor> = ctx_parts.iter().collect();
        let ctx = crate::tensor::concat_cols(&ctx_refs)?;
        let score_refs: Vec<&Tensor> = score_parts.iter().collect();
        let stacked = crate::tensor::concat_rows(&score_refs)?.reshape(&[config.heads, seq, seq])?;
        attn_scores.push(stacked);

        let attn_out = linear(&ctx, &layer.output)?;
        h = norm(&h.add(&attn_out)?, &layer.attn_norm)?;
        let ffn = linear(&linear(&h, &layer.ffn_inner)?.gelu(), &layer.ffn_output)?;
        h = norm(&h.add(&ffn)?, &layer.ffn_norm)?;
        hidden.push(h.clone());
    }

    let cls = hidden
        .last()
        .expect("num_layers >= 1 is enforced by validate")
        .slice_rows(0, 1)?;
    let pooled = linear(&cls, &params.pooler)?.tanh();
    let logits = linear(&pooled, &params.classifier)?.reshape(&[2])?;

    Ok(ForwardTrace {
        emb_out,
        hidden,
        attn_scores,
        logits,
    })
}

/// The ranking score as a (possibly differentiable) scalar tensor.
pub fn score_tensor(trace: &ForwardTrace, scoring: Scoring) -> Result<Tensor> {
    match scoring {
        Scoring::Probability => trace.logits.softmax().pick(0),
        Scoring::RawLogit => trace.logits.pick(0)?.sub(&trace.logits.pick(1)?),
    }
}

/// The ranking score as a plain number.
pub fn ranking_score(trace: &ForwardTrace, scoring: Scoring) -> Result<f64> {
    score_tensor(trace, scoring)?.item()
}

/// Pack, encode, and score one (query, document) pair with the encoder's
/// configured scoring.
pub fn score_pair(params: &EncoderParams, query: &[usize], doc: &[usize]) -> Result<f64> {
    let input = pack_input(query, doc, &params.config)?;
    let trace = encode(params, &input)?;
    ranking_score(&trace, params.config.scoring)
}

/// FNV fingerprint over parameter names, shapes, and exact bit patterns.
/// Equal fingerprints mean bitwise-identical models.
pub fn params_fingerprint(params: &EncoderParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, t) in params.named() {
        eat(name.as_bytes());
        for &d in t.shape() {
            eat(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            eat(&x.to_bits().to_le_bytes());
        }
    }
    h
}

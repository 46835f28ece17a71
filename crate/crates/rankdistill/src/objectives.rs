//! Distillation and fine-tuning objectives.
//!
//! Seven primitive terms are available, composed by an [`ObjectivePlan`]:
//!
//! - `attn`, `hidn`, `emb`: layer-wise mean-squared errors between student
//!   and teacher activations under a [`LayerMap`]. Attention transfer
//!   compares pre-softmax scores and requires equal head counts; hidden and
//!   embedding transfer project the student into the teacher's width with a
//!   learned `[student_hidden, teacher_hidden]` matrix when the widths
//!   differ.
//! - `logits`: soft cross-entropy between temperature-scaled teacher and
//!   student logits (the temperature default is 1 and no `t^2` rescaling is
//!   applied).
//! - `hard`: cross-entropy against the binary relevance label (class 0 is
//!   "relevant").
//! - `pair`: the ranking hinge `max(0, 1 - s(d+) + s(d-))` on the student's
//!   probability scores.
//! - `margin_mse`: squared difference between the student's and teacher's
//!   raw-logit score margins over a (positive, negative) pair.
//!
//! A plan is *pairwise* when `pair` or `margin_mse` is enabled and consumes
//! `(query, d+, d-)` trace quadruples; otherwise it is *pointwise* and
//! consumes a single labeled pair. `pair`/`margin_mse` cannot be combined
//! with `hard`: the hinge already encodes the label through document order.
//!
//! Teacher activations are detached before every comparison, so gradients
//! only ever flow into the student (and the projections).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{score_tensor, ForwardTrace, Scoring};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Binary relevance of one (query, document) pair. Class index 0 means
/// relevant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Relevant,
    NotRelevant,
}

impl Relevance {
    pub fn class_index(self) -> usize {
        match self {
            Relevance::Relevant => 0,
            Relevance::NotRelevant => 1,
        }
    }
}

/// How per-layer losses aggregate across mapped layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerReduce {
    #[default]
    Mean,
    Sum,
}

/// Which teacher layer supervises each student layer. Pairs are 1-based
/// `(student_layer, teacher_layer)`, strictly increasing in both components.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMap {
    pairs: Vec<(usize, usize)>,
    include_embedding: bool,
}

#[derive(Deserialize)]
struct LayerMapRepr {
    pairs: Vec<(usize, usize)>,
    include_embedding: bool,
}

impl<'de> Deserialize<'de> for LayerMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = LayerMapRepr::deserialize(d)?;
        LayerMap::new(repr.pairs, repr.include_embedding).map_err(serde::de::Error::custom)
    }
}

impl LayerMap {
    pub fn new(pairs: Vec<(usize, usize)>, include_embedding: bool) -> Result<Self> {
        for window in pairs.windows(2) {
            let (s0, t0) = window[0];
            let (s1, t1) = window[1];
            if s1 <= s0 || t1 <= t0 {
                return Err(Error::InvalidLayerMap(format!(
                    "pairs must be strictly increasing, got ({s0},{t0}) then ({s1},{t1})"
                )));
            }
        }
        if pairs.iter().any(|&(s, t)| s == 0 || t == 0) {
            return Err(Error::InvalidLayerMap("layer indices are 1-based".into()));
        }
        Ok(LayerMap {
            pairs,
            include_embedding,
        })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn include_embedding(&self) -> bool {
        self.include_embedding
    }

    /// Check that every pair fits the given teacher and student depths.
    pub fn validate_for(&self, teacher_layers: usize, student_layers: usize) -> Result<()> {
        for &(s, t) in &self.pairs {
            if s > student_layers || t > teacher_layers {
                return Err(Error::InvalidLayerMap(format!(
                    "pair ({s},{t}) exceeds depths (student {student_layers}, teacher {teacher_layers})"
                )));
            }
        }
        Ok(())
    }
}

/// Recipes for building a [`LayerMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingStrategy {
    /// Student layer i supervises from teacher layer `i * (L_T / L_S)`;
    /// requires the teacher depth to be a multiple of the student depth.
    Uniform,
    /// Student layer i maps to teacher layer `L_T - L_S + i` (the last
    /// `L_S` teacher layers).
    Last,
    /// Only the final student layer maps, to the final teacher layer.
    LastOne,
}

impl std::str::FromStr for MappingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(MappingStrategy::Uniform),
            "last" => Ok(MappingStrategy::Last),
            "last_one" => Ok(MappingStrategy::LastOne),
            other => Err(Error::InvalidLayerMap(format!(
                "unknown mapping strategy {other:?} (expected uniform, last, or last_one)"
            ))),
        }
    }
}

/// Build the layer map for a teacher/student depth pair. The embedding is
/// always included.
pub fn make_layer_map(
    strategy: MappingStrategy,
    teacher_layers: usize,
    student_layers: usize,
) -> Result<LayerMap> {
    if teacher_layers == 0 || student_layers == 0 {
        return Err(Error::InvalidLayerMap("depths must be >= 1".into()));
    }
    if student_layers > teacher_layers {
        return Err(Error::InvalidLayerMap(format!(
            "student depth {student_layers} exceeds teacher depth {teacher_layers}"
        )));
    }
    let pairs = match strategy {
        MappingStrategy::Uniform => {
            if teacher_layers % student_layers != 0 {
                return Err(Error::InvalidLayerMap(format!(
                    "uniform mapping needs teacher depth {teacher_layers} divisible by student depth {student_layers}"
                )));
            }
            let step = teacher_layers / student_layers;
            (1..=student_layers).map(|i| (i, i * step)).collect()
        }
        MappingStrategy::Last => {
            let offset = teacher_layers - student_layers;
            (1..=student_layers).map(|i| (i, offset + i)).collect()
        }
        MappingStrategy::LastOne => vec![(student_layers, teacher_layers)],
    };
    LayerMap::new(pairs, true)
}

/// Learned projections from student width into teacher width, one per mapped
/// layer plus one for the embedding output. Present only when the widths
/// differ.
#[derive(Clone, Debug)]
pub struct ProjectionParams {
    /// `[student_hidden, teacher_hidden]`, aligned with the map's pairs.
    pub layers: Vec<Tensor>,
    /// Present when the map includes the embedding.
    pub embedding: Option<Tensor>,
}

impl ProjectionParams {
    /// Initialize truncated-normal projections (std 0.02) from `seed`.
    pub fn init(map: &LayerMap, student_hidden: usize, teacher_hidden: usize, seed: u64) -> Self {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let layers = map
            .pairs()
            .iter()
            .map(|_| {
                crate::encoder::trunc_normal(
                    &mut rng,
                    vec![student_hidden, teacher_hidden],
                    crate::encoder::WEIGHT_STD,
                )
            })
            .collect();
        let embedding = map.include_embedding().then(|| {
            crate::encoder::trunc_normal(
                &mut rng,
                vec![student_hidden, teacher_hidden],
                crate::encoder::WEIGHT_STD,
            )
        });
        ProjectionParams { layers, embedding }
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("projection.layer.{i}"), t.clone()))
            .collect();
        if let Some(e) = &self.embedding {
            out.push(("projection.embedding".into(), e.clone()));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .layers
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("projection.layer.{i}"), t))
            .collect();
        if let Some(e) = &mut self.embedding {
            out.push(("projection.embedding".into(), e));
        }
        out
    }

    pub fn watched(&self, tape: &Tape) -> ProjectionParams {
        ProjectionParams {
            layers: self.layers.iter().map(|t| tape.watch(t)).collect(),
            embedding: self.embedding.as_ref().map(|t| tape.watch(t)),
        }
    }
}

/// Which activation family a layer-wise loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerwiseKind {
    Attention,
    Hidden,
    Embedding,
}

fn project(x: &Tensor, w: Option<&Tensor>) -> Result<Tensor> {
    match w {
        Some(w) => x.matmul(w),
        None => Ok(x.clone()),
    }
}

/// Layer-wise MSE between student and teacher activations under `map`.
/// Hidden and embedding comparisons apply the corresponding projection when
/// one is supplied; attention never projects (it requires equal head counts
/// and compares `[heads, seq, seq]` score stacks directly).
pub fn l_layerwise(
    kind: LayerwiseKind,
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    map: &LayerMap,
    proj: Option<&ProjectionParams>,
    reduce: LayerReduce,
) -> Result<Tensor> {
    if kind == LayerwiseKind::Embedding {
        if !map.include_embedding() {
            return Err(Error::InvalidLayerMap(
                "embedding loss requested but the layer map excludes the embedding".into(),
            ));
        }
        let w = proj.and_then(|p| p.embedding.as_ref());
        return project(&student.emb_out, w)?.mse(&teacher.emb_out.detach());
    }

    map.validate_for(teacher.hidden.len(), student.hidden.len())?;
    if map.pairs().is_empty() {
        return Err(Error::InvalidLayerMap(
            "layer-wise loss requested but the map has no layer pairs".into(),
        ));
    }
    let mut acc: Option<Tensor> = None;
    for (i, &(s, t)) in map.pairs().iter().enumerate() {
        let term = match kind {
            LayerwiseKind::Attention => {
                student.attn_scores[s - 1].mse(&teacher.attn_scores[t - 1].detach())?
            }
            LayerwiseKind::Hidden => {
                let w = proj.map(|p| {
                    p.layers.get(i).ok_or_else(|| {
                        Error::InvalidLayerMap(format!(
                            "projection list has {} entries, pair index {i} is out of range",
                            p.layers.len()
                        ))
                    })
                });
                let w = match w {
                    Some(r) => Some(r?),
                    None => None,
                };
                project(&student.hidden[s - 1], w)?.mse(&teacher.hidden[t - 1].detach())?
            }
            LayerwiseKind::Embedding => unreachable!(),
        };
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    let acc = acc.expect("map has at least one pair");
    Ok(match reduce {
        LayerReduce::Mean => acc.scale(1.0 / map.pairs().len() as f64),
        LayerReduce::Sum => acc,
    })
}

/// Soft cross-entropy between temperature-scaled logits:
/// `-sum(softmax(z_t / t) * log_softmax(z_s / t))`. The teacher side is
/// detached.
pub fn l_logits(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidPlan(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let p_t = teacher_logits.detach().scale(1.0 / temperature).softmax();
    let logp_s = student_logits.scale(1.0 / temperature).log_softmax();
    Ok(p_t.mul(&logp_s)?.sum_all().neg())
}

/// Cross-entropy against the hard label: `-log_softmax(z)[class]`.
pub fn l_hard(logits: &Tensor, label: Relevance) -> Result<Tensor> {
    logits
        .log_softmax()
        .pick(label.class_index())
        .map(|t| t.neg())
}

/// Ranking hinge `max(0, 1 - score_pos + score_neg)` on scalar scores.
pub fn l_pair(score_pos: &Tensor, score_neg: &Tensor) -> Result<Tensor> {
    Ok(score_neg.sub(score_pos)?.add_scalar(1.0).relu())
}

fn raw_margin(logits_pos: &Tensor, logits_neg: &Tensor) -> Result<Tensor> {
    let raw = |z: &Tensor| -> Result<Tensor> { z.pick(0)?.sub(&z.pick(1)?) };
    raw(logits_pos)?.sub(&raw(logits_neg)?)
}

/// Squared difference of raw-logit score margins:
/// `((zs+[0]-zs+[1]) - (zs-[0]-zs-[1]) - teacher margin)^2`. The teacher side
/// is detached.
pub fn l_margin_mse(
    teacher_logits_pos: &Tensor,
    teacher_logits_neg: &Tensor,
    student_logits_pos: &Tensor,
    student_logits_neg: &Tensor,
) -> Result<Tensor> {
    let m_t = raw_margin(&teacher_logits_pos.detach(), &teacher_logits_neg.detach())?;
    let m_s = raw_margin(student_logits_pos, student_logits_neg)?;
    m_s.mse(&m_t)
}

fn one() -> f64 {
    1.0
}

/// Per-term scale factors applied when composing a total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    #[serde(default = "one")]
    pub pair: f64,
    #[serde(default = "one")]
    pub margin_mse: f64,
    #[serde(default = "one")]
    pub attn: f64,
    #[serde(default = "one")]
    pub hidn: f64,
    #[serde(default = "one")]
    pub emb: f64,
    #[serde(default = "one")]
    pub logits: f64,
    #[serde(default = "one")]
    pub hard: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights {
            pair: 1.0,
            margin_mse: 1.0,
            attn: 1.0,
            hidn: 1.0,
            emb: 1.0,
            logits: 1.0,
            hard: 1.0,
        }
    }
}

/// Identifies one term in a composed objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Pair,
    MarginMse,
    Attn,
    Hidn,
    Emb,
    Logits,
    Hard,
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Term::Pair => "pair",
            Term::MarginMse => "margin_mse",
            Term::Attn => "attn",
            Term::Hidn => "hidn",
            Term::Emb => "emb",
            Term::Logits => "logits",
            Term::Hard => "hard",
        };
        f.write_str(s)
    }
}

/// Whether a plan consumes labeled single pairs or (positive, negative)
/// document pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Pointwise,
    Pairwise,
}

/// A composition of objective terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectivePlan {
    #[serde(default)]
    pub attn: bool,
    #[serde(default)]
    pub hidn: bool,
    #[serde(default)]
    pub emb: bool,
    #[serde(default)]
    pub logits: bool,
    #[serde(default)]
    pub hard: bool,
    #[serde(default)]
    pub pair: bool,
    #[serde(default)]
    pub margin_mse: bool,
    #[serde(default = "one")]
    pub temperature: f64,
    pub layer_map: LayerMap,
    #[serde(default)]
    pub weights: TermWeights,
    #[serde(default)]
    pub layer_reduce: LayerReduce,
}

/// Names accepted by [`ObjectivePlan::preset`].
pub const PRESET_NAMES: [&str; 7] = [
    "L1",
    "L2",
    "L3",
    "margin-mse",
    "table3-no-intermediate",
    "table3-no-embedding",
    "table3-no-logits",
];

impl ObjectivePlan {
    /// A plan with every term disabled and a uniform layer map.
    pub fn empty(teacher_layers: usize, student_layers: usize) -> Result<Self> {
        Ok(ObjectivePlan {
            attn: false,
            hidn: false,
            emb: false,
            logits: false,
            hard: false,
            pair: false,
            margin_mse: false,
            temperature: 1.0,
            layer_map: make_layer_map(MappingStrategy::Uniform, teacher_layers, student_layers)?,
            weights: TermWeights::default(),
            layer_reduce: LayerReduce::default(),
        })
    }

    /// Named objective families:
    ///
    /// - `L1`: pointwise; layer-wise terms + soft logits + hard labels.
    /// - `L2`: pairwise hinge + layer-wise terms + soft logits per document.
    /// - `L3`: pairwise hinge + soft logits per document.
    /// - `margin-mse`: the margin term alone.
    /// - `table3-no-intermediate` / `-no-embedding` / `-no-logits`: `L2`
    ///   with attention+hidden, embedding, or logits removed.
    pub fn preset(name: &str, teacher_layers: usize, student_layers: usize) -> Result<Self> {
        let mut plan = Self::empty(teacher_layers, student_layers)?;
        match name {
            "L1" => {
                plan.attn = true;
                plan.hidn = true;
                plan.emb = true;
                plan.logits = true;
                plan.hard = true;
            }
            "L2" => {
                plan.pair = true;
                plan.attn = true;
                plan.hidn = true;
                plan.emb = true;
                plan.logits = true;
            }
            "L3" => {
                plan.pair = true;
                plan.logits = true;
            }
            "margin-mse" => {
                plan.margin_mse = true;
            }
            "table3-no-intermediate" => {
                plan.pair = true;
                plan.emb = true;
                plan.logits = true;
            }
            "table3-no-embedding" => {
                plan.pair = true;
                plan.attn = true;
                plan.hidn = true;
                plan.logits = true;
            }
            "table3-no-logits" => {
                plan.pair = true;
                plan.attn = true;
                plan.hidn = true;
                plan.emb = true;
            }
            other => {
                return Err(Error::InvalidPlan(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        }
        Ok(plan)
    }

    pub fn regime(&self) -> Regime {
        if self.pair || self.margin_mse {
            Regime::Pairwise
        } else {
            Regime::Pointwise
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.attn || self.hidn || self.emb || self.logits || self.hard || self.pair || self.margin_mse)
        {
            return Err(Error::InvalidPlan("no terms enabled".into()));
        }
        if (self.pair || self.margin_mse) && self.hard {
            return Err(Error::InvalidPlan(
                "hard labels cannot combine with pairwise terms; the hinge already encodes the label"
                    .into(),
            ));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::InvalidPlan(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.emb && !self.layer_map.include_embedding() {
            return Err(Error::InvalidPlan(
                "embedding term enabled but the layer map excludes the embedding".into(),
            ));
        }
        if (self.attn || self.hidn) && self.layer_map.pairs().is_empty() {
            return Err(Error::InvalidPlan(
                "attention/hidden terms enabled but the layer map has no pairs".into(),
            ));
        }
        let w = &self.weights;
        for (name, v) in [
            ("pair", w.pair),
            ("margin_mse", w.margin_mse),
            ("attn", w.attn),
            ("hidn", w.hidn),
            ("emb", w.emb),
            ("logits", w.logits),
            ("hard", w.hard),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidPlan(format!(
                    "weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Traces entering one loss evaluation.
pub enum SampleTraces<'a> {
    /// One labeled (query, document) pair under teacher and student.
    Pointwise {
        teacher: &'a ForwardTrace,
        student: &'a ForwardTrace,
        label: Relevance,
    },
    /// One (query, d+, d-) triple under teacher and student.
    Pairwise {
        teacher_pos: &'a ForwardTrace,
        teacher_neg: &'a ForwardTrace,
        student_pos: &'a ForwardTrace,
        student_neg: &'a ForwardTrace,
    },
}

/// A composed loss: the differentiable total plus the unweighted value of
/// each enabled term (pairwise layer terms are summed over both documents).
pub struct ObjectiveValue {
    pub total: Tensor,
    pub terms: Vec<(Term, f64)>,
}

fn accumulate(total: &mut Option<Tensor>, part: Tensor) -> Result<()> {
    *total = Some(match total.take() {
        Some(t) => t.add(&part)?,
        None => part,
    });
    Ok(())
}

/// Evaluate `plan` on one sample. The sample kind must match the plan's
/// regime. `proj` must be supplied when hidden/embedding terms are enabled
/// and the widths differ.
pub fn compose(
    plan: &ObjectivePlan,
    sample: &SampleTraces,
    proj: Option<&ProjectionParams>,
) -> Result<ObjectiveValue> {
    plan.validate()?;
    let mut total: Option<Tensor> = None;
    let mut terms: Vec<(Term, f64)> = Vec::new();
    match (plan.regime(), sample) {
        (Regime::Pointwise, SampleTraces::Pointwise { teacher, student, label }) => {
            for (kind, term, weight, on) in [
                (LayerwiseKind::Attention, Term::Attn, plan.weights.attn, plan.attn),
                (LayerwiseKind::Hidden, Term::Hidn, plan.weights.hidn, plan.hidn),
                (LayerwiseKind::Embedding, Term::Emb, plan.weights.emb, plan.emb),
            ] {
                if on {
                    let v = l_layerwise(kind, teacher, student, &plan.layer_map, proj, plan.layer_reduce)?;
                    terms.push((term, v.item()?));
                    accumulate(&mut total, v.scale(weight))?;
                }
            }
            if plan.logits {
                let v = l_logits(&teacher.logits, &student.logits, plan.temperature)?;
                terms.push((Term::Logits, v.item()?));
                accumulate(&mut total, v.scale(plan.weights.logits))?;
            }
            if plan.hard {
                let v = l_hard(&student.logits, *label)?;
                terms.push((Term::Hard, v.item()?));
                accumulate(&mut total, v.scale(plan.weights.hard))?;
            }
        }
        (
            Regime::Pairwise,
            SampleTraces::Pairwise {
                teacher_pos,
                teacher_neg,
                student_pos,
                student_neg,
            },
        ) => {
            if plan.pair {
                let s_pos = score_tensor(student_pos, Scoring::Probability)?;
                let s_neg = score_tensor(student_neg, Scoring::Probability)?;
                let v = l_pair(&s_pos, &s_neg)?;
                terms.push((Term::Pair, v.item()?));
                accumulate(&mut total, v.scale(plan.weights.pair))?;
            }
            if plan.margin_mse {
                let v = l_margin_mse(
                    &teacher_pos.logits,
                    &teacher_neg.logits,
                    &student_pos.logits,
                    &student_neg.logits,
                )?;
                terms.push((Term::MarginMse, v.item()?));
                accumulate(&mut total, v.scale(plan.weights.margin_mse))?;
            }
            let sides = [(teacher_pos, student_pos), (teacher_neg, student_neg)];
            for (kind, term, weight, on) in [
                (LayerwiseKind::Attention, Term::Attn, plan.weights.attn, plan.attn),
                (LayerwiseKind::Hidden, Term::Hidn, plan.weights.hidn, plan.hidn),
                (LayerwiseKind::Embedding, Term::Emb, plan.weights.emb, plan.emb),
            ] {
                if on {
                    let mut side_sum = 0.0;
                    for (t, s) in sides {
                        let v = l_layerwise(kind, t, s, &plan.layer_map, proj, plan.layer_reduce)?;
                        side_sum += v.item()?;
                        accumulate(&mut total, v.scale(weight))?;
                    }
                    terms.push((term, side_sum));
                }
            }
            if plan.logits {
                let mut side_sum = 0.0;
                for (t, s) in sides {
                    let v = l_logits(&t.logits, &s.logits, plan.temperature)?;
                    side_sum += v.item()?;
                    accumulate(&mut total, v.scale(plan.weights.logits))?;
                }
                terms.push((Term::Logits, side_sum));
            }
        }
        (Regime::Pointwise, SampleTraces::Pairwise { .. }) => {
            return Err(Error::InvalidPlan(
                "pointwise plan received a pairwise sample".into(),
            ));
        }
        (Regime::Pairwise, SampleTraces::Pointwise { .. }) => {
            return Err(Error::InvalidPlan(
                "pairwise plan received a pointwise sample".into(),
            ));
        }
    }
    let total = total.ok_or_else(|| Error::InvalidPlan("no terms enabled".into()))?;
    Ok(ObjectiveValue { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode, init_params, pack_input, EncoderConfig, Scoring};
    use crate::tensor::Tape;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_map_matches_hand_enumeration() {
        let map = make_layer_map(MappingStrategy::Uniform, 12, 4).unwrap();
        assert_eq!(map.pairs(), &[(1, 3), (2, 6), (3, 9), (4, 12)]);
        let map = make_layer_map(MappingStrategy::Uniform, 4, 2).unwrap();
        assert_eq!(map.pairs(), &[(1, 2), (2, 4)]);
        assert!(make_layer_map(MappingStrategy::Uniform, 12, 5).is_err());
    }

    #[test]
    fn last_maps_match_hand_enumeration() {
        let map = make_layer_map(MappingStrategy::Last, 12, 4).unwrap();
        assert_eq!(map.pairs(), &[(1, 9), (2, 10), (3, 11), (4, 12)]);
        let map = make_layer_map(MappingStrategy::LastOne, 12, 4).unwrap();
        assert_eq!(map.pairs(), &[(4, 12)]);
        assert!(make_layer_map(MappingStrategy::Last, 4, 6).is_err());
        assert!(make_layer_map(MappingStrategy::Uniform, 0, 0).is_err());
    }

    #[test]
    fn layer_map_rejects_non_increasing_pairs() {
        assert!(LayerMap::new(vec![(1, 3), (2, 3)], true).is_err());
        assert!(LayerMap::new(vec![(2, 3), (1, 6)], true).is_err());
        assert!(LayerMap::new(vec![(0, 3)], true).is_err());
        let map = LayerMap::new(vec![(1, 2), (2, 4)], true).unwrap();
        assert!(map.validate_for(4, 2).is_ok());
        assert!(map.validate_for(3, 2).is_err());
        assert!(map.validate_for(4, 1).is_err());
    }

    proptest! {
        #[test]
        fn generated_maps_are_strictly_increasing_and_bounded(
            student in 1usize..6,
            multiple in 1usize..5,
            strategy in prop_oneof![
                Just(MappingStrategy::Uniform),
                Just(MappingStrategy::Last),
                Just(MappingStrategy::LastOne)
            ],
        ) {
            let teacher = student * multiple;
            let map = make_layer_map(strategy, teacher, student).unwrap();
            prop_assert!(map.validate_for(teacher, student).is_ok());
            for w in map.pairs().windows(2) {
                prop_assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1);
            }
            prop_assert!(!map.pairs().is_empty());
        }
    }

    #[test]
    fn soft_cross_entropy_of_identical_uniform_logits_is_ln2() {
        let z = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let loss = l_logits(&z, &z, 1.0).unwrap().item().unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn soft_cross_entropy_gradient_vanishes_at_identical_logits() {
        let tape = Tape::new();
        let z_t = Tensor::from_vec(vec![2], vec![0.7, -0.3]).unwrap();
        let z_s = tape.watch(&z_t);
        let loss = l_logits(&z_t, &z_s, 1.0).unwrap();
        loss.backward().unwrap();
        for g in z_s.grad().unwrap().data() {
            assert!(g.abs() < 1e-10, "gradient {g} should vanish");
        }
    }

    #[test]
    fn soft_cross_entropy_matches_scalar_oracle() {
        // Oracle: compute -sum(p_t * log p_s) with plain f64 arithmetic.
        let oracle = |zt: [f64; 2], zs: [f64; 2], t: f64| -> f64 {
            let pt = {
                let e0 = (zt[0] / t).exp();
                let e1 = (zt[1] / t).exp();
                [e0 / (e0 + e1), e1 / (e0 + e1)]
            };
            let lps = {
                let m = (zs[0] / t).max(zs[1] / t);
                let lse = ((zs[0] / t - m).exp() + (zs[1] / t - m).exp()).ln() + m;
                [zs[0] / t - lse, zs[1] / t - lse]
            };
            -(pt[0] * lps[0] + pt[1] * lps[1])
        };
        for (zt, zs, t) in [
            ([1.0, 0.0], [0.0, 1.0], 1.0),
            ([2.0, -1.0], [0.5, 0.5], 1.0),
            ([1.0, 0.0], [0.0, 1.0], 2.0),
            ([-3.0, 4.0], [1.0, -1.0], 0.5),
        ] {
            let t_t = Tensor::from_vec(vec![2], zt.to_vec()).unwrap();
            let t_s = Tensor::from_vec(vec![2], zs.to_vec()).unwrap();
            let got = l_logits(&t_t, &t_s, t).unwrap().item().unwrap();
            assert_abs_diff_eq!(got, oracle(zt, zs, t), epsilon = 1e-12);
        }
        assert!(l_logits(
            &Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap(),
            &Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap(),
            0.0
        )
        .is_err());
    }

    #[test]
    fn hard_label_loss_matches_scalar_oracle() {
        let z = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let v = l_hard(&z, Relevance::Relevant).unwrap().item().unwrap();
        assert_abs_diff_eq!(v, std::f64::consts::LN_2, epsilon = 1e-12);

        // -log softmax([2, 0])[0] = ln(1 + e^-2)
        let z = Tensor::from_vec(vec![2], vec![2.0, 0.0]).unwrap();
        let v = l_hard(&z, Relevance::Relevant).unwrap().item().unwrap();
        assert_abs_diff_eq!(v, (1.0f64 + (-2.0f64).exp()).ln(), epsilon = 1e-12);

        // The not-relevant label reads index 1.
        let v = l_hard(&z, Relevance::NotRelevant).unwrap().item().unwrap();
        assert_abs_diff_eq!(v, (1.0f64 + (2.0f64).exp()).ln(), epsilon = 1e-12);
    }

    #[test]
    fn hinge_values_match_hand_cases() {
        let hinge = |p: f64, n: f64| {
            l_pair(&Tensor::scalar(p), &Tensor::scalar(n))
                .unwrap()
                .item()
                .unwrap()
        };
        assert_abs_diff_eq!(hinge(0.9, 0.2), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(hinge(0.5, 0.5), 1.0, epsilon = 1e-12);
        // Saturated: margin >= 1 gives exactly zero.
        assert_eq!(hinge(1.0, -0.5), 0.0);
    }

    #[test]
    fn saturated_hinge_has_zero_gradient() {
        let tape = Tape::new();
        let p = tape.watch(&Tensor::scalar(1.2));
        let n = tape.watch(&Tensor::scalar(-0.4));
        let loss = l_pair(&p, &n).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap().data(), &[0.0]);
        assert_eq!(n.grad().unwrap().data(), &[0.0]);
    }

    #[test]
    fn margin_mse_matches_hand_case() {
        let z = |a: f64, b: f64| Tensor::from_vec(vec![2], vec![a, b]).unwrap();
        // Teacher margins: (2-0) - (0-1) = 3. Student: (1-0) - (0-0) = 1.
        let v = l_margin_mse(&z(2.0, 0.0), &z(0.0, 1.0), &z(1.0, 0.0), &z(0.0, 0.0))
            .unwrap()
            .item()
            .unwrap();
        assert_abs_diff_eq!(v, 4.0, epsilon = 1e-12);
        // Equal margins give zero.
        let v = l_margin_mse(&z(1.0, 0.0), &z(0.0, 0.0), &z(5.0, 4.0), &z(2.0, 2.0))
            .unwrap()
            .item()
            .unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    fn teacher_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden: 16,
            heads: 2,
            ffn_dim: 32,
            vocab: 40,
            max_query_len: 3,
            max_doc_len: 5,
            seed: 21,
            scoring: Scoring::Probability,
        }
    }

    fn student_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 40,
            max_query_len: 3,
            max_doc_len: 5,
            seed: 22,
            scoring: Scoring::Probability,
        }
    }

    fn traces() -> (ForwardTrace, ForwardTrace, ForwardTrace, ForwardTrace) {
        let teacher = init_params(&teacher_config()).unwrap();
        let student = init_params(&student_config()).unwrap();
        let q = [1usize, 2, 3];
        let pos = [2usize, 3, 4, 5];
        let neg = [20usize, 21, 22, 23];
        let enc = |params, doc: &[usize]| {
            encode(params, &pack_input(&q, doc, &teacher_config()).unwrap()).unwrap()
        };
        (
            enc(&teacher, &pos),
            enc(&teacher, &neg),
            enc(&student, &pos),
            enc(&student, &neg),
        )
    }

    #[test]
    fn layerwise_losses_vanish_on_identical_traces() {
        let (t_pos, _, _, _) = traces();
        let map = make_layer_map(MappingStrategy::Uniform, 2, 2).unwrap();
        for kind in [
            LayerwiseKind::Attention,
            LayerwiseKind::Hidden,
            LayerwiseKind::Embedding,
        ] {
            let v = l_layerwise(kind, &t_pos, &t_pos, &map, None, LayerReduce::Mean)
                .unwrap()
                .item()
                .unwrap();
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layerwise_mse_matches_hand_value() {
        // Fabricated traces with known contents: attention MSE over
        // [1, 2, 2] tensors of all twos vs all zeros is 4.
        let fake = |v: f64| ForwardTrace {
            emb_out: Tensor::from_vec(vec![2, 2], vec![v; 4]).unwrap(),
            hidden: vec![Tensor::from_vec(vec![2, 2], vec![v; 4]).unwrap()],
            attn_scores: vec![Tensor::from_vec(vec![1, 2, 2], vec![v; 4]).unwrap()],
            logits: Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap(),
        };
        let map = LayerMap::new(vec![(1, 1)], true).unwrap();
        let v = l_layerwise(
            LayerwiseKind::Attention,
            &fake(2.0),
            &fake(0.0),
            &map,
            None,
            LayerReduce::Mean,
        )
        .unwrap()
        .item()
        .unwrap();
        assert_abs_diff_eq!(v, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn sum_reduce_is_mean_times_layer_count() {
        let (t_pos, _, s_pos, _) = traces();
        let map = LayerMap::new(vec![(1, 2)], true).unwrap();
        let proj = ProjectionParams::init(&map, 8, 16, 3);
        let mean = l_layerwise(LayerwiseKind::Hidden, &t_pos, &s_pos, &map, Some(&proj), LayerReduce::Mean)
            .unwrap()
            .item()
            .unwrap();
        let sum = l_layerwise(LayerwiseKind::Hidden, &t_pos, &s_pos, &map, Some(&proj), LayerReduce::Sum)
            .unwrap()
            .item()
            .unwrap();
        assert_abs_diff_eq!(sum, mean * map.pairs().len() as f64, epsilon = 1e-12);
    }

    #[test]
    fn projection_gradients_pass_finite_difference() {
        use crate::tensor::gradcheck::check_gradients_sampled;
        let (t_pos, _, s_pos, _) = traces();
        let map = LayerMap::new(vec![(1, 2)], true).unwrap();
        let proj = ProjectionParams::init(&map, 8, 16, 3);
        let f = move |inputs: &[Tensor]| {
            let p = ProjectionParams {
                layers: vec![inputs[0].clone()],
                embedding: Some(inputs[1].clone()),
            };
            let hid = l_layerwise(LayerwiseKind::Hidden, &t_pos, &s_pos, &map, Some(&p), LayerReduce::Mean)?;
            let emb = l_layerwise(LayerwiseKind::Embedding, &t_pos, &s_pos, &map, Some(&p), LayerReduce::Mean)?;
            hid.add(&emb)
        };
        let inputs = vec![proj.layers[0].clone(), proj.embedding.clone().unwrap()];
        let report = check_gradients_sampled(&f, &inputs, 1e-5, 24, 5).unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {:?}", report.worst);
    }

    #[test]
    fn layerwise_rejects_out_of_range_maps() {
        let (t_pos, _, s_pos, _) = traces();
        let map = LayerMap::new(vec![(3, 4)], true).unwrap();
        assert!(l_layerwise(LayerwiseKind::Hidden, &t_pos, &s_pos, &map, None, LayerReduce::Mean).is_err());
        let empty = LayerMap::new(vec![], true).unwrap();
        assert!(l_layerwise(LayerwiseKind::Attention, &t_pos, &s_pos, &empty, None, LayerReduce::Mean).is_err());
    }

    #[test]
    fn plan_validation_rejects_contradictions() {
        let mut plan = ObjectivePlan::preset("L2", 2, 1).unwrap();
        plan.hard = true;
        assert!(plan.validate().is_err());

        let mut plan = ObjectivePlan::preset("margin-mse", 2, 1).unwrap();
        plan.hard = true;
        assert!(plan.validate().is_err());

        let plan = ObjectivePlan::empty(2, 1).unwrap();
        assert!(plan.validate().is_err());

        let mut plan = ObjectivePlan::preset("L3", 2, 1).unwrap();
        plan.temperature = 0.0;
        assert!(plan.validate().is_err());

        let mut plan = ObjectivePlan::preset("L2", 2, 1).unwrap();
        plan.layer_map = LayerMap::new(vec![(1, 2)], false).unwrap();
        assert!(plan.validate().is_err(), "emb without embedding mapping");

        let mut plan = ObjectivePlan::preset("L3", 2, 1).unwrap();
        plan.weights.pair = -1.0;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn presets_enable_documented_terms() {
        let l1 = ObjectivePlan::preset("L1", 2, 1).unwrap();
        assert!((l1.attn && l1.hidn && l1.emb && l1.logits && l1.hard) && !l1.pair);
        assert_eq!(l1.regime(), Regime::Pointwise);

        let l2 = ObjectivePlan::preset("L2", 2, 1).unwrap();
        assert!(l2.pair && l2.attn && l2.hidn && l2.emb && l2.logits && !l2.hard);
        assert_eq!(l2.regime(), Regime::Pairwise);

        let l3 = ObjectivePlan::preset("L3", 2, 1).unwrap();
        assert!(l3.pair && l3.logits && !l3.attn && !l3.hidn && !l3.emb);

        let m = ObjectivePlan::preset("margin-mse", 2, 1).unwrap();
        assert!(m.margin_mse && !m.pair && !m.logits);
        assert_eq!(m.regime(), Regime::Pairwise);

        let no_int = ObjectivePlan::preset("table3-no-intermediate", 2, 1).unwrap();
        assert!(!no_int.attn && !no_int.hidn && no_int.emb && no_int.logits && no_int.pair);
        let no_emb = ObjectivePlan::preset("table3-no-embedding", 2, 1).unwrap();
        assert!(no_emb.attn && no_emb.hidn && !no_emb.emb && no_emb.logits);
        let no_log = ObjectivePlan::preset("table3-no-logits", 2, 1).unwrap();
        assert!(no_log.attn && no_log.hidn && no_log.emb && !no_log.logits && no_log.pair);

        let err = ObjectivePlan::preset("L9", 2, 1).unwrap_err();
        assert!(err.to_string().contains("L2"));
    }

    #[test]
    fn compose_rejects_mismatched_sample_kind() {
        let (t_pos, t_neg, s_pos, s_neg) = traces();
        let l1 = ObjectivePlan::preset("L1", 2, 1).unwrap();
        let sample = SampleTraces::Pairwise {
            teacher_pos: &t_pos,
            teacher_neg: &t_neg,
            student_pos: &s_pos,
            student_neg: &s_neg,
        };
        let map = &l1.layer_map;
        let proj = ProjectionParams::init(map, 8, 16, 3);
        assert!(compose(&l1, &sample, Some(&proj)).is_err());

        let l3 = ObjectivePlan::preset("L3", 2, 1).unwrap();
        let sample = SampleTraces::Pointwise {
            teacher: &t_pos,
            student: &s_pos,
            label: Relevance::Relevant,
        };
        assert!(compose(&l3, &sample, None).is_err());
    }

    #[test]
    fn composed_total_is_weighted_sum_of_reported_terms() {
        let (t_pos, t_neg, s_pos, s_neg) = traces();
        let mut plan = ObjectivePlan::preset("L2", 2, 1).unwrap();
        plan.weights.pair = 2.0;
        plan.weights.attn = 0.5;
        let proj = ProjectionParams::init(&plan.layer_map, 8, 16, 3);
        let sample = SampleTraces::Pairwise {
            teacher_pos: &t_pos,
            teacher_neg: &t_neg,
            student_pos: &s_pos,
            student_neg: &s_neg,
        };
        let value = compose(&plan, &sample, Some(&proj)).unwrap();
        let mut want = 0.0;
        for &(term, v) in &value.terms {
            let w = match term {
                Term::Pair => plan.weights.pair,
                Term::MarginMse => plan.weights.margin_mse,
                Term::Attn => plan.weights.attn,
                Term::Hidn => plan.weights.hidn,
                Term::Emb => plan.weights.emb,
                Term::Logits => plan.weights.logits,
                Term::Hard => plan.weights.hard,
            };
            want += w * v;
        }
        assert_abs_diff_eq!(value.total.item().unwrap(), want, epsilon = 1e-12);
        // L2 reports exactly pair + attn + hidn + emb + logits.
        let kinds: Vec<Term> = value.terms.iter().map(|(t, _)| *t).collect();
        assert_eq!(
            kinds,
            vec![Term::Pair, Term::Attn, Term::Hidn, Term::Emb, Term::Logits]
        );
    }

    #[test]
    fn pointwise_total_sums_five_terms() {
        let (t_pos, _, s_pos, _) = traces();
        let plan = ObjectivePlan::preset("L1", 2, 1).unwrap();
        let proj = ProjectionParams::init(&plan.layer_map, 8, 16, 3);
        let sample = SampleTraces::Pointwise {
            teacher: &t_pos,
            student: &s_pos,
            label: Relevance::Relevant,
        };
        let value = compose(&plan, &sample, Some(&proj)).unwrap();
        assert_eq!(value.terms.len(), 5);
        let sum: f64 = value.terms.iter().map(|(_, v)| v).sum();
        assert_abs_diff_eq!(value.total.item().unwrap(), sum, epsilon = 1e-12);
    }

    #[test]
    fn l2_minus_l3_equals_the_six_layerwise_terms() {
        let (t_pos, t_neg, s_pos, s_neg) = traces();
        let l2 = ObjectivePlan::preset("L2", 2, 1).unwrap();
        let l3 = ObjectivePlan::preset("L3", 2, 1).unwrap();
        let proj = ProjectionParams::init(&l2.layer_map, 8, 16, 3);
        let sample = SampleTraces::Pairwise {
            teacher_pos: &t_pos,
            teacher_neg: &t_neg,
            student_pos: &s_pos,
            student_neg: &s_neg,
        };
        let v2 = compose(&l2, &sample, Some(&proj)).unwrap().total.item().unwrap();
        let v3 = compose(&l3, &sample, Some(&proj)).unwrap().total.item().unwrap();

        let mut layerwise = 0.0;
        for (t, s) in [(&t_pos, &s_pos), (&t_neg, &s_neg)] {
            for kind in [
                LayerwiseKind::Attention,
                LayerwiseKind::Hidden,
                LayerwiseKind::Embedding,
            ] {
                layerwise += l_layerwise(kind, t, s, &l2.layer_map, Some(&proj), LayerReduce::Mean)
                    .unwrap()
                    .item()
                    .unwrap();
            }
        }
        assert_abs_diff_eq!(v2 - v3, layerwise, epsilon = 1e-10);
    }

    #[test]
    fn attention_transfer_requires_equal_head_counts() {
        let teacher = init_params(&teacher_config()).unwrap();
        let mut sc = student_config();
        sc.heads = 1;
        let student = init_params(&sc).unwrap();
        let q = [1usize, 2];
        let d = [3usize, 4];
        let t_trace = encode(&teacher, &pack_input(&q, &d, &teacher_config()).unwrap()).unwrap();
        let s_trace = encode(&student, &pack_input(&q, &d, &sc).unwrap()).unwrap();
        let map = make_layer_map(MappingStrategy::Uniform, 2, 1).unwrap();
        // Shapes [2, seq, seq] vs [1, seq, seq] cannot be compared.
        assert!(l_layerwise(
            LayerwiseKind::Attention,
            &t_trace,
            &s_trace,
            &map,
            None,
            LayerReduce::Mean
        )
        .is_err());
    }

    #[test]
    fn plan_serde_round_trips() {
        let mut plan = ObjectivePlan::preset("L2", 4, 2).unwrap();
        plan.weights.logits = 0.5;
        plan.layer_reduce = LayerReduce::Sum;
        let json = serde_json::to_string(&plan).unwrap();
        let back: ObjectivePlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);

        // Deserialization enforces map validity.
        let bad = json.replace("[[1,2],[2,4]]", "[[2,2],[1,4]]");
        assert!(serde_json::from_str::<ObjectivePlan>(&bad).is_err());
    }
}

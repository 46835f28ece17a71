//! Optimization loops: Adam, deterministic epoch schedules, encoder
//! fine-tuning, and teacher-to-student distillation.
//!
//! Every run is a pure function of its inputs and seeds. Teacher activations
//! are computed once per training sample and cached across epochs (fields a
//! plan never reads are dropped from the cache), so the per-step cost is the
//! student's forward and backward passes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{mix64, Triple, DOMAIN_PROJECTION, DOMAIN_SHUFFLE};
use crate::encoder::{encode, init_params, pack_input, score_tensor, EncoderConfig, EncoderParams, ForwardTrace, Scoring};
use crate::error::{Error, Result};
use crate::objectives::{
    compose, l_hard, l_pair, ObjectivePlan, ProjectionParams, Regime, Relevance, SampleTraces, Term,
};
use crate::tensor::{Tape, Tensor};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamParams {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates, aligned with a fixed parameter order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        OptimizerState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(named: &[(String, Tensor)]) -> Self {
        Self::new(&named.iter().map(|(_, t)| t.numel()).collect::<Vec<_>>())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one bias-corrected Adam update in place. `grads[i]` pairs with
/// `params[i]`; a `None` gradient contributes zeros (its moments still
/// decay). A non-finite gradient aborts, naming the parameter.
pub fn adam_step(
    opt: &AdamParams,
    state: &mut OptimizerState,
    params: &mut [(String, &mut Tensor)],
    grads: &[Option<Tensor>],
) -> Result<()> {
    opt.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidConfig(format!(
            "optimizer saw {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - opt.beta1.powf(t);
    let bc2 = 1.0 - opt.beta2.powf(t);
    for (i, (name, tensor)) in params.iter_mut().enumerate() {
        let n = tensor.numel();
        if state.m[i].len() != n {
            return Err(Error::InvalidConfig(format!(
                "optimizer state for {name} holds {} values, parameter has {n}",
                state.m[i].len()
            )));
        }
        let zero;
        let g: &[f64] = match &grads[i] {
            Some(g) => {
                if g.numel() != n {
                    return Err(Error::InvalidConfig(format!(
                        "gradient for {name} has {} values, parameter has {n}",
                        g.numel()
                    )));
                }
                g.data()
            }
            None => {
                zero = vec![0.0; n];
                &zero
            }
        };
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
                detail: format!("value {bad}"),
            });
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = tensor.data_mut();
        for j in 0..n {
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

fn default_fraction() -> f64 {
    1.0
}

/// Shared knobs of one optimization run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of the training triples actually used, sampled once up
    /// front (at least one sample survives).
    #[serde(default = "default_fraction")]
    pub data_fraction: f64,
    pub seed: u64,
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        AdamParams::with_learning_rate(self.learning_rate).validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "data_fraction must lie in (0, 1], got {}",
                self.data_fraction
            )));
        }
        Ok(())
    }
}

/// Per-epoch visit orders over a dataset of `n` samples: one up-front
/// subset draw of `max(1, floor(fraction * n))` samples, then an
/// independent shuffle of that subset per epoch. Deterministic in `seed`.
pub fn epoch_orders(n: usize, fraction: f64, epochs: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "data fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let count = ((fraction * n as f64).floor() as usize).clamp(1, n);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mix64(
        seed,
        DOMAIN_SHUFFLE,
        0,
    ));
    let mut all: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(all.as_mut_slice(), &mut rng);
    let subset = &all[..count];
    let mut orders = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mix64(
            seed,
            DOMAIN_SHUFFLE,
            1 + e as u64,
        ));
        let mut order = subset.to_vec();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        orders.push(order);
    }
    Ok(orders)
}

/// One optimizer step's loss breakdown (term values are per-sample means).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub terms: Vec<(Term, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn first_total(&self) -> Option<f64> {
        self.records.first().map(|r| r.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.records.last().map(|r| r.total)
    }
}

/// Write a history as CSV: `step,total` plus one column per term.
pub fn write_history_csv(path: &std::path::Path, history: &TrainHistory) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let terms: Vec<Term> = history
        .records
        .first()
        .map(|r| r.terms.iter().map(|(t, _)| *t).collect())
        .unwrap_or_default();
    let mut header = String::from("step,total");
    for t in &terms {
        header.push(',');
        header.push_str(&t.to_string());
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for r in &history.records {
        let mut line = format!("{},{}", r.step, r.total);
        for t in &terms {
            let v = r
                .terms
                .iter()
                .find(|(k, _)| k == t)
                .map(|(_, v)| *v)
                .ok_or_else(|| {
                    Error::Experiment(format!("step {} is missing term {t}", r.step))
                })?;
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Objective used when fine-tuning an encoder on gold triples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneObjective {
    /// Hinge on probability scores of each (positive, negative) pair.
    #[default]
    PairwiseHinge,
    /// Cross-entropy on each document against its relevance label.
    PointwiseCrossEntropy,
}

struct Batcher<'a> {
    orders: &'a [Vec<usize>],
    batch_size: usize,
}

impl<'a> Batcher<'a> {
    fn batches(&self) -> impl Iterator<Item = &'a [usize]> + '_ {
        self.orders
            .iter()
            .flat_map(move |order| order.chunks(self.batch_size))
    }
}

fn grads_for(named_watched: &[(String, Tensor)]) -> Vec<Option<Tensor>> {
    named_watched.iter().map(|(_, t)| t.grad()).collect()
}

fn check_finite_loss(step: usize, total: f64) -> Result<()> {
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("loss at step {step}"),
            detail: format!("value {total}"),
        });
    }
    Ok(())
}

/// Fine-tune `params` in place on gold triples. Returns the per-step loss
/// history.
pub fn finetune(
    params: &mut EncoderParams,
    triples: &[Triple],
    objective: FinetuneObjective,
    train: &TrainParams,
) -> Result<TrainHistory> {
    train.validate()?;
    let opt = AdamParams::with_learning_rate(train.learning_rate);
    let mut state = OptimizerState::for_params(&params.named());
    let orders = epoch_orders(triples.len(), train.data_fraction, train.epochs, train.seed)?;
    let mut history = TrainHistory::default();
    let batcher = Batcher {
        orders: &orders,
        batch_size: train.batch_size,
    };
    for batch in batcher.batches() {
        let step = history.records.len();
        let tape = Tape::new();
        let watched = params.watched(&tape);
        let named_watched = watched.named();
        let mut parts: Vec<Tensor> = Vec::new();
        for &idx in batch {
            let t = &triples[idx];
            let pos = encode(&watched, &pack_input(&t.query, &t.pos, &params.config)?)?;
            let neg = encode(&watched, &pack_input(&t.query, &t.neg, &params.config)?)?;
            match objective {
                FinetuneObjective::PairwiseHinge => {
                    let s_pos = score_tensor(&pos, Scoring::Probability)?;
                    let s_neg = score_tensor(&neg, Scoring::Probability)?;
                    parts.push(l_pair(&s_pos, &s_neg)?);
                }
                FinetuneObjective::PointwiseCrossEntropy => {
                    parts.push(l_hard(&pos.logits, Relevance::Relevant)?);
                    parts.push(l_hard(&neg.logits, Relevance::NotRelevant)?);
                }
            }
        }
        let count = parts.len();
        let mut acc = parts.remove(0);
        for p in &parts {
            acc = acc.add(p)?;
        }
        let loss = acc.scale(1.0 / count as f64);
        let total = loss.item()?;
        check_finite_loss(step, total)?;
        loss.backward()?;
        let grads = grads_for(&named_watched);
        adam_step(&opt, &mut state, &mut params.named_mut(), &grads)?;
        let term = match objective {
            FinetuneObjective::PairwiseHinge => Term::Pair,
            FinetuneObjective::PointwiseCrossEntropy => Term::Hard,
        };
        history.records.push(StepRecord {
            step,
            total,
            terms: vec![(term, total)],
        });
    }
    Ok(history)
}

/// Drop trace fields the plan never reads, so cached teacher activations
/// cost only what the objective uses.
fn strip_trace(trace: ForwardTrace, plan: &ObjectivePlan) -> ForwardTrace {
    ForwardTrace {
        emb_out: if plan.emb {
            trace.emb_out
        } else {
            Tensor::scalar(0.0)
        },
        hidden: if plan.hidn { trace.hidden } else { Vec::new() },
        attn_scores: if plan.attn {
            trace.attn_scores
        } else {
            Vec::new()
        },
        logits: trace.logits,
    }
}

/// A distilled student with its projections and loss history.
pub struct DistillOutcome {
    pub student: EncoderParams,
    pub projections: Option<ProjectionParams>,
    pub history: TrainHistory,
}

fn check_compatible(
    teacher: &EncoderConfig,
    student: &EncoderConfig,
    plan: &ObjectivePlan,
) -> Result<()> {
    teacher.validate()?;
    student.validate()?;
    plan.validate()?;
    if teacher.vocab != student.vocab {
        return Err(Error::InvalidConfig(format!(
            "teacher vocab {} and student vocab {} must match",
            teacher.vocab, student.vocab
        )));
    }
    if teacher.max_query_len != student.max_query_len || teacher.max_doc_len != student.max_doc_len
    {
        return Err(Error::InvalidConfig(
            "teacher and student must pack inputs identically (equal max lengths)".into(),
        ));
    }
    if plan.attn && teacher.heads != student.heads {
        return Err(Error::InvalidConfig(format!(
            "attention transfer compares per-head scores; teacher has {} heads, student {}",
            teacher.heads, student.heads
        )));
    }
    plan.layer_map
        .validate_for(teacher.num_layers, student.num_layers)?;
    Ok(())
}

/// Distill `teacher` into a freshly initialized student.
pub fn distill(
    teacher: &EncoderParams,
    student_config: &EncoderConfig,
    plan: &ObjectivePlan,
    triples: &[Triple],
    train: &TrainParams,
) -> Result<DistillOutcome> {
    let student = init_params(student_config)?;
    distill_from(teacher, student, plan, triples, train)
}

/// Distill `teacher` into an existing student (warm starts,
/// self-distillation checks).
pub fn distill_from(
    teacher: &EncoderParams,
    mut student: EncoderParams,
    plan: &ObjectivePlan,
    triples: &[Triple],
    train: &TrainParams,
) -> Result<DistillOutcome> {
    train.validate()?;
    check_compatible(&teacher.config, &student.config, plan)?;

    let needs_projection = (plan.hidn || plan.emb) && teacher.config.hidden != student.config.hidden;
    let mut projections = needs_projection.then(|| {
        ProjectionParams::init(
            &plan.layer_map,
            student.config.hidden,
            teacher.config.hidden,
            mix64(train.seed, DOMAIN_PROJECTION, 0),
        )
    });

    let opt = AdamParams::with_learning_rate(train.learning_rate);
    let mut sizes: Vec<usize> = student.named().iter().map(|(_, t)| t.numel()).collect();
    if let Some(p) = &projections {
        sizes.extend(p.named().iter().map(|(_, t)| t.numel()));
    }
    let mut state = OptimizerState::new(&sizes);

    let orders = epoch_orders(triples.len(), train.data_fraction, train.epochs, train.seed)?;

    // The subset is fixed across epochs; encode the teacher once per sample.
    let mut cache: BTreeMap<usize, (ForwardTrace, ForwardTrace)> = BTreeMap::new();
    if let Some(first) = orders.first() {
        for &idx in first {
            let t = &triples[idx];
            let pos = encode(teacher, &pack_input(&t.query, &t.pos, &teacher.config)?)?;
            let neg = encode(teacher, &pack_input(&t.query, &t.neg, &teacher.config)?)?;
            cache.insert(idx, (strip_trace(pos, plan), strip_trace(neg, plan)));
        }
    }

    let mut history = TrainHistory::default();
    let batcher = Batcher {
        orders: &orders,
        batch_size: train.batch_size,
    };
    for batch in batcher.batches() {
        let step = history.records.len();
        let tape = Tape::new();
        let watched = student.watched(&tape);
        let named_watched_student = watched.named();
        let watched_proj = projections.as_ref().map(|p| p.watched(&tape));
        let mut total_acc: Option<Tensor> = None;
        let mut term_sums: Vec<(Term, f64)> = Vec::new();
        let mut samples = 0usize;
        for &idx in batch {
            let t = &triples[idx];
            let (t_pos, t_neg) = cache
                .get(&idx)
                .ok_or_else(|| Error::Experiment(format!("no cached teacher trace for sample {idx}")))?;
            let s_pos = encode(&watched, &pack_input(&t.query, &t.pos, &student.config)?)?;
            let s_neg = encode(&watched, &pack_input(&t.query, &t.neg, &student.config)?)?;
            let values = match plan.regime() {
                Regime::Pairwise => vec![compose(
                    plan,
                    &SampleTraces::Pairwise {
                        teacher_pos: t_pos,
                        teacher_neg: t_neg,
                        student_pos: &s_pos,
                        student_neg: &s_neg,
                    },
                    watched_proj.as_ref(),
                )?],
                Regime::Pointwise => vec![
                    compose(
                        plan,
                        &SampleTraces::Pointwise {
                            teacher: t_pos,
                            student: &s_pos,
                            label: Relevance::Relevant,
                        },
                        watched_proj.as_ref(),
                    )?,
                    compose(
                        plan,
                        &SampleTraces::Pointwise {
                            teacher: t_neg,
                            student: &s_neg,
                            label: Relevance::NotRelevant,
                        },
                        watched_proj.as_ref(),
                    )?,
                ],
            };
            for value in values {
                samples += 1;
                for (term, v) in value.terms {
                    match term_sums.iter_mut().find(|(k, _)| *k == term) {
                        Some((_, sum)) => *sum += v,
                        None => term_sums.push((term, v)),
                    }
                }
                total_acc = Some(match total_acc.take() {
                    Some(acc) => acc.add(&value.total)?,
                    None => value.total,
                });
            }
        }
        let loss = total_acc
            .ok_or_else(|| Error::Experiment("empty batch".into()))?
            .scale(1.0 / samples as f64);
        let total = loss.item()?;
        check_finite_loss(step, total)?;
        loss.backward()?;

        let mut grads = grads_for(&named_watched_student);
        if let Some(wp) = &watched_proj {
            grads.extend(grads_for(&wp.named()));
        }
        let mut named_mut = student.named_mut();
        if let Some(p) = &mut projections {
            named_mut.extend(p.named_mut());
        }
        adam_step(&opt, &mut state, &mut named_mut, &grads)?;

        for (_, v) in &mut term_sums {
            *v /= samples as f64;
        }
        history.records.push(StepRecord {
            step,
            total,
            terms: term_sums,
        });
    }

    Ok(DistillOutcome {
        student,
        projections,
        history,
    })
}

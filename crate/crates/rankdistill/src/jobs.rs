//! Single-run job descriptions consumed by the command-line front end.
//!
//! A job file is a JSON object whose fields are all optional; anything left
//! out falls back to the stock experiment defaults, so `{}` is a complete
//! job. Data comes from a triples file or a synthetic task spec, never both.

use std::path::Path;

use serde::Deserialize;

use crate::data::{gen_triples, load_triples, SyntheticTaskSpec, Triple};
use crate::encoder::EncoderConfig;
use crate::experiments::ExperimentConfig;
use crate::objectives::{make_layer_map, MappingStrategy, ObjectivePlan};
use crate::train::{FinetuneObjective, TrainParams};
use crate::{Error, Result};

/// Job file for `train-teacher`.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTeacherJob {
    pub encoder: Option<EncoderConfig>,
    pub train: Option<TrainParams>,
    pub objective: Option<FinetuneObjective>,
    pub task: Option<SyntheticTaskSpec>,
    pub n_triples: Option<usize>,
    pub triples: Option<std::path::PathBuf>,
}

/// Job file for `distill`. The objective comes from an explicit plan or a
/// preset name, never both.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillJob {
    pub student: Option<EncoderConfig>,
    pub train: Option<TrainParams>,
    pub preset: Option<String>,
    pub mapping: Option<MappingStrategy>,
    pub plan: Option<ObjectivePlan>,
    pub task: Option<SyntheticTaskSpec>,
    pub n_triples: Option<usize>,
    pub triples: Option<std::path::PathBuf>,
}

/// The fully-defaulted experiment config doubles as the source of default
/// encoder and training settings for single-run jobs.
pub fn experiment_defaults() -> ExperimentConfig {
    serde_json::from_str("{}").expect("empty config resolves to defaults")
}

/// Student shape used when a distill job names none: the stock small
/// encoder, matched to the teacher where compatibility demands it.
pub fn derived_student(teacher: &EncoderConfig) -> EncoderConfig {
    let mut student = experiment_defaults().student;
    student.vocab = teacher.vocab;
    student.max_query_len = teacher.max_query_len;
    student.max_doc_len = teacher.max_doc_len;
    student.heads = teacher.heads;
    student.scoring = teacher.scoring;
    student
}

/// Turn a job's data fields into training triples: load from a file, or
/// generate from a task spec (defaulted when absent), optionally truncated
/// to `n_triples`.
pub fn resolve_triples(
    task: Option<SyntheticTaskSpec>,
    n_triples: Option<usize>,
    triples_path: Option<&Path>,
    vocab: usize,
) -> Result<Vec<Triple>> {
    let mut triples = match (triples_path, task) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig(
                "job provides both a triples path and a task spec; choose one".into(),
            ))
        }
        (Some(path), None) => load_triples(path, vocab)?,
        (None, task) => {
            let spec = task.unwrap_or_default();
            if spec.vocab != vocab {
                return Err(Error::InvalidConfig(format!(
                    "task vocab {} does not match encoder vocab {vocab}",
                    spec.vocab
                )));
            }
            gen_triples(&spec, n_triples.unwrap_or(256))?
        }
    };
    if let Some(n) = n_triples {
        if triples.len() < n {
            return Err(Error::InvalidConfig(format!(
                "asked for {n} triples but the source holds {}",
                triples.len()
            )));
        }
        triples.truncate(n);
    }
    Ok(triples)
}

/// Resolve a distill job's objective: an explicit plan verbatim, or a preset
/// (default `L3`) with an optional mapping strategy override.
pub fn resolve_plan(
    plan: Option<ObjectivePlan>,
    preset: Option<String>,
    mapping: Option<MappingStrategy>,
    teacher_layers: usize,
    student_layers: usize,
) -> Result<ObjectivePlan> {
    match (plan, preset) {
        (Some(_), Some(_)) => Err(Error::InvalidConfig(
            "job provides both a plan and a preset; choose one".into(),
        )),
        (Some(plan), None) => {
            if mapping.is_some() {
                return Err(Error::InvalidConfig(
                    "mapping applies to presets; an explicit plan fixes its own layer map".into(),
                ));
            }
            Ok(plan)
        }
        (None, preset) => {
            let name = preset.unwrap_or_else(|| "L3".into());
            let mut plan = ObjectivePlan::preset(&name, teacher_layers, student_layers)?;
            if let Some(mapping) = mapping {
                plan.layer_map = make_layer_map(mapping, teacher_layers, student_layers)?;
            }
            Ok(plan)
        }
    }
}

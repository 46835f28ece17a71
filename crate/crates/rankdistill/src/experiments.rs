//! Experiment suites: expansion into concrete runs, execution, results CSV,
//! and cross-suite comparison.
//!
//! A suite turns one [`ExperimentConfig`] into a deterministic list of runs
//! (`runs.json`, written before any training starts), executes them, and
//! leaves a self-contained output directory:
//!
//! ```text
//! <root>/<suite>-<hash8>/
//!   triples.tsv, devset.tsv      the generated task data
//!   runs.json                    every resolved run, in execution order
//!   results.csv                  suite,method,seed,fraction,mrr_at_10,config_hash
//!   report.json                  results plus wall times and per-query ranks
//!   teacher-seed*.ckpt           the shared teacher, trained once per seed
//!   *.ckpt, history-*.csv, run-*.tsv   per-run artifacts
//! ```
//!
//! Each seed's teacher is fine-tuned once and reused by every distillation
//! in the suite. It appears as a result row only where the suite's method
//! roster includes it (`single`, `table2`); elsewhere it is preparation,
//! with its wall time reported under `teacher_wall_seconds`.
//!
//! The directory name depends only on the configuration (not on time), so
//! re-running a suite overwrites it with byte-identical `results.csv`. Wall
//! times live only in `report.json`.
//!
//! The output root resolves as: explicit override, then the config's
//! `output_dir`, then the `RANKDISTILL_OUT` environment variable, then
//! `./runs`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_encoder;
use crate::data::{
    fingerprint_devset, fingerprint_triples, gen_devset, gen_triples, mix64, save_devset,
    save_triples, DevSet, Triple, DOMAIN_INIT,
};
use crate::encoder::{init_params, EncoderConfig, EncoderParams, Scoring};
use crate::error::{Error, Result};
use crate::eval::{mrr_at_k, reciprocal_ranks, rerank, write_run_tsv, RankedQuery};
use crate::objectives::{make_layer_map, MappingStrategy, ObjectivePlan};
use crate::train::{
    distill, finetune, write_history_csv, FinetuneObjective, TrainParams,
};

pub const ENV_OUTPUT_ROOT: &str = "RANKDISTILL_OUT";

/// The experiment families.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// One teacher plus one distillation, chosen by `preset` / `mapping` /
    /// `data_fraction`.
    #[default]
    Single,
    /// Objective families head-to-head: fine-tuned student, L1, L2,
    /// margin-mse, L3.
    Table2,
    /// L2 term ablations: drop intermediate layers, the embedding, or the
    /// logits.
    Table3,
    /// Layer mappings under L2: uniform, last, last-one, plus L3 as the
    /// map-free reference.
    Table4,
    /// L2 vs L3 across training-data fractions.
    Fig1,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Single => "single",
            Suite::Table2 => "table2",
            Suite::Table3 => "table3",
            Suite::Table4 => "table4",
            Suite::Fig1 => "fig1",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Suite::Single),
            "table2" => Ok(Suite::Table2),
            "table3" => Ok(Suite::Table3),
            "table4" => Ok(Suite::Table4),
            "fig1" => Ok(Suite::Fig1),
            other => Err(Error::InvalidConfig(format!(
                "unknown suite {other:?} (expected single, table2, table3, table4, or fig1)"
            ))),
        }
    }
}

fn default_n_queries() -> usize {
    32
}
fn default_n_candidates() -> usize {
    50
}
fn default_n_relevant() -> usize {
    5
}

/// Shape of the generated evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevsetSpec {
    #[serde(default = "default_n_queries")]
    pub n_queries: usize,
    #[serde(default = "default_n_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_n_relevant")]
    pub n_relevant: usize,
}

impl Default for DevsetSpec {
    fn default() -> Self {
        DevsetSpec {
            n_queries: default_n_queries(),
            n_candidates: default_n_candidates(),
            n_relevant: default_n_relevant(),
        }
    }
}

fn default_teacher() -> EncoderConfig {
    EncoderConfig {
        num_layers: 4,
        hidden: 64,
        heads: 4,
        ffn_dim: 128,
        vocab: 200,
        max_query_len: 8,
        max_doc_len: 24,
        seed: 0,
        scoring: Scoring::Probability,
    }
}

fn default_student() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 32,
        heads: 4,
        ffn_dim: 64,
        vocab: 200,
        max_query_len: 8,
        max_doc_len: 24,
        seed: 0,
        scoring: Scoring::Probability,
    }
}

fn default_teacher_train() -> TrainParams {
    TrainParams {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 3,
        data_fraction: 1.0,
        seed: 0,
    }
}

fn default_student_train() -> TrainParams {
    TrainParams {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 3,
        data_fraction: 1.0,
        seed: 0,
    }
}

fn default_n_triples() -> usize {
    256
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_fractions() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}
fn default_preset() -> String {
    "L2".into()
}
fn default_mapping() -> MappingStrategy {
    MappingStrategy::Uniform
}
fn default_data_fraction() -> f64 {
    1.0
}

/// Everything a suite needs, with desk-scale defaults throughout: an empty
/// JSON object is a complete, runnable configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub suite: Suite,
    #[serde(default)]
    pub task: crate::data::SyntheticTaskSpec,
    #[serde(default = "default_n_triples")]
    pub n_triples: usize,
    #[serde(default)]
    pub devset: DevsetSpec,
    #[serde(default = "default_teacher")]
    pub teacher: EncoderConfig,
    #[serde(default = "default_student")]
    pub student: EncoderConfig,
    #[serde(default = "default_teacher_train")]
    pub teacher_train: TrainParams,
    /// Objective for teacher fine-tuning and the `finetune` baseline row.
    #[serde(default)]
    pub finetune_objective: FinetuneObjective,
    #[serde(default = "default_student_train")]
    pub student_train: TrainParams,
    /// Training seeds; each seed trains its own teacher and students.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Training-data fractions swept by the `fig1` suite.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Objective preset used by the `single` suite.
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Layer mapping used by the `single` suite.
    #[serde(default = "default_mapping")]
    pub mapping: MappingStrategy,
    /// Training-data fraction used by the `single` suite.
    #[serde(default = "default_data_fraction")]
    pub data_fraction: f64,
    /// Output root; overridden by an explicit path argument and falling
    /// back to `RANKDISTILL_OUT`, then `./runs`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is complete")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.teacher_train.validate()?;
        self.student_train.validate()?;
        if self.n_triples == 0 {
            return Err(Error::InvalidConfig("n_triples must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::InvalidConfig(format!("duplicate seed {s}")));
            }
        }
        for (name, enc) in [("teacher", &self.teacher), ("student", &self.student)] {
            if enc.vocab != self.task.vocab {
                return Err(Error::InvalidConfig(format!(
                    "{name} vocab {} must equal the task vocab {}",
                    enc.vocab, self.task.vocab
                )));
            }
            if enc.max_query_len < self.task.query_len || enc.max_doc_len < self.task.doc_len {
                return Err(Error::InvalidConfig(format!(
                    "{name} max lengths ({}, {}) would truncate task inputs ({}, {})",
                    enc.max_query_len, enc.max_doc_len, self.task.query_len, self.task.doc_len
                )));
            }
        }
        if self.teacher.max_query_len != self.student.max_query_len
            || self.teacher.max_doc_len != self.student.max_doc_len
        {
            return Err(Error::InvalidConfig(
                "teacher and student must pack inputs identically (equal max lengths)".into(),
            ));
        }
        if self.suite == Suite::Fig1 {
            if self.fractions.is_empty() {
                return Err(Error::InvalidConfig("fractions must not be empty".into()));
            }
            for &f in &self.fractions {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "fraction {f} must lie in (0, 1]"
                    )));
                }
            }
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "data_fraction {} must lie in (0, 1]",
                self.data_fraction
            )));
        }
        Ok(())
    }

    /// FNV hash of the canonical config JSON, ignoring the output location.
    pub fn config_hash(&self) -> u64 {
        let mut hashed = self.clone();
        hashed.output_dir = None;
        let json = serde_json::to_string(&hashed).expect("config serializes");
        crate::data::fnv1a64(json.as_bytes())
    }
}

/// What one run trains or evaluates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunKind {
    /// Evaluate the seed's fine-tuned teacher (trained as suite
    /// preparation).
    Teacher,
    /// Fine-tune a student directly on gold triples (no teacher signal).
    StudentFinetune,
    /// Distill the seed's teacher into a fresh student under `plan`.
    Distill { plan: ObjectivePlan },
}

/// One fully resolved run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub suite: String,
    pub method: String,
    pub seed: u64,
    /// Training-data fraction for the student stage.
    pub fraction: f64,
    #[serde(flatten)]
    pub kind: RunKind,
}

pub const TABLE2_METHODS: [&str; 6] = [
    "teacher",
    "student-finetune",
    "L1",
    "L2",
    "margin-mse",
    "L3",
];
pub const TABLE3_METHODS: [&str; 5] = [
    "L2",
    "table3-no-intermediate",
    "table3-no-embedding",
    "table3-no-logits",
    "L3",
];
pub const TABLE4_METHODS: [&str; 4] = ["L2-uniform", "L2-last", "L2-last_one", "L3"];
pub const FIG1_METHODS: [&str; 2] = ["L2", "L3"];

fn distill_kind(
    preset: &str,
    mapping: MappingStrategy,
    teacher_layers: usize,
    student_layers: usize,
) -> Result<RunKind> {
    let mut plan = ObjectivePlan::preset(preset, teacher_layers, student_layers)?;
    plan.layer_map = make_layer_map(mapping, teacher_layers, student_layers)?;
    Ok(RunKind::Distill { plan })
}

fn method_kind(method: &str, config: &ExperimentConfig) -> Result<RunKind> {
    let (lt, ls) = (config.teacher.num_layers, config.student.num_layers);
    match method {
        "teacher" => Ok(RunKind::Teacher),
        "student-finetune" => Ok(RunKind::StudentFinetune),
        "L2-uniform" => distill_kind("L2", MappingStrategy::Uniform, lt, ls),
        "L2-last" => distill_kind("L2", MappingStrategy::Last, lt, ls),
        "L2-last_one" => distill_kind("L2", MappingStrategy::LastOne, lt, ls),
        preset => distill_kind(preset, MappingStrategy::Uniform, lt, ls),
    }
}

/// Expand a configuration into its run list: seeds outermost, then the
/// suite's method roster (the `fig1` sweep orders fractions ascending within
/// each method). The teacher appears as a run only where the roster lists
/// it; it is trained as preparation for every suite regardless.
pub fn expand_runs(config: &ExperimentConfig) -> Result<Vec<RunSpec>> {
    config.validate()?;
    let suite = config.suite.name().to_string();
    let mut fractions = config.fractions.clone();
    fractions.sort_by(|a, b| a.partial_cmp(b).expect("validated finite"));
    fractions.dedup();
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let mut push = |method: &str, fraction: f64, kind_override: Option<RunKind>| -> Result<()> {
            let kind = match kind_override {
                Some(k) => k,
                None => method_kind(method, config)?,
            };
            if let RunKind::Distill { plan } = &kind {
                if plan.attn && config.teacher.heads != config.student.heads {
                    return Err(Error::InvalidConfig(format!(
                        "method {method} transfers attention but head counts differ ({} vs {})",
                        config.teacher.heads, config.student.heads
                    )));
                }
            }
            runs.push(RunSpec {
                suite: suite.clone(),
                method: method.to_string(),
                seed,
                fraction,
                kind,
            });
            Ok(())
        };
        match config.suite {
            Suite::Single => {
                push("teacher", 1.0, None)?;
                let kind = distill_kind(
                    &config.preset,
                    config.mapping,
                    config.teacher.num_layers,
                    config.student.num_layers,
                )?;
                push(&config.preset.clone(), config.data_fraction, Some(kind))?;
            }
            Suite::Table2 => {
                for m in TABLE2_METHODS {
                    push(m, 1.0, None)?;
                }
            }
            Suite::Table3 => {
                for m in TABLE3_METHODS {
                    push(m, 1.0, None)?;
                }
            }
            Suite::Table4 => {
                for m in TABLE4_METHODS {
                    push(m, 1.0, None)?;
                }
            }
            Suite::Fig1 => {
                for m in FIG1_METHODS {
                    for &f in &fractions {
                        push(m, f, None)?;
                    }
                }
            }
        }
    }
    Ok(runs)
}

/// One executed run's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    pub fraction: f64,
    pub mrr_at_10: f64,
    pub wall_seconds: f64,
    pub per_query_rr: Vec<(String, f64)>,
}

/// Everything a suite run produced, as stored in `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub config_hash: String,
    pub triples_fingerprint: String,
    pub devset_fingerprint: String,
    /// Seconds spent fine-tuning each seed's shared teacher.
    pub teacher_wall_seconds: BTreeMap<u64, f64>,
    pub results: Vec<RunResult>,
}

/// Resolve where suite directories land.
pub fn resolve_output_root(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &config.output_dir {
        return p.clone();
    }
    if let Ok(p) = std::env::var(ENV_OUTPUT_ROOT) {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    PathBuf::from("runs")
}

fn float_csv(v: f64) -> String {
    // Shortest round-trip formatting keeps the CSV byte-stable.
    format!("{v}")
}

/// Write `results.csv`: one row per run, expansion order.
pub fn write_results_csv(
    path: &Path,
    suite: &str,
    config_hash: &str,
    results: &[RunResult],
) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "suite,method,seed,fraction,mrr_at_10,config_hash").map_err(|e| Error::io(path, e))?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            suite,
            r.method,
            r.seed,
            float_csv(r.fraction),
            float_csv(r.mrr_at_10),
            config_hash
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn derived_encoder(config: &EncoderConfig, run_seed: u64, stream: u64) -> EncoderConfig {
    EncoderConfig {
        seed: mix64(run_seed, DOMAIN_INIT, stream),
        ..config.clone()
    }
}

fn derived_train(train: &TrainParams, run_seed: u64, stream: u64, fraction: f64) -> TrainParams {
    TrainParams {
        seed: mix64(run_seed, DOMAIN_INIT, stream),
        data_fraction: fraction,
        ..*train
    }
}

struct RunContext<'a> {
    config: &'a ExperimentConfig,
    triples: &'a [Triple],
    devset: &'a DevSet,
    dir: &'a Path,
}

fn evaluate(params: &EncoderParams, devset: &DevSet) -> Result<(f64, Vec<(String, f64)>, Vec<RankedQuery>)> {
    let ranked = rerank(params, devset)?;
    let mrr = mrr_at_k(&ranked, 10)?;
    let rr = reciprocal_ranks(&ranked, 10)?;
    Ok((mrr, rr, ranked))
}

fn artifact_stem(run: &RunSpec) -> String {
    format!("{}-seed{}-f{}", run.method, run.seed, run.fraction)
}

/// Fine-tune (or fetch) the shared teacher for one seed, checkpointing it
/// and its history, and recording the training wall time.
fn ensure_teacher<'a>(
    ctx: &RunContext<'_>,
    seed: u64,
    teachers: &'a mut BTreeMap<u64, EncoderParams>,
    teacher_wall: &mut BTreeMap<u64, f64>,
) -> Result<&'a EncoderParams> {
    if !teachers.contains_key(&seed) {
        let started = Instant::now();
        let mut params = init_params(&derived_encoder(&ctx.config.teacher, seed, 1))?;
        let train = derived_train(&ctx.config.teacher_train, seed, 3, 1.0);
        let history = finetune(
            &mut params,
            ctx.triples,
            ctx.config.finetune_objective,
            &train,
        )?;
        save_encoder(&ctx.dir.join(format!("teacher-seed{seed}.ckpt")), &params)?;
        write_history_csv(
            &ctx.dir.join(format!("history-teacher-seed{seed}.csv")),
            &history,
        )?;
        teacher_wall.insert(seed, started.elapsed().as_secs_f64());
        teachers.insert(seed, params);
    }
    Ok(&teachers[&seed])
}

fn execute_run(
    ctx: &RunContext<'_>,
    run: &RunSpec,
    teachers: &mut BTreeMap<u64, EncoderParams>,
    teacher_wall: &mut BTreeMap<u64, f64>,
) -> Result<RunResult> {
    let started = Instant::now();
    let stem = artifact_stem(run);
    let params = match &run.kind {
        RunKind::Teacher => ensure_teacher(ctx, run.seed, teachers, teacher_wall)?.clone(),
        RunKind::StudentFinetune => {
            let mut params = init_params(&derived_encoder(&ctx.config.student, run.seed, 2))?;
            let train = derived_train(&ctx.config.student_train, run.seed, 4, run.fraction);
            let history = finetune(
                &mut params,
                ctx.triples,
                ctx.config.finetune_objective,
                &train,
            )?;
            save_encoder(&ctx.dir.join(format!("{stem}.ckpt")), &params)?;
            write_history_csv(&ctx.dir.join(format!("history-{stem}.csv")), &history)?;
            params
        }
        RunKind::Distill { plan } => {
            let teacher = ensure_teacher(ctx, run.seed, teachers, teacher_wall)?;
            let student_config = derived_encoder(&ctx.config.student, run.seed, 2);
            let train = derived_train(&ctx.config.student_train, run.seed, 4, run.fraction);
            let out = distill(teacher, &student_config, plan, ctx.triples, &train)?;
            save_encoder(&ctx.dir.join(format!("{stem}.ckpt")), &out.student)?;
            write_history_csv(&ctx.dir.join(format!("history-{stem}.csv")), &out.history)?;
            out.student
        }
    };

    let (mrr, rr, ranked) = evaluate(&params, ctx.devset)?;
    write_run_tsv(&ctx.dir.join(format!("run-{stem}.tsv")), &ranked)?;

    Ok(RunResult {
        method: run.method.clone(),
        seed: run.seed,
        fraction: run.fraction,
        mrr_at_10: mrr,
        wall_seconds: started.elapsed().as_secs_f64(),
        per_query_rr: rr,
    })
}

/// Execute a whole suite. Returns the output directory and the report.
pub fn run_suite(config: &ExperimentConfig, out_override: Option<&Path>) -> Result<(PathBuf, SuiteReport)> {
    let runs = expand_runs(config)?;
    let hash = config.config_hash();
    let root = resolve_output_root(out_override, config);
    let dir = root.join(format!("{}-{:08x}", config.suite.name(), hash as u32));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let triples = gen_triples(&config.task, config.n_triples)?;
    let devset = gen_devset(
        &config.task,
        config.devset.n_queries,
        config.devset.n_candidates,
        config.devset.n_relevant,
    )?;
    save_triples(&dir.join("triples.tsv"), &triples)?;
    save_devset(&dir.join("devset.tsv"), &devset)?;

    let runs_path = dir.join("runs.json");
    let runs_json = serde_json::to_string_pretty(&runs)?;
    std::fs::write(&runs_path, runs_json).map_err(|e| Error::io(&runs_path, e))?;

    let ctx = RunContext {
        config,
        triples: &triples,
        devset: &devset,
        dir: &dir,
    };
    let mut teachers = BTreeMap::new();
    let mut teacher_wall = BTreeMap::new();
    let mut results = Vec::with_capacity(runs.len());
    for run in &runs {
        results.push(execute_run(&ctx, run, &mut teachers, &mut teacher_wall)?);
    }

    let report = SuiteReport {
        suite: config.suite.name().to_string(),
        config_hash: format!("{hash:016x}"),
        triples_fingerprint: format!("{:016x}", fingerprint_triples(&triples)),
        devset_fingerprint: format!("{:016x}", fingerprint_devset(&devset)),
        teacher_wall_seconds: teacher_wall,
        results,
    };
    write_results_csv(
        &dir.join("results.csv"),
        &report.suite,
        &report.config_hash,
        &report.results,
    )?;
    let report_path = dir.join("report.json");
    let report_json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&report_path, report_json).map_err(|e| Error::io(&report_path, e))?;
    Ok((dir, report))
}

pub fn load_report(path: &Path) -> Result<SuiteReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean metric difference per (method, fraction) between two reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodDelta {
    pub method: String,
    pub fraction: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_b - mean_a`; equals the mean of `per_query_deltas`.
    pub delta: f64,
    /// Seeds where the second report scored strictly higher / lower / equal.
    pub wins_b: usize,
    pub wins_a: usize,
    pub ties: usize,
    pub seeds: usize,
    /// Mean reciprocal-rank delta per query id, averaged over aligned seeds.
    pub per_query_deltas: Vec<(String, f64)>,
}

/// Compare two suite reports run-by-run, aligned on (method, fraction,
/// seed). Refuses to compare results from different evaluation sets.
pub fn compare_reports(a: &SuiteReport, b: &SuiteReport) -> Result<Vec<MethodDelta>> {
    if a.devset_fingerprint != b.devset_fingerprint {
        return Err(Error::Experiment(format!(
            "evaluation sets differ ({} vs {}); metrics are not comparable",
            a.devset_fingerprint, b.devset_fingerprint
        )));
    }
    let key = |r: &RunResult| (r.method.clone(), r.fraction.to_bits(), r.seed);
    let index: BTreeMap<_, &RunResult> = b.results.iter().map(|r| (key(r), r)).collect();
    let mut grouped: BTreeMap<(String, u64), Vec<(&RunResult, &RunResult)>> = BTreeMap::new();
    for r in &a.results {
        if let Some(&rb) = index.get(&key(r)) {
            grouped
                .entry((r.method.clone(), r.fraction.to_bits()))
                .or_default()
                .push((r, rb));
        }
    }
    if grouped.is_empty() {
        return Err(Error::Experiment(
            "no (method, fraction, seed) rows in common".into(),
        ));
    }
    let mut out = Vec::new();
    for ((method, fraction_bits), pairs) in grouped {
        let n = pairs.len() as f64;
        let mean_a = pairs.iter().map(|(ra, _)| ra.mrr_at_10).sum::<f64>() / n;
        let mean_b = pairs.iter().map(|(_, rb)| rb.mrr_at_10).sum::<f64>() / n;
        let mut wins_a = 0;
        let mut wins_b = 0;
        let mut ties = 0;
        let mut per_query: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (ra, rb) in &pairs {
            match rb
                .mrr_at_10
                .partial_cmp(&ra.mrr_at_10)
                .ok_or_else(|| Error::Experiment("non-finite metric in report".into()))?
            {
                std::cmp::Ordering::Greater => wins_b += 1,
                std::cmp::Ordering::Less => wins_a += 1,
                std::cmp::Ordering::Equal => ties += 1,
            }
            let rr_b: BTreeMap<&String, f64> =
                rb.per_query_rr.iter().map(|(q, v)| (q, *v)).collect();
            for (qid, va) in &ra.per_query_rr {
                if let Some(&vb) = rr_b.get(qid) {
                    let slot = per_query.entry(qid.clone()).or_insert((0.0, 0));
                    slot.0 += vb - va;
                    slot.1 += 1;
                }
            }
        }
        let per_query_deltas: Vec<(String, f64)> = per_query
            .into_iter()
            .map(|(qid, (sum, count))| (qid, sum / count as f64))
            .collect();
        out.push(MethodDelta {
            method,
            fraction: f64::from_bits(fraction_bits),
            mean_a,
            mean_b,
            delta: mean_b - mean_a,
            wins_a,
            wins_b,
            ties,
            seeds: pairs.len(),
            per_query_deltas,
        });
    }
    Ok(out)
}

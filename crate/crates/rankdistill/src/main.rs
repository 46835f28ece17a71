//! Command-line front end: generate data, train and distill encoders,
//! evaluate checkpoints, run experiment suites, compare reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use rankdistill::checkpoint::{load_encoder, save_encoder};
use rankdistill::data::{
    fingerprint_devset, fingerprint_triples, gen_devset, gen_triples, load_devset,
    save_devset, save_triples, SyntheticTaskSpec,
};
use rankdistill::eval::{mean_spearman_vs_oracle, mrr_at_k, rerank};
use rankdistill::experiments::{
    compare_reports, load_report, run_suite, ExperimentConfig, Suite, SuiteReport,
};
use rankdistill::jobs::{
    derived_student, experiment_defaults, resolve_plan, resolve_triples, DistillJob,
    TrainTeacherJob,
};
use rankdistill::objectives::MappingStrategy;
use rankdistill::train::{distill, finetune, write_history_csv};
use rankdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "rankdistill", version, about = "Cross-encoder ranking distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic training triples and an evaluation set.
    GenData(GenDataArgs),
    /// Fine-tune a teacher encoder and save its checkpoint.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a teacher checkpoint into a smaller student.
    Distill(DistillArgs),
    /// Score a checkpoint against an evaluation set.
    Eval(EvalArgs),
    /// Expand and run an experiment suite from a JSON config.
    Suite(SuiteArgs),
    /// Compare two suite reports aligned on (method, fraction, seed).
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON task spec; built-in defaults apply when omitted.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    n_triples: usize,
    #[arg(long, default_value_t = 32)]
    queries: usize,
    /// Candidates per evaluation query.
    #[arg(long, default_value_t = 50)]
    candidates: usize,
    /// Relevant documents per evaluation query.
    #[arg(long, default_value_t = 5)]
    relevant: usize,
    /// Overrides the task seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "triples.tsv")]
    triples: PathBuf,
    #[arg(long, default_value = "devset.tsv")]
    devset: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    /// JSON job file; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "teacher.ckpt")]
    out: PathBuf,
    /// Write per-step losses to this CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher checkpoint to distill from.
    #[arg(long)]
    teacher: PathBuf,
    /// JSON job file; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "student.ckpt")]
    out: PathBuf,
    /// Write per-step losses to this CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Encoder checkpoint to score with.
    #[arg(long)]
    model: PathBuf,
    /// Evaluation set TSV.
    #[arg(long)]
    devset: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Write per-query rankings to this TSV.
    #[arg(long)]
    ranking: Option<PathBuf>,
}

#[derive(Args)]
struct SuiteArgs {
    /// JSON experiment config; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured suite.
    #[arg(long)]
    suite: Option<Suite>,
    /// Overrides the configured seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Overrides the configured objective preset.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the configured layer-mapping strategy.
    #[arg(long)]
    mapping: Option<MappingStrategy>,
    /// Overrides the configured training-data fraction (single suite).
    #[arg(long)]
    data_fraction: Option<f64>,
    /// Overrides the configured fraction sweep (fig1 suite).
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    n_triples: Option<usize>,
    /// Output root; falls back to config, then RANKDISTILL_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// First report.json (or its run directory).
    report_a: PathBuf,
    /// Second report.json (or its run directory).
    report_b: PathBuf,
    /// Print the full comparison as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut cause = std::error::Error::source(&err);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data_cmd(args),
        Command::TrainTeacher(args) => train_teacher_cmd(args),
        Command::Distill(args) => distill_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Suite(args) => suite_cmd(args),
        Command::Compare(args) => compare_cmd(args),
    }
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(Error::from)
}

fn gen_data_cmd(args: GenDataArgs) -> Result<()> {
    let mut task: SyntheticTaskSpec = match &args.task {
        Some(path) => load_json(path)?,
        None => SyntheticTaskSpec::default(),
    };
    if let Some(seed) = args.seed {
        task.seed = seed;
    }
    let triples = gen_triples(&task, args.n_triples)?;
    save_triples(&args.triples, &triples)?;
    println!(
        "wrote {} ({} triples, fingerprint {:016x})",
        args.triples.display(),
        triples.len(),
        fingerprint_triples(&triples)
    );
    let devset = gen_devset(&task, args.queries, args.candidates, args.relevant)?;
    save_devset(&args.devset, &devset)?;
    println!(
        "wrote {} ({} queries x {} candidates, fingerprint {:016x})",
        args.devset.display(),
        args.queries,
        args.candidates,
        fingerprint_devset(&devset)
    );
    Ok(())
}

fn train_teacher_cmd(args: TrainTeacherArgs) -> Result<()> {
    let job: TrainTeacherJob = match &args.config {
        Some(path) => load_json(path)?,
        None => TrainTeacherJob::default(),
    };
    let defaults = experiment_defaults();
    let encoder = job.encoder.unwrap_or(defaults.teacher);
    let train = job.train.unwrap_or(defaults.teacher_train);
    let objective = job.objective.unwrap_or_default();
    let triples = resolve_triples(job.task, job.n_triples, job.triples.as_deref(), encoder.vocab)?;

    let mut params = rankdistill::encoder::init_params(&encoder)?;
    let history = finetune(&mut params, &triples, objective, &train)?;
    save_encoder(&args.out, &params)?;
    if let Some(path) = &args.history {
        write_history_csv(path, &history)?;
    }
    println!(
        "trained teacher: {} layers, hidden {}, {} parameters",
        encoder.num_layers,
        encoder.hidden,
        params.num_parameters()
    );
    if let (Some(first), Some(last)) = (history.first_total(), history.last_total()) {
        println!(
            "loss {first:.4} -> {last:.4} over {} steps",
            history.records.len()
        );
    }
    println!("saved {}", args.out.display());
    Ok(())
}

fn distill_cmd(args: DistillArgs) -> Result<()> {
    let job: DistillJob = match &args.config {
        Some(path) => load_json(path)?,
        None => DistillJob::default(),
    };
    let teacher = load_encoder(&args.teacher)?;
    let student_config = job
        .student
        .unwrap_or_else(|| derived_student(&teacher.config));
    let train = job.train.unwrap_or(experiment_defaults().student_train);

    let plan = resolve_plan(
        job.plan,
        job.preset,
        job.mapping,
        teacher.config.num_layers,
        student_config.num_layers,
    )?;

    let triples = resolve_triples(
        job.task,
        job.n_triples,
        job.triples.as_deref(),
        teacher.config.vocab,
    )?;
    let outcome = distill(&teacher, &student_config, &plan, &triples, &train)?;
    save_encoder(&args.out, &outcome.student)?;
    if let Some(path) = &args.history {
        write_history_csv(path, &outcome.history)?;
    }
    println!(
        "distilled student: {} layers, hidden {}, {} parameters",
        student_config.num_layers,
        student_config.hidden,
        outcome.student.num_parameters()
    );
    if let (Some(first), Some(last)) = (outcome.history.first_total(), outcome.history.last_total())
    {
        println!(
            "loss {first:.4} -> {last:.4} over {} steps",
            outcome.history.records.len()
        );
    }
    println!("saved {}", args.out.display());
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let params = load_encoder(&args.model)?;
    let devset = load_devset(&args.devset, params.config.vocab)?;
    let ranked = rerank(&params, &devset)?;
    let mrr = mrr_at_k(&ranked, args.k)?;
    let rho = mean_spearman_vs_oracle(&devset, &ranked)?;
    if let Some(path) = &args.ranking {
        rankdistill::eval::write_run_tsv(path, &ranked)?;
    }
    println!("queries              {}", ranked.len());
    println!("mrr@{:<17} {mrr:.4}", args.k);
    println!("spearman_vs_oracle   {rho:.4}");
    Ok(())
}

fn suite_cmd(args: SuiteArgs) -> Result<()> {
    let mut config: ExperimentConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => experiment_defaults(),
    };
    if let Some(suite) = args.suite {
        config.suite = suite;
    }
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(preset) = args.preset {
        config.preset = preset;
    }
    if let Some(mapping) = args.mapping {
        config.mapping = mapping;
    }
    if let Some(fraction) = args.data_fraction {
        config.data_fraction = fraction;
    }
    if let Some(fractions) = args.fractions {
        config.fractions = fractions;
    }
    if let Some(n) = args.n_triples {
        config.n_triples = n;
    }

    let (dir, report) = run_suite(&config, args.out.as_deref())?;
    println!(
        "suite {} finished: {} runs in {}",
        report.suite,
        report.results.len(),
        dir.display()
    );
    print_suite_summary(&report);
    Ok(())
}

fn print_suite_summary(report: &SuiteReport) {
    let mut groups: Vec<((String, f64), Vec<f64>)> = Vec::new();
    for r in &report.results {
        let key = (r.method.clone(), r.fraction);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, values)) => values.push(r.mrr_at_10),
            None => groups.push((key, vec![r.mrr_at_10])),
        }
    }
    println!("{:<24} {:>8} {:>6} {:>10}", "method", "fraction", "seeds", "mrr@10");
    for ((method, fraction), values) in groups {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        println!(
            "{method:<24} {fraction:>8} {:>6} {mean:>10.4}",
            values.len()
        );
    }
}

fn report_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join("report.json")
    } else {
        arg.to_path_buf()
    }
}

fn compare_cmd(args: CompareArgs) -> Result<()> {
    let a = load_report(&report_path(&args.report_a))?;
    let b = load_report(&report_path(&args.report_b))?;
    let deltas = compare_reports(&a, &b)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&deltas)?);
        return Ok(());
    }
    println!(
        "{:<24} {:>8} {:>8} {:>8} {:>9} {:>9}",
        "method", "fraction", "mean_a", "mean_b", "delta", "wins a:b:t"
    );
    for d in &deltas {
        println!(
            "{:<24} {:>8} {:>8.4} {:>8.4} {:>+9.4} {:>5}:{}:{}",
            d.method, d.fraction, d.mean_a, d.mean_b, d.delta, d.wins_a, d.wins_b, d.ties
        );
        let mut movers: Vec<&(String, f64)> = d.per_query_deltas.iter().collect();
        movers.sort_by(|x, y| y.1.abs().total_cmp(&x.1.abs()));
        let shown: Vec<String> = movers
            .iter()
            .take(3)
            .filter(|(_, v)| *v != 0.0)
            .map(|(q, v)| format!("{q} {v:+.4}"))
            .collect();
        if !shown.is_empty() {
            println!("  largest per-query moves: {}", shown.join(", "));
        }
    }
    Ok(())
}

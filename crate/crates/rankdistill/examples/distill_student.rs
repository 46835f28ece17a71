//! Distill a trained teacher into a student half its depth and width, and
//! compare against training the same student directly on the labels.

use rankdistill::data::{gen_devset, gen_triples, SyntheticTaskSpec};
use rankdistill::encoder::{init_params, EncoderConfig, Scoring};
use rankdistill::eval::{mrr_at_k, rerank};
use rankdistill::objectives::ObjectivePlan;
use rankdistill::train::{distill, finetune, FinetuneObjective, TrainParams};
use rankdistill::Result;

fn main() -> Result<()> {
    let task = SyntheticTaskSpec::default();
    let triples = gen_triples(&task, 192)?;
    let devset = gen_devset(&task, 16, 8, 2)?;

    let teacher_config = EncoderConfig {
        num_layers: 4,
        hidden: 64,
        heads: 4,
        ffn_dim: 128,
        vocab: task.vocab,
        max_query_len: task.query_len,
        max_doc_len: task.doc_len,
        seed: 3,
        scoring: Scoring::Probability,
    };
    let student_config = EncoderConfig {
        num_layers: 2,
        hidden: 32,
        ffn_dim: 64,
        seed: 4,
        ..teacher_config
    };
    let train = TrainParams {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 2,
        data_fraction: 1.0,
        seed: 3,
    };

    let mut teacher = init_params(&teacher_config)?;
    finetune(
        &mut teacher,
        &triples,
        FinetuneObjective::PairwiseHinge,
        &train,
    )?;
    let teacher_mrr = mrr_at_k(&rerank(&teacher, &devset)?, 10)?;
    println!("teacher (4x64)            mrr@10 = {teacher_mrr:.4}");

    // The same student trained directly on the gold labels, no teacher.
    let mut finetuned = init_params(&student_config)?;
    finetune(
        &mut finetuned,
        &triples,
        FinetuneObjective::PairwiseHinge,
        &train,
    )?;
    let finetuned_mrr = mrr_at_k(&rerank(&finetuned, &devset)?, 10)?;
    println!("student fine-tune (2x32)  mrr@10 = {finetuned_mrr:.4}");

    // Pairwise distillation from the teacher's scores alone.
    let plan = ObjectivePlan::preset(
        "L3",
        teacher_config.num_layers,
        student_config.num_layers,
    )?;
    let outcome = distill(&teacher, &student_config, &plan, &triples, &train)?;
    let distilled_mrr = mrr_at_k(&rerank(&outcome.student, &devset)?, 10)?;
    println!("student distilled (2x32)  mrr@10 = {distilled_mrr:.4}");
    println!(
        "distillation gain over fine-tuning: {:+.4}",
        distilled_mrr - finetuned_mrr
    );
    Ok(())
}

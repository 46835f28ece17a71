//! Distill the same student on growing slices of the training data and
//! print the resulting quality curve.

use rankdistill::data::{gen_devset, gen_triples, SyntheticTaskSpec};
use rankdistill::encoder::{init_params, EncoderConfig, Scoring};
use rankdistill::eval::{mrr_at_k, rerank, spearman};
use rankdistill::objectives::ObjectivePlan;
use rankdistill::train::{distill, finetune, FinetuneObjective, TrainParams};
use rankdistill::Result;

fn main() -> Result<()> {
    let task = SyntheticTaskSpec::default();
    let triples = gen_triples(&task, 160)?;
    let devset = gen_devset(&task, 16, 8, 2)?;
    let teacher_config = EncoderConfig {
        num_layers: 4,
        hidden: 64,
        heads: 4,
        ffn_dim: 128,
        vocab: task.vocab,
        max_query_len: task.query_len,
        max_doc_len: task.doc_len,
        seed: 2,
        scoring: Scoring::Probability,
    };
    let student_config = EncoderConfig {
        num_layers: 2,
        hidden: 32,
        ffn_dim: 64,
        seed: 3,
        ..teacher_config
    };
    let mut train = TrainParams {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 2,
        data_fraction: 1.0,
        seed: 2,
    };

    let mut teacher = init_params(&teacher_config)?;
    finetune(
        &mut teacher,
        &triples,
        FinetuneObjective::PairwiseHinge,
        &train,
    )?;
    let plan = ObjectivePlan::preset(
        "L3",
        teacher_config.num_layers,
        student_config.num_layers,
    )?;

    let fractions = [0.25, 0.5, 0.75, 1.0];
    let mut curve = Vec::new();
    for fraction in fractions {
        train.data_fraction = fraction;
        let outcome = distill(&teacher, &student_config, &plan, &triples, &train)?;
        let mrr = mrr_at_k(&rerank(&outcome.student, &devset)?, 10)?;
        println!(
            "fraction {fraction:.2} ({:3} triples): mrr@10 = {mrr:.4}",
            (fraction * triples.len() as f64).floor() as usize
        );
        curve.push(mrr);
    }
    let rho = spearman(&fractions, &curve)?;
    println!("rank correlation between fraction and mrr@10: {rho:.3}");
    Ok(())
}

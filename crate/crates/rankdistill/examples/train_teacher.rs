//! Fine-tune a teacher encoder on synthetic triples and watch MRR@10 move.

use rankdistill::data::{gen_devset, gen_triples, SyntheticTaskSpec};
use rankdistill::encoder::{init_params, EncoderConfig, Scoring};
use rankdistill::eval::{mrr_at_k, rerank};
use rankdistill::train::{finetune, FinetuneObjective, TrainParams};
use rankdistill::Result;

fn main() -> Result<()> {
    let task = SyntheticTaskSpec::default();
    let triples = gen_triples(&task, 128)?;
    let devset = gen_devset(&task, 16, 8, 2)?;

    let config = EncoderConfig {
        num_layers: 2,
        hidden: 32,
        heads: 4,
        ffn_dim: 64,
        vocab: task.vocab,
        max_query_len: task.query_len,
        max_doc_len: task.doc_len,
        seed: 5,
        scoring: Scoring::Probability,
    };
    let mut params = init_params(&config)?;

    let before = mrr_at_k(&rerank(&params, &devset)?, 10)?;
    println!("untrained mrr@10 = {before:.4}");

    let train = TrainParams {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 2,
        data_fraction: 1.0,
        seed: 5,
    };
    let history = finetune(
        &mut params,
        &triples,
        FinetuneObjective::PairwiseHinge,
        &train,
    )?;
    println!(
        "hinge loss {:.4} -> {:.4} over {} steps",
        history.first_total().unwrap(),
        history.last_total().unwrap(),
        history.records.len()
    );

    let after = mrr_at_k(&rerank(&params, &devset)?, 10)?;
    println!("trained mrr@10 = {after:.4}");
    Ok(())
}

//! Show which teacher layers each mapping strategy picks, at the reference
//! scale (12 -> 4) and at desk scale (4 -> 2), then distill under each.

use rankdistill::data::{gen_devset, gen_triples, SyntheticTaskSpec};
use rankdistill::encoder::{init_params, EncoderConfig, Scoring};
use rankdistill::eval::{mrr_at_k, rerank};
use rankdistill::objectives::{make_layer_map, MappingStrategy, ObjectivePlan};
use rankdistill::train::{distill, finetune, FinetuneObjective, TrainParams};
use rankdistill::Result;

const STRATEGIES: [MappingStrategy; 3] = [
    MappingStrategy::Uniform,
    MappingStrategy::Last,
    MappingStrategy::LastOne,
];

fn main() -> Result<()> {
    for (teacher_layers, student_layers) in [(12, 4), (4, 2)] {
        println!("teacher {teacher_layers} layers -> student {student_layers} layers:");
        for strategy in STRATEGIES {
            let map = make_layer_map(strategy, teacher_layers, student_layers)?;
            let picks: Vec<String> = map
                .pairs()
                .iter()
                .map(|(s, t)| format!("{s}->{t}"))
                .collect();
            println!("  {strategy:?}: {}", picks.join(" "));
        }
    }

    let task = SyntheticTaskSpec::default();
    let triples = gen_triples(&task, 96)?;
    let devset = gen_devset(&task, 12, 8, 2)?;
    let teacher_config = EncoderConfig {
        num_layers: 4,
        hidden: 64,
        heads: 4,
        ffn_dim: 128,
        vocab: task.vocab,
        max_query_len: task.query_len,
        max_doc_len: task.doc_len,
        seed: 1,
        scoring: Scoring::Probability,
    };
    let student_config = EncoderConfig {
        num_layers: 2,
        hidden: 32,
        ffn_dim: 64,
        seed: 2,
        ..teacher_config
    };
    let train = TrainParams {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 2,
        data_fraction: 1.0,
        seed: 1,
    };
    let mut teacher = init_params(&teacher_config)?;
    finetune(
        &mut teacher,
        &triples,
        FinetuneObjective::PairwiseHinge,
        &train,
    )?;

    println!("L2 distillation under each mapping:");
    for strategy in STRATEGIES {
        let mut plan = ObjectivePlan::preset(
            "L2",
            teacher_config.num_layers,
            student_config.num_layers,
        )?;
        plan.layer_map = make_layer_map(
            strategy,
            teacher_config.num_layers,
            student_config.num_layers,
        )?;
        let outcome = distill(&teacher, &student_config, &plan, &triples, &train)?;
        let mrr = mrr_at_k(&rerank(&outcome.student, &devset)?, 10)?;
        println!("  {strategy:?}: mrr@10 = {mrr:.4}");
    }
    Ok(())
}

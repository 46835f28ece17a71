//! Scratch probe: teacher recipe sweep at max contrast.

use std::time::Instant;

use rankdistill::data::{gen_devset, gen_triples, SyntheticTaskSpec};
use rankdistill::encoder::{init_params, EncoderConfig, Scoring};
use rankdistill::eval::{mrr_at_k, rerank};
use rankdistill::train::{finetune, FinetuneObjective, TrainParams};
use rankdistill::Result;

fn encoder(task: &SyntheticTaskSpec, layers: usize, hidden: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        hidden,
        heads: 4,
        ffn_dim: hidden * 2,
        vocab: task.vocab,
        max_query_len: task.query_len,
        max_doc_len: task.doc_len,
        seed: 1,
        scoring: Scoring::Probability,
    }
}

fn main() -> Result<()> {
    let task = SyntheticTaskSpec {
        vocab: 200,
        query_len: 8,
        doc_len: 24,
        pos_min_overlap: 8,
        neg_max_overlap: 1,
        noise: 0.1,
        seed: 42,
    };
    let triples = gen_triples(&task, 4096)?;
    let devset = gen_devset(&task, 32, 50, 5)?;
    let tconfig = encoder(&task, 4, 64);

    let sweeps: &[(f64, usize, usize)] = &[
        (2e-3, 16, 3072),
        (2e-3, 8, 3072),
        (1e-3, 8, 3072),
        (3e-3, 32, 1536),
        (1.5e-3, 16, 3072),
    ];
    for &(lr, bs, cap) in sweeps {
        println!("teacher CE pos8neg1 lr {lr} bs {bs}:");
        let mut teacher = init_params(&tconfig)?;
        let mut total = 0usize;
        let started = Instant::now();
        let mut chunk = 0;
        while total < cap {
            let train = TrainParams {
                learning_rate: lr,
                batch_size: bs,
                epochs: 1,
                data_fraction: 1.0,
                seed: 100 + chunk,
            };
            chunk += 1;
            let h = finetune(
                &mut teacher,
                &triples,
                FinetuneObjective::PointwiseCrossEntropy,
                &train,
            )?;
            total += h.records.len();
            let loss = h.last_total().unwrap();
            let mrr = mrr_at_k(&rerank(&teacher, &devset)?, 10)?;
            println!(
                "  steps {total:>5}: loss {loss:.4}, mrr@10 {mrr:.4}  (total {:.0}s)",
                started.elapsed().as_secs_f64()
            );
            if mrr >= 0.85 || loss > 2.0 || !loss.is_finite() {
                break;
            }
        }
    }
    Ok(())
}

//! Evaluate every objective preset on one training triple and print which
//! terms each preset turns on and what they cost before any training.

use rankdistill::data::{gen_triples, SyntheticTaskSpec};
use rankdistill::encoder::{encode, init_params, pack_input, EncoderConfig, Scoring};
use rankdistill::objectives::{ObjectivePlan, ProjectionParams, SampleTraces, PRESET_NAMES};
use rankdistill::Result;

fn main() -> Result<()> {
    let task = SyntheticTaskSpec::default();
    let triple = gen_triples(&task, 1)?.remove(0);

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
    let teacher = init_params(&teacher_config)?;
    let student = init_params(&student_config)?;

    let t_pos = encode(&teacher, &pack_input(&triple.query, &triple.pos, &teacher_config)?)?;
    let t_neg = encode(&teacher, &pack_input(&triple.query, &triple.neg, &teacher_config)?)?;
    let s_pos = encode(&student, &pack_input(&triple.query, &triple.pos, &student_config)?)?;
    let s_neg = encode(&student, &pack_input(&triple.query, &triple.neg, &student_config)?)?;

    for name in PRESET_NAMES {
        let plan = ObjectivePlan::preset(
            name,
            teacher_config.num_layers,
            student_config.num_layers,
        )?;
        // Teacher is 64 wide, student 32: layer-wise terms need learned
        // projections into teacher width.
        let proj = (plan.hidn || plan.emb).then(|| {
            ProjectionParams::init(
                &plan.layer_map,
                student_config.hidden,
                teacher_config.hidden,
                0,
            )
        });

        let sample = match plan.regime() {
            rankdistill::objectives::Regime::Pairwise => SampleTraces::Pairwise {
                teacher_pos: &t_pos,
                teacher_neg: &t_neg,
                student_pos: &s_pos,
                student_neg: &s_neg,
            },
            rankdistill::objectives::Regime::Pointwise => SampleTraces::Pointwise {
                teacher: &t_pos,
                student: &s_pos,
                label: rankdistill::objectives::Relevance::Relevant,
            },
        };
        let value = rankdistill::objectives::compose(&plan, &sample, proj.as_ref())?;
        let terms: Vec<String> = value
            .terms
            .iter()
            .map(|(term, v)| format!("{term}={v:.4}"))
            .collect();
        println!(
            "{name:<24} total {:.4}  [{}]",
            value.total.item()?,
            terms.join(", ")
        );
    }
    Ok(())
}

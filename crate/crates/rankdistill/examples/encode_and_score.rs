//! Run one (query, document) pair through a small cross-encoder, inspect the
//! forward trace, and show that padded positions cannot influence the score.

use rankdistill::encoder::{
    encode, init_params, pack_input, ranking_score, EncoderConfig, Scoring, PAD_ID,
};
use rankdistill::Result;

fn main() -> Result<()> {
    let config = EncoderConfig {
        num_layers: 2,
        hidden: 32,
        heads: 4,
        ffn_dim: 64,
        vocab: 100,
        max_query_len: 8,
        max_doc_len: 16,
        seed: 11,
        scoring: Scoring::Probability,
    };
    let params = init_params(&config)?;
    println!("encoder holds {} parameters", params.num_parameters());

    let query = [3, 14, 15, 9];
    let doc = [3, 14, 15, 9, 26, 53, 58, 97];
    let packed = pack_input(&query, &doc, &config)?;
    println!("packed sequence length {}", packed.ids.len());

    let trace = encode(&params, &packed)?;
    println!(
        "trace: emb {:?}, {} hidden layers of {:?}, attention {:?}",
        trace.emb_out.shape(),
        trace.hidden.len(),
        trace.hidden[0].shape(),
        trace.attn_scores[0].shape(),
    );
    println!("logits = {:?}", trace.logits.data());
    let score = ranking_score(&trace, config.scoring)?;
    println!("relevance score = {score:.6}");

    // Appending masked padding leaves the logits bitwise unchanged: the mask
    // drives padded attention weights to exactly zero.
    let mut padded = packed.clone();
    for _ in 0..5 {
        padded.ids.push(PAD_ID);
        padded.segments.push(1);
        padded.mask.push(false);
    }
    let padded_trace = encode(&params, &padded)?;
    assert_eq!(trace.logits.data(), padded_trace.logits.data());
    println!("logits identical after appending 5 masked pad tokens");

    // An untrained encoder has no preference yet; training gives the score
    // its meaning.
    let unrelated = [40, 41, 42, 43, 44, 45, 46, 47];
    let other = encode(&params, &pack_input(&query, &unrelated, &config)?)?;
    println!(
        "overlapping doc {score:.6} vs unrelated doc {:.6}",
        ranking_score(&other, config.scoring)?
    );
    Ok(())
}

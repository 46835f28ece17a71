//! Ranking evaluation: reranking, reciprocal-rank metrics, and rank
//! correlation.
//!
//! Ranking order is descending by score with ties broken toward the earlier
//! candidate, so equal-scoring documents never shuffle between runs.

use std::io::Write;
use std::path::Path;

use crate::data::{oracle_relevance, DevSet};
use crate::encoder::{score_pair, EncoderParams};
use crate::error::{Error, Result};

/// One query's scored candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    pub qid: String,
    /// Scores aligned with presentation order.
    pub scores: Vec<f64>,
    pub docids: Vec<String>,
    pub labels: Vec<bool>,
    /// Candidate indices sorted best-first.
    pub order: Vec<usize>,
}

impl RankedQuery {
    /// Build from presentation-order scores; validates finiteness and
    /// computes the tie-stable ranking order.
    pub fn new(qid: String, scores: Vec<f64>, docids: Vec<String>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != docids.len() || scores.len() != labels.len() {
            return Err(Error::Eval(format!(
                "query {qid}: {} scores, {} docids, {} labels",
                scores.len(),
                docids.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::Eval(format!("query {qid} has no candidates")));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Eval(format!(
                "query {qid} produced a non-finite score {bad}"
            )));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("scores checked finite")
                .then(a.cmp(&b))
        });
        Ok(RankedQuery {
            qid,
            scores,
            docids,
            labels,
            order,
        })
    }

    /// Reciprocal rank of the first relevant document within the top `k`,
    /// or 0 when none appears. Errors when the query has no relevant
    /// documents at all.
    pub fn reciprocal_rank_at(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::Eval("cutoff k must be >= 1".into()));
        }
        if !self.labels.iter().any(|&l| l) {
            return Err(Error::Eval(format!(
                "query {} has no relevant documents; reciprocal rank is undefined",
                self.qid
            )));
        }
        for (pos, &idx) in self.order.iter().take(k).enumerate() {
            if self.labels[idx] {
                return Ok(1.0 / (pos + 1) as f64);
            }
        }
        Ok(0.0)
    }
}

/// Score every candidate of every query with an arbitrary scorer
/// `(query_tokens, doc_tokens) -> score`.
pub fn rerank_with(
    devset: &DevSet,
    mut scorer: impl FnMut(&[usize], &[usize]) -> Result<f64>,
) -> Result<Vec<RankedQuery>> {
    let mut out = Vec::with_capacity(devset.queries.len());
    for q in &devset.queries {
        let mut scores = Vec::with_capacity(q.candidates.len());
        let mut docids = Vec::with_capacity(q.candidates.len());
        let mut labels = Vec::with_capacity(q.candidates.len());
        for (docid, doc, label) in &q.candidates {
            scores.push(scorer(&q.query, doc)?);
            docids.push(docid.clone());
            labels.push(*label);
        }
        out.push(RankedQuery::new(q.qid.clone(), scores, docids, labels)?);
    }
    Ok(out)
}

/// Rerank a dev set with an encoder, using its configured scoring.
pub fn rerank(params: &EncoderParams, devset: &DevSet) -> Result<Vec<RankedQuery>> {
    rerank_with(devset, |query, doc| score_pair(params, query, doc))
}

/// Mean reciprocal rank at cutoff `k` over all queries.
pub fn mrr_at_k(ranked: &[RankedQuery], k: usize) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::Eval("no queries to evaluate".into()));
    }
    let mut sum = 0.0;
    for q in ranked {
        sum += q.reciprocal_rank_at(k)?;
    }
    Ok(sum / ranked.len() as f64)
}

/// Per-query reciprocal ranks at cutoff `k`.
pub fn reciprocal_ranks(ranked: &[RankedQuery], k: usize) -> Result<Vec<(String, f64)>> {
    ranked
        .iter()
        .map(|q| Ok((q.qid.clone(), q.reciprocal_rank_at(k)?)))
        .collect()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Errors when
/// either side is constant or the inputs are malformed.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Eval(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Eval("need at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Eval("non-finite value in correlation input".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..rx.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Eval(
            "rank correlation is undefined for a constant input".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Mean per-query Spearman correlation between given scores and the token
/// overlap oracle. `ranked` must align with `devset` query-for-query.
pub fn mean_spearman_vs_oracle(devset: &DevSet, ranked: &[RankedQuery]) -> Result<f64> {
    if devset.queries.len() != ranked.len() {
        return Err(Error::Eval(format!(
            "{} dev queries but {} ranked queries",
            devset.queries.len(),
            ranked.len()
        )));
    }
    let mut sum = 0.0;
    for (dq, rq) in devset.queries.iter().zip(ranked) {
        if dq.qid != rq.qid {
            return Err(Error::Eval(format!(
                "query order mismatch: {} vs {}",
                dq.qid, rq.qid
            )));
        }
        let oracle: Vec<f64> = dq
            .candidates
            .iter()
            .map(|(_, doc, _)| oracle_relevance(&dq.query, doc))
            .collect();
        sum += spearman(&rq.scores, &oracle)?;
    }
    Ok(sum / ranked.len() as f64)
}

/// Write a run file: `qid \t docid \t rank \t score`, best-first per query.
pub fn write_run_tsv(path: &Path, ranked: &[RankedQuery]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for q in ranked {
        for (pos, &idx) in q.order.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", q.qid, q.docids[idx], pos + 1, q.scores[idx])
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_devset, SyntheticTaskSpec};
    use crate::encoder::{init_params, EncoderConfig, Scoring};
    use approx::assert_abs_diff_eq;

    fn rq(scores: Vec<f64>, labels: Vec<bool>) -> RankedQuery {
        let docids = (0..scores.len()).map(|i| format!("d{i}")).collect();
        RankedQuery::new("q".into(), scores, docids, labels).unwrap()
    }

    #[test]
    fn ties_break_toward_the_earlier_candidate() {
        let q = rq(vec![0.5, 0.9, 0.9], vec![false, false, true]);
        assert_eq!(q.order, vec![1, 2, 0]);
        // The relevant doc sits at rank 2.
        assert_abs_diff_eq!(q.reciprocal_rank_at(10).unwrap(), 0.5);
    }

    #[test]
    fn mrr_matches_brute_force_on_hand_cases() {
        let a = rq(vec![0.1, 0.9, 0.5], vec![true, false, false]); // rank 3
        let b = rq(vec![0.9, 0.1, 0.5], vec![true, false, false]); // rank 1
        let got = mrr_at_k(&[a.clone(), b.clone()], 10).unwrap();
        assert_abs_diff_eq!(got, (1.0 / 3.0 + 1.0) / 2.0, epsilon = 1e-12);

        // Cutoff: the rank-3 positive vanishes at k = 2.
        let got = mrr_at_k(&[a, b], 2).unwrap();
        assert_abs_diff_eq!(got, (0.0 + 1.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn queries_without_positives_are_rejected() {
        let q = rq(vec![0.1, 0.9], vec![false, false]);
        assert!(q.reciprocal_rank_at(10).is_err());
        assert!(mrr_at_k(&[q], 10).is_err());
        assert!(mrr_at_k(&[], 10).is_err());
        let q = rq(vec![0.1, 0.9], vec![true, false]);
        assert!(q.reciprocal_rank_at(0).is_err());
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let r = RankedQuery::new(
            "q".into(),
            vec![0.1, f64::NAN],
            vec!["a".into(), "b".into()],
            vec![true, false],
        );
        assert!(r.is_err());
    }

    #[test]
    fn reranking_is_invariant_to_presentation_order() {
        let spec = SyntheticTaskSpec::default();
        let mut dev = gen_devset(&spec, 4, 6, 2).unwrap();
        let ranked = rerank_with(&dev, |q, d| Ok(oracle_relevance(q, d))).unwrap();
        let mrr = mrr_at_k(&ranked, 10).unwrap();
        // Rotate every candidate list; scores travel with their documents.
        for q in &mut dev.queries {
            q.candidates.rotate_left(2);
        }
        let ranked2 = rerank_with(&dev, |q, d| Ok(oracle_relevance(q, d))).unwrap();
        let mrr2 = mrr_at_k(&ranked2, 10).unwrap();
        assert_abs_diff_eq!(mrr, mrr2, epsilon = 1e-12);
    }

    #[test]
    fn oracle_scorer_achieves_perfect_mrr() {
        let spec = SyntheticTaskSpec::default();
        let dev = gen_devset(&spec, 6, 8, 2).unwrap();
        let ranked = rerank_with(&dev, |q, d| Ok(oracle_relevance(q, d))).unwrap();
        // Positives strictly dominate negatives, so one sits at rank 1.
        assert_abs_diff_eq!(mrr_at_k(&ranked, 10).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spearman_matches_hand_computed_ranks() {
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            spearman(&[1.0, 2.0, 3.0], &[5.0, 1.0, -2.0]).unwrap(),
            -1.0,
            epsilon = 1e-12
        );

        // Ties get average ranks: xs -> [1, 2.5, 2.5, 4], ys -> [1, 2, 3, 4].
        // Pearson of those rank vectors, computed here directly.
        let rx = [1.0, 2.5, 2.5, 4.0];
        let ry = [1.0, 2.0, 3.0, 4.0];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&rx), mean(&ry));
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
        let want = cov / (vx * vy).sqrt();
        let got = spearman(&[1.0, 2.0, 2.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);

        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn oracle_scores_correlate_perfectly_with_themselves() {
        let spec = SyntheticTaskSpec::default();
        let dev = gen_devset(&spec, 4, 6, 2).unwrap();
        let ranked = rerank_with(&dev, |q, d| Ok(oracle_relevance(q, d))).unwrap();
        let rho = mean_spearman_vs_oracle(&dev, &ranked).unwrap();
        assert_abs_diff_eq!(rho, 1.0, epsilon = 1e-12);
        // A scorer that inverts the oracle correlates at -1.
        let ranked = rerank_with(&dev, |q, d| Ok(-oracle_relevance(q, d))).unwrap();
        let rho = mean_spearman_vs_oracle(&dev, &ranked).unwrap();
        assert_abs_diff_eq!(rho, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn encoder_reranking_produces_valid_rankings() {
        let spec = SyntheticTaskSpec {
            vocab: 40,
            query_len: 3,
            doc_len: 5,
            pos_min_overlap: 2,
            neg_max_overlap: 1,
            noise: 0.0,
            seed: 3,
        };
        let config = EncoderConfig {
            num_layers: 1,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 40,
            max_query_len: 3,
            max_doc_len: 5,
            seed: 5,
            scoring: Scoring::Probability,
        };
        let params = init_params(&config).unwrap();
        let dev = gen_devset(&spec, 3, 4, 1).unwrap();
        let ranked = rerank(&params, &dev).unwrap();
        assert_eq!(ranked.len(), 3);
        for q in &ranked {
            assert_eq!(q.order.len(), 4);
            let mut sorted = q.order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2, 3], "order is a permutation");
            for w in q.order.windows(2) {
                assert!(q.scores[w[0]] >= q.scores[w[1]], "descending scores");
            }
        }
        // An untrained encoder cannot be perfect, but MRR is well defined.
        let mrr = mrr_at_k(&ranked, 10).unwrap();
        assert!((0.0..=1.0).contains(&mrr));
    }

    #[test]
    fn run_files_list_rank_ordered_rows() {
        let q = rq(vec![0.5, 0.9], vec![true, false]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.tsv");
        write_run_tsv(&path, &[q]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "q\td1\t1\t0.9\nq\td0\t2\t0.5\n");
    }
}

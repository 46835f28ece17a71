//! Synthetic ranking tasks with a known relevance oracle.
//!
//! A task draws queries of distinct tokens and builds documents with a
//! controlled amount of token overlap. Ground-truth relevance is the overlap
//! fraction `|set(q) & set(d)| / |set(q)|`, so positives and negatives are
//! separated by construction: every positive overlaps at least
//! `pos_min_overlap` query tokens and every negative at most
//! `neg_max_overlap < pos_min_overlap`.
//!
//! Generation is deterministic and index-stable: sample `i` is produced from
//! its own seeded substream, so growing a dataset never changes the samples
//! that came before.
//!
//! On disk, triples are TSV rows `query \t positive \t negative` and dev
//! sets are TSV rows `qid \t query \t docid \t doc \t label`, with tokens
//! space-separated inside a field. A token that parses as an integer below
//! the vocabulary size is used as-is; anything else is hashed into the
//! vocabulary, so word-like corpora load too.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const DOMAIN_TRIPLES: u64 = 1;
pub(crate) const DOMAIN_DEVSET: u64 = 2;
pub(crate) const DOMAIN_INIT: u64 = 3;
pub(crate) const DOMAIN_SHUFFLE: u64 = 4;
pub(crate) const DOMAIN_PROJECTION: u64 = 5;

/// Mix a base seed, a domain tag, and an index into an independent stream
/// seed (splitmix64 finalizer).
pub(crate) fn mix64(seed: u64, domain: u64, index: u64) -> u64 {
    let mut x = seed
        ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// FNV-1a over bytes; used for token hashing and dataset fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn default_vocab() -> usize {
    200
}
fn default_query_len() -> usize {
    8
}
fn default_doc_len() -> usize {
    24
}
fn default_pos_min() -> usize {
    8
}
fn default_neg_max() -> usize {
    1
}
fn default_noise() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    42
}

/// Parameters of one synthetic ranking task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_query_len")]
    pub query_len: usize,
    #[serde(default = "default_doc_len")]
    pub doc_len: usize,
    /// Minimum query-token overlap of a positive document.
    #[serde(default = "default_pos_min")]
    pub pos_min_overlap: usize,
    /// Maximum query-token overlap of a negative document.
    #[serde(default = "default_neg_max")]
    pub neg_max_overlap: usize,
    /// Fraction of samples forced onto the decision boundary (positives at
    /// exactly the minimum overlap, negatives at exactly the maximum).
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab: default_vocab(),
            query_len: default_query_len(),
            doc_len: default_doc_len(),
            pos_min_overlap: default_pos_min(),
            neg_max_overlap: default_neg_max(),
            noise: default_noise(),
            seed: default_seed(),
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.query_len == 0 || self.doc_len == 0 {
            return Err(Error::InvalidConfig(
                "query_len and doc_len must be >= 1".into(),
            ));
        }
        if self.vocab <= self.query_len + self.doc_len {
            return Err(Error::InvalidConfig(format!(
                "vocab {} must exceed query_len {} + doc_len {} so negatives can avoid query tokens",
                self.vocab, self.query_len, self.doc_len
            )));
        }
        let max_overlap = self.query_len.min(self.doc_len);
        if self.pos_min_overlap == 0 || self.pos_min_overlap > max_overlap {
            return Err(Error::InvalidConfig(format!(
                "pos_min_overlap {} must lie in 1..={max_overlap}",
                self.pos_min_overlap
            )));
        }
        if self.neg_max_overlap >= self.pos_min_overlap {
            return Err(Error::InvalidConfig(format!(
                "neg_max_overlap {} must be strictly below pos_min_overlap {}",
                self.neg_max_overlap, self.pos_min_overlap
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) || !self.noise.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise {} must lie in [0, 1]",
                self.noise
            )));
        }
        Ok(())
    }

    /// Largest overlap a positive document can carry.
    fn max_overlap(&self) -> usize {
        self.query_len.min(self.doc_len)
    }
}

/// One training sample: a query with one relevant and one non-relevant
/// document, token ids in `0..vocab`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triple {
    pub query: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// One evaluation query with labeled candidate documents.
#[derive(Clone, Debug, PartialEq)]
pub struct DevQuery {
    pub qid: String,
    pub query: Vec<usize>,
    /// `(docid, tokens, relevant)` in presentation order.
    pub candidates: Vec<(String, Vec<usize>, bool)>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DevSet {
    pub queries: Vec<DevQuery>,
}

/// Ground-truth relevance: the fraction of distinct query tokens present in
/// the document.
pub fn oracle_relevance(query: &[usize], doc: &[usize]) -> f64 {
    let q: BTreeSet<usize> = query.iter().copied().collect();
    if q.is_empty() {
        return 0.0;
    }
    let d: BTreeSet<usize> = doc.iter().copied().collect();
    q.intersection(&d).count() as f64 / q.len() as f64
}

fn sample_query(rng: &mut ChaCha8Rng, spec: &SyntheticTaskSpec) -> Vec<usize> {
    rand::seq::index::sample(rng, spec.vocab, spec.query_len).into_vec()
}

/// Build a document containing exactly `overlap` distinct query tokens and
/// filler drawn from outside the query.
fn make_doc(rng: &mut ChaCha8Rng, query: &[usize], overlap: usize, spec: &SyntheticTaskSpec) -> Vec<usize> {
    let picked = rand::seq::index::sample(rng, query.len(), overlap);
    let mut doc: Vec<usize> = picked.iter().map(|i| query[i]).collect();
    let in_query: BTreeSet<usize> = query.iter().copied().collect();
    while doc.len() < spec.doc_len {
        let t = rng.gen_range(0..spec.vocab);
        if !in_query.contains(&t) {
            doc.push(t);
        }
    }
    rand::seq::SliceRandom::shuffle(doc.as_mut_slice(), rng);
    doc
}

fn draw_pos_overlap(rng: &mut ChaCha8Rng, spec: &SyntheticTaskSpec) -> usize {
    if rng.gen::<f64>() < spec.noise {
        spec.pos_min_overlap
    } else {
        rng.gen_range(spec.pos_min_overlap..=spec.max_overlap())
    }
}

fn draw_neg_overlap(rng: &mut ChaCha8Rng, spec: &SyntheticTaskSpec) -> usize {
    if rng.gen::<f64>() < spec.noise {
        spec.neg_max_overlap
    } else {
        rng.gen_range(0..=spec.neg_max_overlap)
    }
}

/// Generate `n` training triples. Sample `i` depends only on
/// `(spec.seed, i)`, so prefixes are stable as `n` grows.
pub fn gen_triples(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<Triple>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed, DOMAIN_TRIPLES, i as u64));
        let query = sample_query(&mut rng, spec);
        let o_pos = draw_pos_overlap(&mut rng, spec);
        let o_neg = draw_neg_overlap(&mut rng, spec);
        let pos = make_doc(&mut rng, &query, o_pos, spec);
        let neg = make_doc(&mut rng, &query, o_neg, spec);
        out.push(Triple { query, pos, neg });
    }
    Ok(out)
}

/// Generate an evaluation set: `n_queries` queries, each with
/// `n_candidates` documents of which `n_relevant` are positives, shuffled
/// into presentation order.
pub fn gen_devset(
    spec: &SyntheticTaskSpec,
    n_queries: usize,
    n_candidates: usize,
    n_relevant: usize,
) -> Result<DevSet> {
    spec.validate()?;
    if n_relevant == 0 || n_relevant > n_candidates {
        return Err(Error::InvalidConfig(format!(
            "n_relevant {n_relevant} must lie in 1..={n_candidates}"
        )));
    }
    let mut queries = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed, DOMAIN_DEVSET, i as u64));
        let query = sample_query(&mut rng, spec);
        let mut docs: Vec<(Vec<usize>, bool)> = Vec::with_capacity(n_candidates);
        for _ in 0..n_relevant {
            let o = draw_pos_overlap(&mut rng, spec);
            docs.push((make_doc(&mut rng, &query, o, spec), true));
        }
        for _ in n_relevant..n_candidates {
            let o = draw_neg_overlap(&mut rng, spec);
            docs.push((make_doc(&mut rng, &query, o, spec), false));
        }
        rand::seq::SliceRandom::shuffle(docs.as_mut_slice(), &mut rng);
        let candidates = docs
            .into_iter()
            .enumerate()
            .map(|(j, (doc, label))| (format!("d{i}_{j}"), doc, label))
            .collect();
        queries.push(DevQuery {
            qid: format!("q{i}"),
            query,
            candidates,
        });
    }
    Ok(DevSet { queries })
}

fn tokens_to_field(tokens: &[usize]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&t.to_string());
    }
    s
}

/// Parse one whitespace-separated token field. Integer tokens below `vocab`
/// pass through; any other token is hashed into `0..vocab`.
fn parse_tokens(field: &str, vocab: usize) -> Result<Vec<usize>> {
    let toks: Vec<usize> = field
        .split_whitespace()
        .map(|w| match w.parse::<usize>() {
            Ok(id) if id < vocab => id,
            _ => (fnv1a64(w.as_bytes()) % vocab as u64) as usize,
        })
        .collect();
    if toks.is_empty() {
        return Err(Error::Data("empty token field".into()));
    }
    Ok(toks)
}

pub fn save_triples(path: &Path, triples: &[Triple]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triples {
        writeln!(
            w,
            "{}\t{}\t{}",
            tokens_to_field(&t.query),
            tokens_to_field(&t.pos),
            tokens_to_field(&t.neg)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_triples(path: &Path, vocab: usize) -> Result<Vec<Triple>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut fields = line.split('\t');
        let mut next = |name: &str| {
            fields.next().ok_or_else(|| Error::MalformedRecord {
                path: path.display().to_string(),
                line: lineno,
                reason: format!("missing {name} column"),
            })
        };
        let query = next("query")?;
        let pos = next("positive")?;
        let neg = next("negative")?;
        if fields.next().is_some() {
            return Err(Error::MalformedRecord {
                path: path.display().to_string(),
                line: lineno,
                reason: "expected exactly 3 tab-separated columns".into(),
            });
        }
        let parse = |field: &str| {
            parse_tokens(field, vocab).map_err(|e| Error::MalformedRecord {
                path: path.display().to_string(),
                line: lineno,
                reason: e.to_string(),
            })
        };
        out.push(Triple {
            query: parse(query)?,
            pos: parse(pos)?,
            neg: parse(neg)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no triples",
            path.display()
        )));
    }
    Ok(out)
}

pub fn save_devset(path: &Path, devset: &DevSet) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in &devset.queries {
        for (docid, doc, label) in &q.candidates {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                q.qid,
                tokens_to_field(&q.query),
                docid,
                tokens_to_field(doc),
                u8::from(*label)
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_devset(path: &Path, vocab: usize) -> Result<DevSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut queries: Vec<DevQuery> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.display().to_string(),
            line: lineno,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [qid, query, docid, doc, label] = fields.as_slice() else {
            return Err(malformed(format!(
                "expected 5 tab-separated columns, got {}",
                fields.len()
            )));
        };
        let label = match *label {
            "0" => false,
            "1" => true,
            other => return Err(malformed(format!("label must be 0 or 1, got {other:?}"))),
        };
        let query = parse_tokens(query, vocab).map_err(|e| malformed(e.to_string()))?;
        let doc = parse_tokens(doc, vocab).map_err(|e| malformed(e.to_string()))?;
        match queries.last_mut() {
            Some(last) if last.qid == *qid => {
                if last.query != query {
                    return Err(malformed(format!(
                        "query text changed within qid {qid:?}"
                    )));
                }
                last.candidates.push((docid.to_string(), doc, label));
            }
            _ => {
                if queries.iter().any(|q| q.qid == *qid) {
                    return Err(malformed(format!(
                        "qid {qid:?} rows are not contiguous"
                    )));
                }
                queries.push(DevQuery {
                    qid: qid.to_string(),
                    query,
                    candidates: vec![(docid.to_string(), doc, label)],
                });
            }
        }
    }
    if queries.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no evaluation rows",
            path.display()
        )));
    }
    Ok(DevSet { queries })
}

fn hash_tokens(h: &mut u64, tokens: &[usize]) {
    for &t in tokens {
        for b in (t as u64).to_le_bytes() {
            *h ^= b as u64;
            *h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    *h ^= 0xFF;
    *h = h.wrapping_mul(0x0000_0100_0000_01b3);
}

/// Order-sensitive FNV fingerprint of a triple list.
pub fn fingerprint_triples(triples: &[Triple]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in triples {
        hash_tokens(&mut h, &t.query);
        hash_tokens(&mut h, &t.pos);
        hash_tokens(&mut h, &t.neg);
    }
    h
}

/// Order-sensitive FNV fingerprint of a dev set, covering ids, tokens, and
/// labels.
pub fn fingerprint_devset(devset: &DevSet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for q in &devset.queries {
        for b in q.qid.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash_tokens(&mut h, &q.query);
        for (docid, doc, label) in &q.candidates {
            for b in docid.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            hash_tokens(&mut h, doc);
            h ^= u64::from(*label);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

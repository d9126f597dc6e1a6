//! Hard-negative mining with a rank window.
//!
//! Candidates are ranked by cosine similarity to the anchor (descending,
//! ties by ascending id) after the gold item is removed. The pool is the
//! 1-based rank range `[window_lo, min(window_hi, candidates)]` and
//! `n_samples` are drawn from it uniformly without replacement.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{feature_matrix, Corpus, Role, TextRecord, TrainingExample, ENGLISH};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningPolicy {
    pub window_lo: usize,
    pub window_hi: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for MiningPolicy {
    fn default() -> Self {
        Self {
            window_lo: 31,
            window_hi: 100,
            n_samples: 5,
            seed: 0,
        }
    }
}

impl MiningPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.window_lo < 1 || self.window_lo > self.window_hi || self.n_samples < 1 {
            return Err(Error::Config(format!(
                "mining: invalid policy window [{}, {}] with {} samples",
                self.window_lo, self.window_hi, self.n_samples
            )));
        }
        Ok(())
    }
}

/// Candidate indices in rank order: similarity descending, ties by
/// ascending id, `exclude` removed.
pub fn rank_candidates(anchor: &[f64], candidates: &Matrix, ids: &[&str], exclude: &str) -> Vec<usize> {
    let scores: Vec<f64> = candidates.iter_rows().map(|c| dot(anchor, c)).collect();
    let mut order: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != exclude).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(ids[b]))
    });
    order
}

struct Pool<'a> {
    ids: Vec<&'a str>,
    embeddings: Matrix,
}

impl<'a> Pool<'a> {
    fn new(encoder: &dyn Encoder, records: &[&'a TextRecord]) -> Result<Self> {
        Ok(Self {
            ids: records.iter().map(|r| r.id.as_str()).collect(),
            embeddings: encoder.encode(&feature_matrix(records.iter().copied())?)?,
        })
    }

    fn sample(&self, anchor: &[f64], exclude: &str, policy: &MiningPolicy, example: &str, rng: &mut Rng) -> Result<Vec<String>> {
        let ranked = rank_candidates(anchor, &self.embeddings, &self.ids, exclude);
        let hi = policy.window_hi.min(ranked.len());
        let pool = (hi + 1).saturating_sub(policy.window_lo);
        if pool < policy.n_samples {
            return Err(Error::PoolTooSmall {
                example: example.to_string(),
                pool,
                needed: policy.n_samples,
            });
        }
        let mut picks = rng.sample_indices(pool, policy.n_samples);
        picks.sort_unstable();
        Ok(picks
            .into_iter()
            .map(|k| self.ids[ranked[policy.window_lo - 1 + k]].to_string())
            .collect())
    }
}

fn example_label(e: &TrainingExample) -> String {
    format!("{}/{}", e.lang, e.pair_id)
}

fn encode_rows<'a>(encoder: &dyn Encoder, rows: impl IntoIterator<Item = &'a TextRecord>) -> Result<Matrix> {
    encoder.encode(&feature_matrix(rows)?)
}

/// Fills `neg_passage_ids` from English passages ranked against the
/// example's English query.
pub fn mine_passage_negatives(
    encoder: &dyn Encoder,
    examples: &[TrainingExample],
    passages: &[&TextRecord],
    policy: &MiningPolicy,
) -> Result<Vec<TrainingExample>> {
    policy.validate()?;
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let pool = Pool::new(encoder, passages)?;
    let anchors = encode_rows(encoder, examples.iter().map(|e| &e.q_en))?;
    let root = Rng::new(policy.seed).substream("mining/passage");
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let label = example_label(e);
            let mut rng = root.substream(&label);
            let mut out = e.clone();
            out.neg_passage_ids = pool.sample(anchors.row(i), &e.p_en_pos.id, policy, &label, &mut rng)?;
            Ok(out)
        })
        .collect()
}

/// Fills `neg_query_ids` from target-language queries of the example's
/// language ranked against its gold English passage.
pub fn mine_query_negatives(
    encoder: &dyn Encoder,
    examples: &[TrainingExample],
    queries: &[&TextRecord],
    policy: &MiningPolicy,
) -> Result<Vec<TrainingExample>> {
    policy.validate()?;
    let mut langs: Vec<&str> = examples.iter().map(|e| e.lang.as_str()).collect();
    langs.sort_unstable();
    langs.dedup();
    let mut pools = Vec::new();
    for lang in &langs {
        let records: Vec<&TextRecord> = queries.iter().copied().filter(|r| r.lang == *lang).collect();
        pools.push(Pool::new(encoder, &records)?);
    }
    let anchors = encode_rows(encoder, examples.iter().map(|e| &e.p_en_pos))?;
    let root = Rng::new(policy.seed).substream("mining/query");
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let pool = &pools[langs.binary_search(&e.lang.as_str()).unwrap()];
            let label = example_label(e);
            let mut rng = root.substream(&label);
            let mut out = e.clone();
            out.neg_query_ids = pool.sample(anchors.row(i), &e.q_tgt.id, policy, &label, &mut rng)?;
            Ok(out)
        })
        .collect()
}

/// Mines both negative kinds against the queries and passages of `corpus`.
pub fn mine_negatives(
    encoder: &dyn Encoder,
    examples: &[TrainingExample],
    corpus: &Corpus,
    policy: &MiningPolicy,
) -> Result<Vec<TrainingExample>> {
    let passages = corpus.select(ENGLISH, Role::Passage);
    let queries: Vec<&TextRecord> = corpus
        .records()
        .iter()
        .filter(|r| r.role == Role::Query && r.lang != ENGLISH)
        .collect();
    let with_passages = mine_passage_negatives(encoder, examples, &passages, policy)?;
    mine_query_negatives(encoder, &with_passages, &queries, policy)
}

//! Seeded synthetic multilingual retrieval corpus.
//!
//! Every pair `i` has a latent `z_i ~ N(0, I)`. Features are produced by
//! per-language maps with orthonormal columns:
//!
//! ```text
//! English query     A_en · z_i               + noise(sigma_en)
//! English passage   A_en · (z_i + 0.1 δ_i)   + noise(sigma_en)
//! target query      A_l  · z_i               + noise(sigma_l)
//! target passage    A_l  · (z_i + 0.1 δ_i)   + noise(sigma_l)   (eval split only)
//! ```
//!
//! `A_l` is the orthonormalized blend `(1 - r) A_en + r R_l` of the English
//! map and a random map `R_l` drawn from the language's `map_seed`, so
//! `rotation = r` sets how far the language sits from English in the base
//! feature space. A share of the pairs are hard twins, `z' = z + 0.3 u`
//! with `u` a random unit vector, whose passages distract from the original.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{
    write_corpus, write_examples, write_qrels, Role, TextRecord, TrainingExample, ENGLISH,
};

pub const TRAIN_PREFIX: &str = "t";
pub const EVAL_PREFIX: &str = "e";

const PASSAGE_SHIFT: f64 = 0.1;
const TWIN_SHIFT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub code: String,
    pub noise_sigma: f64,
    pub map_seed: u64,
    /// Blend weight of the language's own random map, in [0, 1].
    #[serde(default = "default_rotation")]
    pub rotation: f64,
}

fn default_rotation() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Training pairs; each has one query per target language.
    pub n_pairs: usize,
    /// Held-out pairs used only for evaluation.
    pub n_eval_pairs: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub en_noise_sigma: f64,
    pub languages: Vec<LanguageSpec>,
    pub hard_twin_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let lang = |code: &str, noise_sigma, map_seed| LanguageSpec {
            code: code.into(),
            noise_sigma,
            map_seed,
            rotation: 0.7,
        };
        Self {
            n_pairs: 1000,
            n_eval_pairs: 500,
            latent_dim: 16,
            feature_dim: 64,
            en_noise_sigma: 0.05,
            languages: vec![lang("hrl", 0.12, 101), lang("mrl", 0.3, 202), lang("lrl", 0.6, 303)],
            hard_twin_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic: {m}")));
        if self.latent_dim < 2 || self.feature_dim < 2 {
            return fail(format!(
                "dims must be at least 2, got latent {} feature {}",
                self.latent_dim, self.feature_dim
            ));
        }
        if self.latent_dim > self.feature_dim {
            return fail("latent_dim cannot exceed feature_dim".into());
        }
        if self.n_pairs == 0 {
            return fail("n_pairs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hard_twin_fraction) {
            return fail(format!("hard_twin_fraction {} outside [0, 1]", self.hard_twin_fraction));
        }
        if !(self.en_noise_sigma >= 0.0) {
            return fail("en_noise_sigma must be non-negative".into());
        }
        if self.languages.is_empty() {
            return fail("at least one target language is required".into());
        }
        for (i, l) in self.languages.iter().enumerate() {
            if l.code.is_empty() || l.code == ENGLISH {
                return fail(format!("invalid target language code `{}`", l.code));
            }
            if self.languages[..i].iter().any(|o| o.code == l.code) {
                return fail(format!("duplicate language `{}`", l.code));
            }
            if !(l.noise_sigma >= 0.0) {
                return fail(format!("noise_sigma of `{}` must be non-negative", l.code));
            }
            if !(0.0..=1.0).contains(&l.rotation) {
                return fail(format!("rotation of `{}` outside [0, 1]", l.code));
            }
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// English queries, English passages and target queries of the
    /// training pairs.
    pub corpus: Vec<TextRecord>,
    /// One example per (pair, target language), without negatives.
    pub examples: Vec<TrainingExample>,
    /// Held-out pairs with queries and passages in every language.
    pub eval_corpus: Vec<TextRecord>,
}

impl SyntheticDataset {
    /// Gold query → passage rows for the training corpus.
    pub fn train_qrels(&self) -> Vec<(String, String, u8)> {
        let mut rows = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for e in &self.examples {
            if seen.insert(e.q_en.id.clone()) {
                rows.push((e.q_en.id.clone(), e.p_en_pos.id.clone(), 1));
            }
            rows.push((e.q_tgt.id.clone(), e.p_en_pos.id.clone(), 1));
        }
        rows
    }

    /// Every held-out query against the passage of its pair in every
    /// language; evaluation keeps the rows whose passage is in its pool.
    pub fn eval_qrels(&self) -> Vec<(String, String, u8)> {
        let passages: Vec<&TextRecord> = self
            .eval_corpus
            .iter()
            .filter(|r| r.role == Role::Passage)
            .collect();
        let mut rows = Vec::new();
        for q in self.eval_corpus.iter().filter(|r| r.role == Role::Query) {
            for p in passages.iter().filter(|p| p.pair_id == q.pair_id) {
                rows.push((q.id.clone(), p.id.clone(), 1));
            }
        }
        rows
    }

    /// Writes `corpus.jsonl`, `train.jsonl`, `qrels.tsv`,
    /// `eval_corpus.jsonl` and `eval_qrels.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_corpus(&dir.join("corpus.jsonl"), &self.corpus)?;
        write_examples(&dir.join("train.jsonl"), &self.examples)?;
        write_qrels(&dir.join("qrels.tsv"), &self.train_qrels())?;
        write_corpus(&dir.join("eval_corpus.jsonl"), &self.eval_corpus)?;
        write_qrels(&dir.join("eval_qrels.tsv"), &self.eval_qrels())
    }
}

pub fn query_id(lang: &str, pair_id: &str) -> String {
    format!("q-{lang}-{pair_id}")
}

pub fn passage_id(lang: &str, pair_id: &str) -> String {
    format!("p-{lang}-{pair_id}")
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

// Q factor of a thin QR with columns signed so that diag(R) ≥ 0, which makes
// the map continuous in its input.
fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for k in 0..q.ncols() {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

fn unit_vector(dim: usize, rng: &mut Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.normal());
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

struct Maps {
    en: DMatrix<f64>,
    langs: Vec<DMatrix<f64>>,
}

fn build_maps(cfg: &SyntheticConfig) -> Maps {
    let (d, l) = (cfg.feature_dim, cfg.latent_dim);
    let en = orthonormalize(gaussian_matrix(d, l, &mut Rng::new(cfg.seed).substream("map/en")));
    let langs = cfg
        .languages
        .iter()
        .map(|spec| {
            if spec.rotation == 0.0 {
                return en.clone();
            }
            let own = orthonormalize(gaussian_matrix(d, l, &mut Rng::new(spec.map_seed).substream("map")));
            orthonormalize(&en * (1.0 - spec.rotation) + own * spec.rotation)
        })
        .collect();
    Maps { en, langs }
}

fn feature(map: &DMatrix<f64>, latent: &DVector<f64>, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (map * latent).iter().copied().collect();
    if sigma > 0.0 {
        for x in &mut v {
            *x += sigma * rng.normal();
        }
    }
    v
}

struct Split {
    pair_ids: Vec<String>,
    latents: Vec<DVector<f64>>,
    passage_latents: Vec<DVector<f64>>,
}

fn split_latents(cfg: &SyntheticConfig, split: &str, prefix: &str, n: usize) -> Split {
    let root = Rng::new(cfg.seed).substream(split);
    let l = cfg.latent_dim;
    let n_twins = ((cfg.hard_twin_fraction * n as f64).round() as usize).min(n / 2);
    let n_base = n - n_twins;

    let mut rng = root.substream("latent");
    let mut latents: Vec<DVector<f64>> = (0..n_base).map(|_| DVector::from_fn(l, |_, _| rng.normal())).collect();
    let mut twin_rng = root.substream("twin");
    for parent in twin_rng.sample_indices(n_base, n_twins) {
        let u = unit_vector(l, &mut twin_rng);
        latents.push(&latents[parent] + u * TWIN_SHIFT);
    }
    root.substream("order").shuffle(&mut latents);

    let mut delta = root.substream("passage");
    let passage_latents = latents
        .iter()
        .map(|z| z + DVector::from_fn(l, |_, _| delta.normal()) * PASSAGE_SHIFT)
        .collect();
    Split {
        pair_ids: (0..n).map(|i| format!("{prefix}{i:05}")).collect(),
        latents,
        passage_latents,
    }
}

fn emit(
    out: &mut Vec<TextRecord>,
    split: &Split,
    lang: &str,
    role: Role,
    map: &DMatrix<f64>,
    sigma: f64,
    mut rng: Rng,
) {
    let latents = match role {
        Role::Query => &split.latents,
        Role::Passage => &split.passage_latents,
    };
    for (pair_id, z) in split.pair_ids.iter().zip(latents) {
        out.push(TextRecord {
            id: match role {
                Role::Query => query_id(lang, pair_id),
                Role::Passage => passage_id(lang, pair_id),
            },
            lang: lang.to_string(),
            role,
            pair_id: pair_id.clone(),
            vector: feature(map, z, sigma, &mut rng),
        });
    }
}

/// Generates the training corpus, its example skeletons and the held-out
/// evaluation corpus. Fully determined by `cfg`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let maps = build_maps(cfg);
    let noise = |split: &str, lang: &str, role: Role| {
        Rng::new(cfg.seed).substream(&format!("{split}/noise/{lang}/{}", role.as_str()))
    };

    let train = split_latents(cfg, "train", TRAIN_PREFIX, cfg.n_pairs);
    let mut corpus = Vec::new();
    emit(&mut corpus, &train, ENGLISH, Role::Query, &maps.en, cfg.en_noise_sigma, noise("train", ENGLISH, Role::Query));
    emit(&mut corpus, &train, ENGLISH, Role::Passage, &maps.en, cfg.en_noise_sigma, noise("train", ENGLISH, Role::Passage));
    for (spec, map) in cfg.languages.iter().zip(&maps.langs) {
        emit(&mut corpus, &train, &spec.code, Role::Query, map, spec.noise_sigma, noise("train", &spec.code, Role::Query));
    }

    let n = cfg.n_pairs;
    let mut examples = Vec::with_capacity(n * cfg.languages.len());
    for (k, spec) in cfg.languages.iter().enumerate() {
        for i in 0..n {
            examples.push(TrainingExample {
                pair_id: train.pair_ids[i].clone(),
                lang: spec.code.clone(),
                q_en: corpus[i].clone(),
                p_en_pos: corpus[n + i].clone(),
                q_tgt: corpus[(2 + k) * n + i].clone(),
                neg_passage_ids: Vec::new(),
                neg_query_ids: Vec::new(),
            });
        }
    }

    let mut eval_corpus = Vec::new();
    if cfg.n_eval_pairs > 0 {
        let eval = split_latents(cfg, "eval", EVAL_PREFIX, cfg.n_eval_pairs);
        for role in [Role::Query, Role::Passage] {
            emit(&mut eval_corpus, &eval, ENGLISH, role, &maps.en, cfg.en_noise_sigma, noise("eval", ENGLISH, role));
        }
        for (spec, map) in cfg.languages.iter().zip(&maps.langs) {
            for role in [Role::Query, Role::Passage] {
                emit(&mut eval_corpus, &eval, &spec.code, role, map, spec.noise_sigma, noise("eval", &spec.code, role));
            }
        }
    }

    Ok(SyntheticDataset {
        corpus,
        examples,
        eval_corpus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_examples, Corpus};
    use crate::tensor::{dot, l2_normalize};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_pairs: 200,
            n_eval_pairs: 50,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn counting_contract() {
        let cfg = SyntheticConfig {
            n_eval_pairs: 0,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic_corpus(&cfg).unwrap();
        let corpus = Corpus::new(ds.corpus.clone()).unwrap();
        assert_eq!(corpus.select("en", Role::Passage).len(), 1000);
        assert_eq!(corpus.select("en", Role::Query).len(), 1000);
        for l in &cfg.languages {
            assert_eq!(corpus.select(&l.code, Role::Query).len(), 1000);
            assert_eq!(corpus.select(&l.code, Role::Passage).len(), 0);
        }
        assert_eq!(ds.examples.len(), 3000);
        assert!(ds.eval_corpus.is_empty());
    }

    #[test]
    fn degenerate_language_copies_english_queries() {
        let cfg = SyntheticConfig {
            en_noise_sigma: 0.0,
            languages: vec![LanguageSpec {
                code: "xx".into(),
                noise_sigma: 0.0,
                map_seed: 9,
                rotation: 0.0,
            }],
            ..small()
        };
        let ds = generate_synthetic_corpus(&cfg).unwrap();
        for e in &ds.examples {
            assert_eq!(e.q_tgt.vector, e.q_en.vector);
        }
    }

    #[test]
    fn maps_have_orthonormal_columns() {
        let maps = build_maps(&small());
        for m in std::iter::once(&maps.en).chain(&maps.langs) {
            let gram = m.transpose() * m;
            assert!((gram - DMatrix::identity(16, 16)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&small()).unwrap().write(a.path()).unwrap();
        generate_synthetic_corpus(&small()).unwrap().write(b.path()).unwrap();
        for f in ["corpus.jsonl", "train.jsonl", "qrels.tsv", "eval_corpus.jsonl", "eval_qrels.tsv"] {
            let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
            assert!(!x.is_empty());
            assert_eq!(x, y, "{f}");
        }
        let other = SyntheticConfig { seed: 1, ..small() };
        assert_ne!(generate_synthetic_corpus(&other).unwrap(), generate_synthetic_corpus(&small()).unwrap());
    }

    #[test]
    fn written_files_load_back_equal() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_corpus(&small()).unwrap();
        ds.write(dir.path()).unwrap();
        let back = load_examples(&dir.path().join("corpus.jsonl"), &dir.path().join("train.jsonl"), 64).unwrap();
        assert_eq!(back, ds.examples);
    }

    #[test]
    fn gold_passage_is_closer_than_a_random_one() {
        let ds = generate_synthetic_corpus(&SyntheticConfig { n_pairs: 600, ..small() }).unwrap();
        let ex: Vec<_> = ds.examples.iter().filter(|e| e.lang == "hrl").collect();
        let unit = |v: &[f64]| l2_normalize(v).unwrap();
        let n = ex.len();
        let (mut gold, mut random) = (0.0, 0.0);
        for (i, e) in ex.iter().enumerate() {
            let q = unit(&e.q_en.vector);
            gold += dot(&q, &unit(&e.p_en_pos.vector));
            random += dot(&q, &unit(&ex[(i + n / 2) % n].p_en_pos.vector));
        }
        assert!((gold - random) / n as f64 > 0.1);
    }

    #[test]
    fn eval_split_has_every_role_and_aligned_qrels() {
        let ds = generate_synthetic_corpus(&small()).unwrap();
        let corpus = Corpus::new(ds.eval_corpus.clone()).unwrap();
        for lang in ["en", "hrl", "mrl", "lrl"] {
            assert_eq!(corpus.select(lang, Role::Query).len(), 50);
            assert_eq!(corpus.select(lang, Role::Passage).len(), 50);
        }
        let qrels = ds.eval_qrels();
        assert_eq!(qrels.len(), 4 * 50 * 4);
        assert!(qrels.iter().all(|(q, p, _)| q[q.len() - 6..] == p[p.len() - 6..]));
        // training and held-out pair ids never collide
        assert!(ds.corpus.iter().all(|r| r.pair_id.starts_with(TRAIN_PREFIX)));
        assert!(ds.eval_corpus.iter().all(|r| r.pair_id.starts_with(EVAL_PREFIX)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SyntheticConfig { latent_dim: 1, ..small() },
            SyntheticConfig { latent_dim: 80, ..small() },
            SyntheticConfig { hard_twin_fraction: 1.5, ..small() },
            SyntheticConfig { en_noise_sigma: -1.0, ..small() },
            SyntheticConfig { languages: vec![], ..small() },
        ] {
            assert!(generate_synthetic_corpus(&cfg).is_err());
        }
    }
}

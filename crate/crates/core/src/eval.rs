//! Retrieval metrics, the four-direction evaluation grid, and the gold-pair
//! alignment report.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{feature_matrix, Corpus, Qrels, Role, TextRecord, ENGLISH};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Ranked candidates for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query_id: String,
    pub ranked: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub queries: Vec<QueryRanking>,
}

impl RetrievalRun {
    /// TREC-style lines: `query_id <TAB> passage_id <TAB> rank <TAB> score`.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for q in &self.queries {
            for (rank, (pid, score)) in q.ranked.iter().enumerate() {
                writeln!(out, "{}\t{}\t{}\t{}", q.query_id, pid, rank + 1, score).unwrap();
            }
        }
        out
    }
}

/// Per-query values in run order and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricValues {
    pub per_query: Vec<f64>,
    pub mean: f64,
}

fn judgements<'a>(qrels: &'a Qrels, query: &str) -> Result<&'a [(String, u8)]> {
    qrels
        .get(query)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::MissingQrels(query.to_string()))
}

fn per_query<F>(run: &RetrievalRun, qrels: &Qrels, k: usize, f: F) -> Result<MetricValues>
where
    F: Fn(&QueryRanking, &HashMap<&str, u8>) -> f64,
{
    if k == 0 {
        return Err(Error::Config("eval: cutoff k must be at least 1".into()));
    }
    if run.queries.is_empty() {
        return Err(Error::DegenerateDataset("retrieval run has no queries".into()));
    }
    let mut values = Vec::with_capacity(run.queries.len());
    for q in &run.queries {
        let rel: HashMap<&str, u8> = judgements(qrels, &q.query_id)?
            .iter()
            .map(|(p, r)| (p.as_str(), *r))
            .collect();
        values.push(f(q, &rel));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(MetricValues { per_query: values, mean })
}

fn discount(rank: usize) -> f64 {
    1.0 / (rank as f64 + 1.0).log2()
}

/// nDCG@k with gains `rel` and discount `1 / log2(rank + 1)`.
pub fn ndcg_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<MetricValues> {
    per_query(run, qrels, k, |q, rel| {
        let dcg: f64 = q
            .ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (p, _))| f64::from(*rel.get(p.as_str()).unwrap_or(&0)) * discount(i + 1))
            .sum();
        let mut ideal: Vec<u8> = rel.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| f64::from(g) * discount(i + 1))
            .sum();
        if idcg > 0.0 {
            dcg / idcg
        } else {
            0.0
        }
    })
}

/// Share of relevant passages found in the top `k`.
pub fn recall_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<MetricValues> {
    per_query(run, qrels, k, |q, rel| {
        let relevant = rel.values().filter(|&&g| g > 0).count();
        if relevant == 0 {
            return 0.0;
        }
        let found = q
            .ranked
            .iter()
            .take(k)
            .filter(|(p, _)| rel.get(p.as_str()).is_some_and(|&g| g > 0))
            .count();
        found as f64 / relevant as f64
    })
}

/// Exhaustive cosine ranking of `passages` for every query, keeping the top
/// `depth`. Ties are broken by ascending passage id.
pub fn retrieve(
    encoder: &dyn Encoder,
    queries: &[&TextRecord],
    passages: &[&TextRecord],
    depth: usize,
) -> Result<RetrievalRun> {
    if queries.is_empty() || passages.is_empty() {
        return Err(Error::DegenerateDataset(format!(
            "retrieval needs queries and passages, got {} and {}",
            queries.len(),
            passages.len()
        )));
    }
    let q_emb = encoder.encode(&feature_matrix(queries.iter().copied())?)?;
    let p_emb = encoder.encode(&feature_matrix(passages.iter().copied())?)?;
    let mut run = RetrievalRun::default();
    for (i, q) in queries.iter().enumerate() {
        let mut scored: Vec<(usize, f64)> = p_emb
            .iter_rows()
            .enumerate()
            .map(|(j, p)| (j, dot(q_emb.row(i), p)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| passages[a.0].id.cmp(&passages[b.0].id))
        });
        scored.truncate(depth);
        run.queries.push(QueryRanking {
            query_id: q.id.clone(),
            ranked: scored.into_iter().map(|(j, s)| (passages[j].id.clone(), s)).collect(),
        });
    }
    Ok(run)
}

/// Passage language / query language combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// English passages, target-language queries (the training direction).
    EnglishLang,
    /// Target-language passages, English queries.
    LangEnglish,
    EnglishEnglish,
    LangLang,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::EnglishLang,
        Direction::LangEnglish,
        Direction::EnglishEnglish,
        Direction::LangLang,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Direction::EnglishLang => "P_en/Q_l",
            Direction::LangEnglish => "P_l/Q_en",
            Direction::EnglishEnglish => "P_en/Q_en",
            Direction::LangLang => "P_l/Q_l",
        }
    }

    /// (passage language, query language) for target language `lang`.
    pub fn languages(self, lang: &str) -> (&str, &str) {
        match self {
            Direction::EnglishLang => (ENGLISH, lang),
            Direction::LangEnglish => (lang, ENGLISH),
            Direction::EnglishEnglish => (ENGLISH, ENGLISH),
            Direction::LangLang => (lang, lang),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub direction: Direction,
    /// Target language; `en` for the monolingual English row.
    pub lang: String,
    pub n_queries: usize,
    pub ndcg_at_10: f64,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMean {
    pub direction: Direction,
    pub ndcg_at_10: f64,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<DirectionMetrics>,
    pub means: Vec<DirectionMean>,
}

impl EvalReport {
    pub fn row(&self, direction: Direction, lang: &str) -> Option<&DirectionMetrics> {
        self.rows.iter().find(|r| r.direction == direction && r.lang == lang)
    }

    pub fn mean(&self, direction: Direction) -> Option<&DirectionMean> {
        self.means.iter().find(|m| m.direction == direction)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:<5} {:>7} {:>9} {:>9} {:>10}\n",
            "direction", "lang", "queries", "nDCG@10", "R@1", "R@10"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<10} {:<5} {:>7} {:>9.4} {:>9.4} {:>10.4}",
                r.direction.label(),
                r.lang,
                r.n_queries,
                r.ndcg_at_10,
                r.recall_at_1,
                r.recall_at_10
            )
            .unwrap();
        }
        for m in &self.means {
            writeln!(
                out,
                "{:<10} {:<5} {:>7} {:>9.4} {:>9.4} {:>10.4}",
                m.direction.label(),
                "mean",
                "",
                m.ndcg_at_10,
                m.recall_at_1,
                m.recall_at_10
            )
            .unwrap();
        }
        out
    }
}

/// Keeps judgements whose passage is in the pool; every query must retain
/// at least one.
fn restrict_qrels(qrels: &Qrels, queries: &[&TextRecord], passages: &[&TextRecord]) -> Result<Qrels> {
    let pool: HashSet<&str> = passages.iter().map(|p| p.id.as_str()).collect();
    let mut out = Qrels::new();
    for q in queries {
        let kept: Vec<(String, u8)> = judgements(qrels, &q.id)?
            .iter()
            .filter(|(p, _)| pool.contains(p.as_str()))
            .cloned()
            .collect();
        if kept.is_empty() {
            return Err(Error::MissingQrels(q.id.clone()));
        }
        out.insert(q.id.clone(), kept);
    }
    Ok(out)
}

/// Ranks `passages` for `queries` and scores the run at cutoffs 1 and 10.
pub fn run_retrieval_eval(
    encoder: &dyn Encoder,
    queries: &[&TextRecord],
    passages: &[&TextRecord],
    qrels: &Qrels,
    depth: usize,
) -> Result<(RetrievalRun, [f64; 3])> {
    let qrels = restrict_qrels(qrels, queries, passages)?;
    let run = retrieve(encoder, queries, passages, depth.max(10))?;
    let metrics = [
        ndcg_at_k(&run, &qrels, 10)?.mean,
        recall_at_k(&run, &qrels, 1)?.mean,
        recall_at_k(&run, &qrels, 10)?.mean,
    ];
    Ok((run, metrics))
}

/// Labelled runs produced alongside a report.
pub type NamedRuns = Vec<(String, RetrievalRun)>;

/// Evaluates every requested direction for every target language found in
/// `corpus`.
pub fn evaluate_directions(
    encoder: &dyn Encoder,
    corpus: &Corpus,
    qrels: &Qrels,
    directions: &[Direction],
    depth: usize,
) -> Result<(EvalReport, NamedRuns)> {
    let langs: Vec<String> = corpus.languages().into_iter().filter(|l| l != ENGLISH).collect();
    if corpus.is_empty() {
        return Err(Error::DegenerateDataset("evaluation corpus is empty".into()));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut means = Vec::new();
    for &direction in directions {
        let targets: Vec<&str> = if direction == Direction::EnglishEnglish {
            vec![ENGLISH]
        } else {
            langs.iter().map(String::as_str).collect()
        };
        let start = rows.len();
        for lang in targets {
            let (p_lang, q_lang) = direction.languages(lang);
            let queries = corpus.select(q_lang, Role::Query);
            let passages = corpus.select(p_lang, Role::Passage);
            let (run, [ndcg, r1, r10]) = run_retrieval_eval(encoder, &queries, &passages, qrels, depth)?;
            runs.push((format!("{p_lang}-{q_lang}"), run));
            rows.push(DirectionMetrics {
                direction,
                lang: lang.to_string(),
                n_queries: queries.len(),
                ndcg_at_10: ndcg,
                recall_at_1: r1,
                recall_at_10: r10,
            });
        }
        let part = &rows[start..];
        let avg = |f: fn(&DirectionMetrics) -> f64| part.iter().map(f).sum::<f64>() / part.len() as f64;
        means.push(DirectionMean {
            direction,
            ndcg_at_10: avg(|r| r.ndcg_at_10),
            recall_at_1: avg(|r| r.recall_at_1),
            recall_at_10: avg(|r| r.recall_at_10),
        });
    }
    Ok((EvalReport { rows, means }, runs))
}

/// One projected embedding for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub lang: String,
    pub role: Role,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageDistance {
    pub lang: String,
    pub n_pairs: usize,
    /// Mean of `1 - cos(q_l, p_en)` over gold pairs.
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub languages: Vec<LanguageDistance>,
    #[serde(skip)]
    pub points: Vec<ProjectedPoint>,
}

impl AlignmentReport {
    pub fn distance(&self, lang: &str) -> Option<f64> {
        self.languages.iter().find(|l| l.lang == lang).map(|l| l.mean_distance)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,lang,role,x,y\n");
        for p in &self.points {
            writeln!(out, "{},{},{},{},{}", p.id, p.lang, p.role.as_str(), p.x, p.y).unwrap();
        }
        out
    }
}

/// Top-two principal component scores of the rows of `m`. Component signs
/// are fixed so each axis has its largest-magnitude loading positive.
pub fn pca_2d(m: &Matrix) -> Vec<(f64, f64)> {
    let (n, d) = (m.rows(), m.cols());
    if n == 0 {
        return Vec::new();
    }
    let x = DMatrix::from_row_slice(n, d, m.data());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    (0..n)
        .map(|i| {
            let row: Vec<f64> = centered.row(i).iter().copied().collect();
            let coord = |k: usize| axes.get(k).map_or(0.0, |a| dot(&row, a));
            (coord(0), coord(1))
        })
        .collect()
}

/// Gold-pair distances per language for `(target query, English gold
/// passage)` pairs, plus a 2D projection of every distinct embedding.
pub fn alignment_report(encoder: &dyn Encoder, pairs: &[(&TextRecord, &TextRecord)]) -> Result<AlignmentReport> {
    let mut records: Vec<&TextRecord> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (q, p) in pairs {
        for r in [*q, *p] {
            index.entry(r.id.as_str()).or_insert_with(|| {
                records.push(r);
                records.len() - 1
            });
        }
    }
    if records.is_empty() {
        return Ok(AlignmentReport { languages: Vec::new(), points: Vec::new() });
    }
    let emb = encoder.encode(&feature_matrix(records.iter().copied())?)?;

    let mut languages: Vec<LanguageDistance> = Vec::new();
    for (q, p) in pairs {
        let d = 1.0 - dot(emb.row(index[q.id.as_str()]), emb.row(index[p.id.as_str()]));
        match languages.iter_mut().find(|l| l.lang == q.lang) {
            Some(l) => {
                l.n_pairs += 1;
                l.mean_distance += d;
            }
            None => languages.push(LanguageDistance { lang: q.lang.clone(), n_pairs: 1, mean_distance: d }),
        }
    }
    for l in &mut languages {
        l.mean_distance /= l.n_pairs as f64;
    }

    let points = records
        .iter()
        .zip(pca_2d(&emb))
        .map(|(r, (x, y))| ProjectedPoint {
            id: r.id.clone(),
            lang: r.lang.clone(),
            role: r.role,
            x,
            y,
        })
        .collect();
    Ok(AlignmentReport { languages, points })
}

/// Every `(target query, English passage)` gold pair of `corpus`.
pub fn gold_pairs(corpus: &Corpus) -> Vec<(&TextRecord, &TextRecord)> {
    let passages: HashMap<&str, &TextRecord> = corpus
        .select(ENGLISH, Role::Passage)
        .into_iter()
        .map(|p| (p.pair_id.as_str(), p))
        .collect();
    corpus
        .records()
        .iter()
        .filter(|r| r.role == Role::Query && r.lang != ENGLISH)
        .filter_map(|q| passages.get(q.pair_id.as_str()).map(|p| (q, *p)))
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

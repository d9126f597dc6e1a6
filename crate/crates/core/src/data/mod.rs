//! Dataset schemas, JSONL ingestion, dedup, batching and multilingual mixing.

mod synthetic;

pub use synthetic::{
    generate_synthetic_corpus, LanguageSpec, SyntheticConfig, SyntheticDataset, EVAL_PREFIX,
    TRAIN_PREFIX,
};

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const ENGLISH: &str = "en";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Passage,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Passage => "passage",
        }
    }
}

/// One text unit, represented by its fixed input feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub id: String,
    pub lang: String,
    pub role: Role,
    pub pair_id: String,
    pub vector: Vec<f64>,
}

/// One aligned training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub pair_id: String,
    /// Target language code.
    pub lang: String,
    pub q_en: TextRecord,
    pub p_en_pos: TextRecord,
    pub q_tgt: TextRecord,
    pub neg_passage_ids: Vec<String>,
    pub neg_query_ids: Vec<String>,
}

/// Line format of `train.jsonl`: records are referenced by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleLine {
    pair_id: String,
    lang: String,
    q_en: String,
    p_en_pos: String,
    q_tgt: String,
    #[serde(default)]
    neg_passage_ids: Vec<String>,
    #[serde(default)]
    neg_query_ids: Vec<String>,
}

impl TrainingExample {
    fn to_line(&self) -> ExampleLine {
        ExampleLine {
            pair_id: self.pair_id.clone(),
            lang: self.lang.clone(),
            q_en: self.q_en.id.clone(),
            p_en_pos: self.p_en_pos.id.clone(),
            q_tgt: self.q_tgt.id.clone(),
            neg_passage_ids: self.neg_passage_ids.clone(),
            neg_query_ids: self.neg_query_ids.clone(),
        }
    }
}

/// Records indexed by id, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    records: Vec<TextRecord>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(records: Vec<TextRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DegenerateDataset(format!("duplicate record id `{}`", r.id)));
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[TextRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TextRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// Records of one language and role, in corpus order.
    pub fn select(&self, lang: &str, role: Role) -> Vec<&TextRecord> {
        self.records
            .iter()
            .filter(|r| r.lang == lang && r.role == role)
            .collect()
    }

    /// Languages in order of first appearance.
    pub fn languages(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.lang.as_str()))
            .map(|r| r.lang.clone())
            .collect()
    }
}

/// Stacks record vectors into a matrix.
pub fn feature_matrix<'a, I>(records: I) -> Result<Matrix>
where
    I: IntoIterator<Item = &'a TextRecord>,
{
    let rows: Vec<&[f64]> = records.into_iter().map(|r| r.vector.as_slice()).collect();
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    Matrix::from_rows(&rows)
}

/// Keeps the first example for every gold passage id, preserving order.
pub fn dedupe_by_passage(examples: Vec<TrainingExample>) -> Vec<TrainingExample> {
    let mut seen = HashSet::new();
    examples
        .into_iter()
        .filter(|e| seen.insert(e.p_en_pos.id.clone()))
        .collect()
}

/// Groups examples by target language, in order of first appearance.
pub fn group_by_language(examples: Vec<TrainingExample>) -> Vec<(String, Vec<TrainingExample>)> {
    let mut groups: Vec<(String, Vec<TrainingExample>)> = Vec::new();
    for e in examples {
        match groups.iter_mut().find(|(l, _)| *l == e.lang) {
            Some((_, g)) => g.push(e),
            None => groups.push((e.lang.clone(), vec![e])),
        }
    }
    groups
}

/// Shuffles example indices with `rng` and chunks them. A short final chunk
/// is kept when it holds at least two examples.
pub fn make_batches(
    examples: &[TrainingExample],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
    }
    if examples.len() < 2 {
        return Err(Error::DegenerateDataset(format!(
            "{} examples cannot form a contrastive batch",
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect())
}

/// Takes `n_per_lang` examples from every language with no pair id used
/// twice, then shuffles the mixture.
pub fn mix_multilingual(
    per_language: &[(String, Vec<TrainingExample>)],
    n_per_lang: usize,
    rng: &mut Rng,
) -> Result<Vec<TrainingExample>> {
    let mut used: HashSet<&str> = HashSet::new();
    let mut out = Vec::with_capacity(n_per_lang * per_language.len());
    for (lang, examples) in per_language {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rng.substream(lang).shuffle(&mut order);
        let picked: Vec<&TrainingExample> = order
            .iter()
            .map(|&i| &examples[i])
            .filter(|e| !used.contains(e.pair_id.as_str()))
            .take(n_per_lang)
            .collect();
        if picked.len() < n_per_lang {
            return Err(Error::InsufficientData {
                lang: lang.clone(),
                needed: n_per_lang,
                available: picked.len(),
            });
        }
        for e in picked {
            used.insert(&e.pair_id);
            out.push(e.clone());
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[TextRecord]) -> Result<()> {
    write_lines(path, records)
}

/// Reads `corpus.jsonl`, checking every vector has `dim` finite entries.
pub fn load_corpus(path: &Path, dim: usize) -> Result<Corpus> {
    let mut records = Vec::new();
    for (line, r) in read_lines::<TextRecord>(path)? {
        let bad = if r.vector.len() != dim {
            Some(format!("vector has {} entries, expected {dim}", r.vector.len()))
        } else if !r.vector.iter().all(|x| x.is_finite()) {
            Some("vector has non-finite entries".to_string())
        } else {
            None
        };
        if let Some(message) = bad {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("record `{}`: {message}", r.id),
            });
        }
        records.push(r);
    }
    Corpus::new(records)
}

pub fn write_examples(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    write_lines(path, examples.iter().map(TrainingExample::to_line))
}

/// Reads `train.jsonl` against an already loaded corpus.
pub fn load_examples_with(corpus: &Corpus, train_path: &Path) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for (line, l) in read_lines::<ExampleLine>(train_path)? {
        let resolve = |id: &str| -> Result<TextRecord> {
            corpus.get(id).cloned().ok_or_else(|| Error::Reference {
                path: train_path.to_path_buf(),
                line,
                id: id.to_string(),
            })
        };
        let (q_en, p_en_pos, q_tgt) = (resolve(&l.q_en)?, resolve(&l.p_en_pos)?, resolve(&l.q_tgt)?);
        for id in l.neg_passage_ids.iter().chain(&l.neg_query_ids) {
            resolve(id)?;
        }
        let bad = if [&q_en, &p_en_pos, &q_tgt].iter().any(|r| r.pair_id != l.pair_id) {
            Some("records do not share the example pair_id")
        } else if l.neg_passage_ids.contains(&p_en_pos.id) {
            Some("gold passage listed as a negative")
        } else if l.neg_query_ids.contains(&q_tgt.id) {
            Some("parallel query listed as a negative")
        } else {
            None
        };
        if let Some(message) = bad {
            return Err(Error::Parse {
                path: train_path.to_path_buf(),
                line,
                message: format!("example `{}`: {message}", l.pair_id),
            });
        }
        out.push(TrainingExample {
            pair_id: l.pair_id,
            lang: l.lang,
            q_en,
            p_en_pos,
            q_tgt,
            neg_passage_ids: l.neg_passage_ids,
            neg_query_ids: l.neg_query_ids,
        });
    }
    Ok(out)
}

/// Reads a corpus and the examples referencing it.
pub fn load_examples(corpus_path: &Path, train_path: &Path, dim: usize) -> Result<Vec<TrainingExample>> {
    let corpus = load_corpus(corpus_path, dim)?;
    load_examples_with(&corpus, train_path)
}

/// Relevance judgements: query id → relevant passage ids.
pub type Qrels = HashMap<String, Vec<(String, u8)>>;

/// Writes `query_id <TAB> passage_id <TAB> relevance` lines in the given order.
pub fn write_qrels(path: &Path, rows: &[(String, String, u8)]) -> Result<()> {
    let mut w = create(path)?;
    for (q, p, rel) in rows {
        writeln!(w, "{q}\t{p}\t{rel}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err("expected query_id, passage_id and relevance"));
        }
        let rel = match fields[2].trim() {
            "0" => 0,
            "1" => 1,
            _ => return Err(parse_err("relevance must be 0 or 1")),
        };
        qrels
            .entry(fields[0].to_string())
            .or_default()
            .push((fields[1].to_string(), rel));
    }
    Ok(qrels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, lang: &str, role: Role, pair: &str) -> TextRecord {
        TextRecord {
            id: id.into(),
            lang: lang.into(),
            role,
            pair_id: pair.into(),
            vector: vec![1.0, 0.0],
        }
    }

    fn example(pair: &str, lang: &str, passage: &str) -> TrainingExample {
        TrainingExample {
            pair_id: pair.into(),
            lang: lang.into(),
            q_en: record(&format!("q-en-{pair}"), "en", Role::Query, pair),
            p_en_pos: record(passage, "en", Role::Passage, pair),
            q_tgt: record(&format!("q-{lang}-{pair}"), lang, Role::Query, pair),
            neg_passage_ids: vec![],
            neg_query_ids: vec![],
        }
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let ex = vec![example("a", "x", "p1"), example("b", "x", "p1"), example("c", "x", "p2")];
        let out = dedupe_by_passage(ex.clone());
        assert_eq!(out.iter().map(|e| e.pair_id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        let unique = vec![ex[0].clone(), ex[2].clone()];
        assert_eq!(dedupe_by_passage(unique.clone()), unique);
    }

    fn n_examples(n: usize) -> Vec<TrainingExample> {
        (0..n).map(|i| example(&format!("t{i}"), "x", &format!("p{i}"))).collect()
    }

    #[test]
    fn batch_sizes() {
        let sizes = |n, b| {
            make_batches(&n_examples(n), b, &mut Rng::new(1))
                .unwrap()
                .iter()
                .map(Vec::len)
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(130, 64), [64, 64, 2]);
        assert_eq!(sizes(65, 64), [64]);
        assert!(matches!(
            make_batches(&n_examples(1), 64, &mut Rng::new(1)),
            Err(Error::DegenerateDataset(_))
        ));
        assert!(make_batches(&n_examples(10), 1, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn batches_are_deterministic_and_cover_each_index_once() {
        let ex = n_examples(100);
        let a = make_batches(&ex, 16, &mut Rng::new(4)).unwrap();
        assert_eq!(a, make_batches(&ex, 16, &mut Rng::new(4)).unwrap());
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn mixing_is_disjoint_and_exact() {
        let per_lang: Vec<(String, Vec<TrainingExample>)> = ["x", "y"]
            .iter()
            .map(|l| {
                let ex = (0..200).map(|i| example(&format!("t{i}"), l, &format!("p{i}"))).collect();
                (l.to_string(), ex)
            })
            .collect();
        let mixed = mix_multilingual(&per_lang, 100, &mut Rng::new(2)).unwrap();
        assert_eq!(mixed.len(), 200);
        assert_eq!(mixed.iter().filter(|e| e.lang == "x").count(), 100);
        let pairs: HashSet<&str> = mixed.iter().map(|e| e.pair_id.as_str()).collect();
        assert_eq!(pairs.len(), 200);
        let again = mix_multilingual(&per_lang, 100, &mut Rng::new(2)).unwrap();
        assert_eq!(mixed, again);
    }

    #[test]
    fn mixing_reports_the_short_language() {
        let per_lang = vec![
            ("x".to_string(), n_examples(120)),
            ("y".to_string(), (0..50).map(|i| example(&format!("u{i}"), "y", &format!("r{i}"))).collect()),
        ];
        match mix_multilingual(&per_lang, 100, &mut Rng::new(0)) {
            Err(Error::InsufficientData { lang, needed, available }) => {
                assert_eq!((lang.as_str(), needed, available), ("y", 100, 50));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ex = n_examples(3);
        let mut records = Vec::new();
        for e in &ex {
            records.extend([e.q_en.clone(), e.p_en_pos.clone(), e.q_tgt.clone()]);
        }
        let corpus = dir.path().join("corpus.jsonl");
        let train = dir.path().join("train.jsonl");
        write_corpus(&corpus, &records).unwrap();
        write_examples(&train, &ex).unwrap();
        assert_eq!(load_examples(&corpus, &train, 2).unwrap(), ex);

        fs::write(&train, "").unwrap();
        assert!(load_examples(&corpus, &train, 2).unwrap().is_empty());

        let mut line = serde_json::to_string(&ex[1].to_line()).unwrap();
        line = line.replace("p1", "missing");
        fs::write(&train, format!("{}\n{line}\n", serde_json::to_string(&ex[0].to_line()).unwrap())).unwrap();
        match load_examples(&corpus, &train, 2) {
            Err(Error::Reference { line, id, .. }) => assert_eq!((line, id.as_str()), (2, "missing")),
            other => panic!("{other:?}"),
        }

        fs::write(&train, "{not json\n").unwrap();
        assert!(matches!(load_examples(&corpus, &train, 2), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(load_corpus(&corpus, 3), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn qrels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qrels.tsv");
        let rows = vec![("q1".to_string(), "p1".to_string(), 1), ("q1".to_string(), "p2".to_string(), 0)];
        write_qrels(&path, &rows).unwrap();
        let q = load_qrels(&path).unwrap();
        assert_eq!(q["q1"], vec![("p1".to_string(), 1), ("p2".to_string(), 0)]);
        fs::write(&path, "q1\tp1\t2\n").unwrap();
        assert!(load_qrels(&path).is_err());
    }
}

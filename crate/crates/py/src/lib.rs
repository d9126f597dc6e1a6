//! Python bindings. Matrices cross the boundary as lists of rows.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use clear_core::cli;
use clear_core::data::{generate_synthetic_corpus, Qrels, SyntheticConfig};
use clear_core::encoder::{encode_batch, load_checkpoint, AdapterParams};
use clear_core::eval::{ndcg_at_k, recall_at_k, QueryRanking, RetrievalRun};
use clear_core::losses::{
    baseline_infonce_forward, cl_reversed_forward, clear_forward_with, kl_alignment_forward, nce_en_forward,
    BatchGrads, ClearOptions, ContrastiveBatch, LossWeights, TermOutput,
};
use clear_core::pipeline::{prepare, train_and_evaluate, PipelineConfig};
use clear_core::rng::Rng;
use clear_core::tensor::Matrix;
use clear_core::training::{lr_at_step, LossSpec};

create_exception!(clear_py, ClearError, PyException);

fn err(e: clear_core::Error) -> PyErr {
    ClearError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>], cols_hint: usize) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols_hint));
    }
    Matrix::from_rows(rows).map_err(err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn batch(
    q_en: Vec<Vec<f64>>,
    p_en_pos: Vec<Vec<f64>>,
    p_en_neg: Vec<Vec<f64>>,
    q_tgt_pos: Vec<Vec<f64>>,
    q_tgt_neg: Vec<Vec<f64>>,
    tau: f64,
) -> PyResult<ContrastiveBatch> {
    let d = q_en.first().map_or(0, Vec::len);
    let ids = (0..q_en.len()).map(|i| format!("ex{i}")).collect();
    ContrastiveBatch::new(
        matrix(&q_en, d)?,
        matrix(&p_en_pos, d)?,
        matrix(&p_en_neg, d)?,
        matrix(&q_tgt_pos, d)?,
        matrix(&q_tgt_neg, d)?,
        tau,
        ids,
    )
    .map_err(err)
}

fn grads_dict<'py>(py: Python<'py>, g: &BatchGrads) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let names = ["q_en", "p_en_pos", "p_en_neg", "q_tgt_pos", "q_tgt_neg"];
    for (name, m) in names.iter().zip(g.fields()) {
        d.set_item(name, to_rows(m))?;
    }
    Ok(d)
}

fn term<'py>(py: Python<'py>, out: clear_core::Result<TermOutput>) -> PyResult<(f64, Bound<'py, PyDict>)> {
    let out = out.map_err(err)?;
    Ok((out.value, grads_dict(py, &out.grads)?))
}

macro_rules! term_fn {
    ($name:ident, $forward:path, $doc:literal) => {
        #[doc = $doc]
        #[pyfunction]
        #[pyo3(signature = (q_en, p_en_pos, p_en_neg, q_tgt_pos, q_tgt_neg, tau = 0.05))]
        fn $name<'py>(
            py: Python<'py>,
            q_en: Vec<Vec<f64>>,
            p_en_pos: Vec<Vec<f64>>,
            p_en_neg: Vec<Vec<f64>>,
            q_tgt_pos: Vec<Vec<f64>>,
            q_tgt_neg: Vec<Vec<f64>>,
            tau: f64,
        ) -> PyResult<(f64, Bound<'py, PyDict>)> {
            let b = batch(q_en, p_en_pos, p_en_neg, q_tgt_pos, q_tgt_neg, tau)?;
            term(py, $forward(&b))
        }
    };
}

term_fn!(nce_en, nce_en_forward, "English InfoNCE: `(value, gradients)`.");
term_fn!(cl_reversed, cl_reversed_forward, "Reversed cross-lingual term anchored on English passages.");
term_fn!(kl_alignment, kl_alignment_forward, "KL between English and cross-lingual similarity distributions.");
term_fn!(infonce_baseline, baseline_infonce_forward, "Target-query InfoNCE baseline.");

/// Composite loss: `(total, {"nce_en", "cl", "kl"}, gradients)`.
#[pyfunction]
#[pyo3(signature = (q_en, p_en_pos, p_en_neg, q_tgt_pos, q_tgt_neg, tau = 0.05, weights = (0.4, 0.4, 0.2)))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn clear_loss<'py>(
    py: Python<'py>,
    q_en: Vec<Vec<f64>>,
    p_en_pos: Vec<Vec<f64>>,
    p_en_neg: Vec<Vec<f64>>,
    q_tgt_pos: Vec<Vec<f64>>,
    q_tgt_neg: Vec<Vec<f64>>,
    tau: f64,
    weights: (f64, f64, f64),
) -> PyResult<(f64, HashMap<&'static str, f64>, Bound<'py, PyDict>)> {
    let b = batch(q_en, p_en_pos, p_en_neg, q_tgt_pos, q_tgt_neg, tau)?;
    let opts = ClearOptions {
        weights: LossWeights::new(weights.0, weights.1, weights.2).map_err(err)?,
        ..ClearOptions::default()
    };
    let out = clear_forward_with(&b, &opts).map_err(err)?;
    let terms = HashMap::from([("nce_en", out.nce_en), ("cl", out.cl), ("kl", out.kl)]);
    Ok((out.total, terms, grads_dict(py, &out.grads)?))
}

fn single_run(ranked: Vec<String>, relevant: HashMap<String, u8>) -> (RetrievalRun, Qrels) {
    let n = ranked.len();
    let run = RetrievalRun {
        queries: vec![QueryRanking {
            query_id: "q".into(),
            ranked: ranked.into_iter().enumerate().map(|(i, p)| (p, (n - i) as f64)).collect(),
        }],
    };
    let qrels = Qrels::from([("q".to_string(), relevant.into_iter().collect())]);
    (run, qrels)
}

/// nDCG@k of one ranking against graded judgements.
#[pyfunction]
fn ndcg(ranked: Vec<String>, relevant: HashMap<String, u8>, k: usize) -> PyResult<f64> {
    let (run, qrels) = single_run(ranked, relevant);
    Ok(ndcg_at_k(&run, &qrels, k).map_err(err)?.mean)
}

/// Recall@k of one ranking.
#[pyfunction]
fn recall(ranked: Vec<String>, relevant: HashMap<String, u8>, k: usize) -> PyResult<f64> {
    let (run, qrels) = single_run(ranked, relevant);
    Ok(recall_at_k(&run, &qrels, k).map_err(err)?.mean)
}

/// Learning rate of a 0-based step under linear warmup and cosine decay.
#[pyfunction]
fn learning_rate(step: u64, total_steps: u64, lr_peak: f64, warmup_ratio: f64) -> PyResult<f64> {
    lr_at_step(step, total_steps, lr_peak, warmup_ratio).map_err(err)
}

/// Residual MLP adapter with unit-norm outputs.
#[pyclass]
struct Adapter {
    params: AdapterParams,
}

#[pymethods]
impl Adapter {
    #[new]
    #[pyo3(signature = (d_in, hidden = 64, seed = 0))]
    fn new(d_in: usize, hidden: usize, seed: u64) -> PyResult<Self> {
        let params = AdapterParams::init(d_in, hidden, &mut Rng::new(seed).substream("init")).map_err(err)?;
        Ok(Self { params })
    }

    /// Adapter weights stored in a checkpoint written for `config_hash`.
    #[staticmethod]
    fn load(path: PathBuf, config_hash: &str) -> PyResult<Self> {
        Ok(Self {
            params: load_checkpoint(&path, config_hash).map_err(err)?.params,
        })
    }

    fn encode(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = matrix(&x, self.params.dim())?;
        Ok(to_rows(&encode_batch(&self.params, &m).map_err(err)?))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.params.dim()
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.params.hidden()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }
}

fn parse_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn pipeline_config(config: Option<&str>, seed: u64) -> PyResult<PipelineConfig> {
    let cfg = match config {
        Some(text) => serde_json::from_str::<PipelineConfig>(text).map_err(|e| ClearError::new_err(format!("config: {e}")))?,
        None => PipelineConfig::default(),
    };
    Ok(cfg.with_seed(seed))
}

/// Synthetic corpus records as dicts. `config` is a JSON synthetic config.
#[pyfunction]
#[pyo3(signature = (config = None, seed = 0))]
fn generate_corpus<'py>(py: Python<'py>, config: Option<&str>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = match config {
        Some(text) => serde_json::from_str::<SyntheticConfig>(text).map_err(|e| ClearError::new_err(format!("config: {e}")))?,
        None => SyntheticConfig::default(),
    };
    cfg.seed = seed;
    let ds = generate_synthetic_corpus(&cfg).map_err(err)?;
    parse_json(py, &serde_json::to_string(&ds.corpus).expect("records serialize"))
}

/// Trains `loss` on the synthetic benchmark and returns the evaluation
/// report and per-language alignment distances.
#[pyfunction]
#[pyo3(signature = (config = None, seed = 0, loss = "clear"))]
fn train_and_eval<'py>(py: Python<'py>, config: Option<&str>, seed: u64, loss: &str) -> PyResult<Bound<'py, PyAny>> {
    let spec = LossSpec::from_key(loss).ok_or_else(|| ClearError::new_err(format!("unknown loss `{loss}`")))?;
    let cfg = pipeline_config(config, seed)?;
    let (outcome, eval) = py
        .detach(|| {
            let prepared = prepare(&cfg)?;
            train_and_evaluate(&cfg, &prepared, spec)
        })
        .map_err(err)?;
    let out = serde_json::json!({
        "steps": outcome.checkpoint.step,
        "final_loss": outcome.log.records.last().map(|r| r.total),
        "report": eval.report,
        "alignment": eval.alignment.languages,
    });
    parse_json(py, &out.to_string())
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| {
        let argv = std::iter::once("clear".to_string()).chain(args);
        cli::dispatch(argv, &mut std::io::stdout(), &mut std::io::stderr())
    })
}

#[pymodule]
fn clear_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ClearError", m.py().get_type::<ClearError>())?;
    m.add_class::<Adapter>()?;
    m.add_function(wrap_pyfunction!(nce_en, m)?)?;
    m.add_function(wrap_pyfunction!(cl_reversed, m)?)?;
    m.add_function(wrap_pyfunction!(kl_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(infonce_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(clear_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train_and_eval, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}

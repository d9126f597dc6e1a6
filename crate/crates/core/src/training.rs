//! AdamW, cosine schedule with linear warmup, and the epoch driver.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    dedupe_by_passage, feature_matrix, group_by_language, make_batches, mix_multilingual, Corpus,
    TextRecord, TrainingExample,
};
use crate::encoder::{encode_batch, encoder_backward, AdapterParams, Checkpoint};
use crate::error::{Error, Result};
use crate::losses::{
    baseline_infonce_forward, clear_forward_with, nce_en_forward, BatchGrads, ClearOptions,
    ContrastiveBatch, CrossLingualDirection, KlGradient, LossWeights, DEFAULT_TEMPERATURE,
};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Training objective. The ablations each change one part of the
/// composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    #[default]
    Clear,
    /// `lambda3 = 0`.
    ClearNoKl,
    /// Cross-lingual term anchored on the target query.
    ClearNoReversal,
    /// `lambda1 = 0`.
    ClearNoBridge,
    /// English InfoNCE alone.
    NceEnOnly,
    /// Target query against English passages with in-batch and mined
    /// passage negatives.
    InfonceBaseline,
}

impl LossSpec {
    /// The five rows of an ablation table, in display order.
    pub const ABLATION: [LossSpec; 5] = [
        LossSpec::Clear,
        LossSpec::ClearNoKl,
        LossSpec::ClearNoReversal,
        LossSpec::ClearNoBridge,
        LossSpec::InfonceBaseline,
    ];

    pub const ALL: [LossSpec; 6] = [
        LossSpec::Clear,
        LossSpec::ClearNoKl,
        LossSpec::ClearNoReversal,
        LossSpec::ClearNoBridge,
        LossSpec::NceEnOnly,
        LossSpec::InfonceBaseline,
    ];

    /// Snake-case name used in configs, flags and directory names.
    pub fn key(self) -> &'static str {
        match self {
            LossSpec::Clear => "clear",
            LossSpec::ClearNoKl => "clear_no_kl",
            LossSpec::ClearNoReversal => "clear_no_reversal",
            LossSpec::ClearNoBridge => "clear_no_bridge",
            LossSpec::NceEnOnly => "nce_en_only",
            LossSpec::InfonceBaseline => "infonce_baseline",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.key() == key)
    }

    pub fn label(self) -> &'static str {
        match self {
            LossSpec::Clear => "CLEAR",
            LossSpec::ClearNoKl => "w/o KL",
            LossSpec::ClearNoReversal => "w/o reversal",
            LossSpec::ClearNoBridge => "w/o bridge",
            LossSpec::NceEnOnly => "NCE_en only",
            LossSpec::InfonceBaseline => "InfoNCE baseline",
        }
    }

    /// Composite-loss wiring, or `None` for the single-term objectives.
    pub fn clear_options(self, weights: LossWeights, kl_gradient: KlGradient) -> Option<ClearOptions> {
        let mut opts = ClearOptions {
            weights,
            direction: CrossLingualDirection::Reversed,
            kl_gradient,
        };
        match self {
            LossSpec::Clear => {}
            LossSpec::ClearNoKl => opts.weights.lambda3 = 0.0,
            LossSpec::ClearNoReversal => opts.direction = CrossLingualDirection::Conventional,
            LossSpec::ClearNoBridge => opts.weights.lambda1 = 0.0,
            LossSpec::NceEnOnly | LossSpec::InfonceBaseline => return None,
        }
        Some(opts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub weights: LossWeights,
    pub kl_gradient: KlGradient,
    pub tau: f64,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Examples per language in the multilingual mixture; `None` splits the
    /// shared pairs evenly across languages.
    pub n_per_lang: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::Clear,
            weights: LossWeights::default(),
            kl_gradient: KlGradient::Detached,
            tau: DEFAULT_TEMPERATURE,
            hidden_dim: 64,
            batch_size: 64,
            lr_peak: 5e-5,
            warmup_ratio: 0.05,
            epochs: 1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            n_per_lang: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("training: {m}")));
        if !(self.lr_peak > 0.0) {
            return fail(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return fail(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 2 || self.hidden_dim < 1 {
            return fail("batch_size must be at least 2 and hidden_dim at least 1".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) {
            return fail("betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".into());
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        self.weights.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: u64, warmup_ratio: f64) -> u64 {
    (warmup_ratio * total_steps as f64).round() as u64
}

/// Linear warmup to `lr_peak`, then cosine decay to zero at `total_steps`.
pub fn lr_at_step(step: u64, total_steps: u64, lr_peak: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidSchedule("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidSchedule(format!("step {step} beyond total {total_steps}")));
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup || warmup >= total_steps {
        return Ok(lr_peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(lr_peak * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One decoupled-weight-decay Adam update. `t` is the 1-based update count
/// used for bias correction.
pub fn adamw_step(
    params: &mut AdapterParams,
    grads: &AdapterParams,
    m: &mut AdapterParams,
    v: &mut AdapterParams,
    t: u64,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidSchedule("adam step count starts at 1".into()));
    }
    for (name, g) in grads.tensors() {
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalInstability(format!("non-finite gradient in `{name}`")));
        }
    }
    let c1 = 1.0 - opt.beta1.powi(t as i32);
    let c2 = 1.0 - opt.beta2.powi(t as i32);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
        for i in 0..p.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// One line of the training log. Term values are present only for terms
/// the objective weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub nce_en: Option<f64>,
    pub cl: Option<f64>,
    pub kl: Option<f64>,
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub checkpoint_path: Option<String>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Per-language dedup followed by the multilingual mixture.
pub fn build_training_set(examples: Vec<TrainingExample>, cfg: &TrainConfig) -> Result<Vec<TrainingExample>> {
    let groups: Vec<(String, Vec<TrainingExample>)> = group_by_language(examples)
        .into_iter()
        .map(|(lang, ex)| (lang, dedupe_by_passage(ex)))
        .collect();
    if groups.is_empty() {
        return Err(Error::DegenerateDataset("no training examples".into()));
    }
    let n_per_lang = cfg.n_per_lang.unwrap_or_else(|| {
        let mut pairs: Vec<&str> = groups.iter().flat_map(|(_, g)| g.iter().map(|e| e.pair_id.as_str())).collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs.len() / groups.len()
    });
    mix_multilingual(&groups, n_per_lang, &mut Rng::new(cfg.seed).substream("mix"))
}

fn loss_step(spec: LossSpec, cfg: &TrainConfig, batch: &ContrastiveBatch) -> Result<(StepRecord, BatchGrads)> {
    let mut rec = StepRecord {
        step: 0,
        epoch: 0,
        lr: 0.0,
        total: 0.0,
        nce_en: None,
        cl: None,
        kl: None,
        baseline: None,
    };
    let grads = match spec.clear_options(cfg.weights, cfg.kl_gradient) {
        Some(opts) => {
            let out = clear_forward_with(batch, &opts)?;
            let w = opts.weights;
            rec.total = out.total;
            rec.nce_en = (w.lambda1 != 0.0).then_some(out.nce_en);
            rec.cl = (w.lambda2 != 0.0).then_some(out.cl);
            rec.kl = (w.lambda3 != 0.0).then_some(out.kl);
            out.grads
        }
        None => {
            let single = if spec == LossSpec::NceEnOnly {
                nce_en_forward(batch)?
            } else {
                baseline_infonce_forward(batch)?
            };
            rec.total = single.value;
            if spec == LossSpec::NceEnOnly {
                rec.nce_en = Some(single.value);
            } else {
                rec.baseline = Some(single.value);
            }
            single.grads
        }
    };
    Ok((rec, grads))
}

/// Feature rows of one batch stacked in role order, with role sizes.
struct BatchFeatures {
    x: Matrix,
    sizes: [usize; 5],
    ids: Vec<String>,
}

fn gather(batch: &[&TrainingExample], corpus: &Corpus) -> Result<BatchFeatures> {
    let lookup = |id: &String| -> Result<&TextRecord> {
        corpus
            .get(id)
            .ok_or_else(|| Error::DegenerateDataset(format!("record `{id}` missing from corpus")))
    };
    let mut rows: Vec<&TextRecord> = Vec::new();
    rows.extend(batch.iter().map(|e| &e.q_en));
    rows.extend(batch.iter().map(|e| &e.p_en_pos));
    for e in batch {
        for id in &e.neg_passage_ids {
            rows.push(lookup(id)?);
        }
    }
    let k = rows.len() - 2 * batch.len();
    rows.extend(batch.iter().map(|e| &e.q_tgt));
    let before = rows.len();
    for e in batch {
        for id in &e.neg_query_ids {
            rows.push(lookup(id)?);
        }
    }
    let kq = rows.len() - before;
    let b = batch.len();
    Ok(BatchFeatures {
        x: feature_matrix(rows)?,
        sizes: [b, b, k, b, kq],
        ids: batch.iter().map(|e| format!("{}/{}", e.lang, e.pair_id)).collect(),
    })
}

fn split_roles(m: &Matrix, sizes: &[usize; 5]) -> [Matrix; 5] {
    let mut start = 0;
    sizes.map(|n| {
        let part = m.slice_rows(start, start + n);
        start += n;
        part
    })
}

fn check_uniform_negatives(examples: &[TrainingExample]) -> Result<()> {
    let k = examples[0].neg_passage_ids.len();
    let kq = examples[0].neg_query_ids.len();
    if let Some(e) = examples
        .iter()
        .find(|e| e.neg_passage_ids.len() != k || e.neg_query_ids.len() != kq)
    {
        return Err(Error::DegenerateDataset(format!(
            "example `{}/{}` has a different number of negatives than the others",
            e.lang, e.pair_id
        )));
    }
    Ok(())
}

/// Result of [`train_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Trains the adapter on `examples` (already mixed and mined).
///
/// `resume` continues a checkpoint written by an earlier call with the same
/// config; `stop_at` ends the run after that many total steps.
pub fn train_run(
    cfg: &TrainConfig,
    examples: &[TrainingExample],
    corpus: &Corpus,
    resume: Option<Checkpoint>,
    stop_at: Option<u64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.len() < 2 {
        return Err(Error::DegenerateDataset(format!("{} training examples", examples.len())));
    }
    check_uniform_negatives(examples)?;
    let hash = cfg.hash();
    let root = Rng::new(cfg.seed);
    let d_in = examples[0].q_en.vector.len();

    let mut ckpt = match resume {
        Some(c) => {
            c.ensure_config(&hash)?;
            if c.params.dim() != d_in {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "checkpoint expects {}-dim features, data has {d_in}",
                    c.params.dim()
                )));
            }
            c
        }
        None => {
            let params = AdapterParams::init(d_in, cfg.hidden_dim, &mut root.substream("init"))?;
            Checkpoint::new(params, hash, root.state())
        }
    };

    let epochs: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|e| make_batches(examples, cfg.batch_size, &mut root.substream_indexed("epoch", e as u64)))
        .collect::<Result<_>>()?;
    let total: u64 = epochs.iter().map(|b| b.len() as u64).sum();
    let end = stop_at.unwrap_or(total).min(total);
    let opt = AdamW::from(cfg);
    let mut log = TrainLog::default();

    let mut step = 0u64;
    for (epoch, batches) in epochs.iter().enumerate() {
        for idx in batches {
            if step >= end {
                break;
            }
            if step < ckpt.step {
                step += 1;
                continue;
            }
            let lr = lr_at_step(step, total, cfg.lr_peak, cfg.warmup_ratio)?;
            let members: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
            let feats = gather(&members, corpus)?;
            let emb = encode_batch(&ckpt.params, &feats.x)?;
            let [q_en, p_en_pos, p_en_neg, q_tgt_pos, q_tgt_neg] = split_roles(&emb, &feats.sizes);
            let batch = ContrastiveBatch::new(q_en, p_en_pos, p_en_neg, q_tgt_pos, q_tgt_neg, cfg.tau, feats.ids)?;
            let (mut rec, grads) = loss_step(cfg.loss, cfg, &batch)
                .map_err(|e| at_step(e, step + 1))?;
            if !rec.total.is_finite() || !grads.is_finite() {
                return Err(Error::NumericalInstability(format!("non-finite loss at step {}", step + 1)));
            }
            let upstream = Matrix::vstack(&grads.fields())?;
            let (g_params, _) = encoder_backward(&ckpt.params, &feats.x, &upstream)?;
            adamw_step(&mut ckpt.params, &g_params, &mut ckpt.adam_m, &mut ckpt.adam_v, step + 1, lr, &opt)
                .map_err(|e| at_step(e, step + 1))?;
            step += 1;
            ckpt.step = step;
            rec.step = step;
            rec.epoch = epoch + 1;
            rec.lr = lr;
            log.records.push(rec);
        }
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::NumericalInstability(m) => Error::NumericalInstability(format!("step {step}: {m}")),
        other => other,
    }
}

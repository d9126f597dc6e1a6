//! The `clear` command line.
//!
//! Every command works inside one run directory,
//! `$CLEAR_RUN_DIR/<config hash>-s<seed>` (the root defaults to `runs`).
//! Stages whose inputs are missing are produced on the fly, so `evaluate`
//! on a fresh directory generates, mines and expects a trained checkpoint.
//!
//! Exit codes: 0 on success, 1 for bad arguments or configs, 2 when a stage
//! fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{generate_synthetic_corpus, load_corpus, load_examples_with, load_qrels, write_examples, Corpus};
use crate::encoder::{load_checkpoint, save_checkpoint, Encoder, IdentityEncoder};
use crate::error::{Error, Result};
use crate::eval::{alignment_report, evaluate_directions, gold_pairs, write_text, AlignmentReport, Direction, EvalReport, LanguageDistance};
use crate::losses::LossWeights;
use crate::pipeline::{initial_adapter, mix_and_mine, PipelineConfig, Prepared};
use crate::training::{train_run, LossSpec, TrainConfig};

/// Environment variable naming the output root.
pub const RUN_DIR_ENV: &str = "CLEAR_RUN_DIR";
const DEFAULT_RUN_ROOT: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "clear", version, about = "Cross-lingual adapter training and retrieval evaluation on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON pipeline config; missing keys take their defaults, unknown keys are rejected.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for generation, mining and training; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic corpus, training pairs and qrels under data/.
    Generate(Common),
    /// Build the multilingual mixture and mine hard negatives into data/train_mined.jsonl.
    Mine(Common),
    /// Train one objective and write <loss>/checkpoint.bin and <loss>/train_log.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        /// Objective: clear, clear_no_kl, clear_no_reversal, clear_no_bridge, nce_en_only, infonce_baseline.
        #[arg(long, default_value = "clear", value_parser = parse_loss)]
        loss: LossSpec,
        /// Stop after this many optimizer steps in total.
        #[arg(long, value_name = "STEPS")]
        stop_at: Option<u64>,
        /// Continue from the existing checkpoint of this objective.
        #[arg(long)]
        resume: bool,
    },
    /// Score a trained checkpoint (or a reference encoder) on the held-out split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Objective whose checkpoint is evaluated.
        #[arg(long, default_value = "clear", value_parser = parse_loss, conflicts_with = "reference")]
        loss: LossSpec,
        /// Evaluate a reference instead: `base` (raw features) or `init` (untrained adapter).
        #[arg(long, value_parser = ["base", "init"])]
        reference: Option<String>,
        /// Directions to score: en-lang, lang-en, en-en, lang-lang. Repeatable; defaults to all.
        #[arg(long = "direction", value_parser = parse_direction)]
        directions: Vec<Direction>,
    },
    /// Train and evaluate CLEAR, its three ablations and the InfoNCE baseline.
    Ablate(Common),
    /// Train CLEAR for each loss-weight triple and report nDCG@10 in both cross-lingual directions.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Integer weight triples such as `4,4,2`, normalized to sum to one.
        #[arg(long, required = true, num_args = 1.., value_parser = parse_triple)]
        grid: Vec<[u32; 3]>,
    },
    /// Alignment report: per-language gold-pair distance before and after training, plus a 2-D projection.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "clear", value_parser = parse_loss)]
        loss: LossSpec,
    },
}

fn parse_loss(s: &str) -> std::result::Result<LossSpec, String> {
    LossSpec::from_key(s).ok_or_else(|| {
        let keys: Vec<&str> = LossSpec::ALL.iter().map(|l| l.key()).collect();
        format!("unknown loss `{s}`, expected one of {}", keys.join(", "))
    })
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    Ok(match s {
        "en-lang" => Direction::EnglishLang,
        "lang-en" => Direction::LangEnglish,
        "en-en" => Direction::EnglishEnglish,
        "lang-lang" => Direction::LangLang,
        _ => return Err(format!("unknown direction `{s}`, expected en-lang, lang-en, en-en or lang-lang")),
    })
}

fn parse_triple(s: &str) -> std::result::Result<[u32; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("`{s}` is not a triple like 4,4,2"));
    }
    let mut out = [0u32; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.trim().parse().map_err(|_| format!("`{p}` in `{s}` is not a non-negative integer"))?;
    }
    LossWeights::from_integers(out).map_err(|e| e.to_string())?;
    Ok(out)
}

/// Parses `args` (program name first), runs the command under the output
/// root from the environment and returns the exit code. Tables go to `out`,
/// diagnostics to `err`.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch_in(&run_root(), args, out, err)
}

/// [`dispatch`] with an explicit output root.
pub fn dispatch_in<I, T>(root: &Path, args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let cfg = match load_config(cli.command.common()) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "clear: {e}");
            return EXIT_USAGE;
        }
    };
    let run = RunDir::new(root.join(cfg.run_name()));
    match execute(&cli.command, &cfg, &run) {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "clear: {e}");
            EXIT_RUNTIME
        }
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate(c) | Command::Mine(c) | Command::Ablate(c) => c,
            Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Sweep { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// `$CLEAR_RUN_DIR`, or `runs` when unset.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<PipelineConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn mined(&self) -> PathBuf {
        self.data().join("train_mined.jsonl")
    }

    pub fn method(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint(&self, loss: LossSpec) -> PathBuf {
        self.method(loss.key()).join("checkpoint.bin")
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn execute(cmd: &Command, cfg: &PipelineConfig, run: &RunDir) -> Result<String> {
    mkdir(&run.root)?;
    write_text(
        &run.root.join("config.json"),
        &(serde_json::to_string_pretty(cfg).expect("config serializes") + "\n"),
    )?;
    match cmd {
        Command::Generate(_) => {
            generate(cfg, run)?;
            Ok(format!("wrote {}\n", run.data().display()))
        }
        Command::Mine(_) => {
            let p = mine(cfg, run)?;
            Ok(format!("mined {} examples into {}\n", p.examples.len(), run.mined().display()))
        }
        Command::Train { loss, stop_at, resume, .. } => {
            let p = staged(cfg, run)?;
            train(cfg, run, &p, *loss, *stop_at, *resume)
        }
        Command::Evaluate { loss, reference, directions, .. } => {
            let p = staged(cfg, run)?;
            let dirs = if directions.is_empty() { Direction::ALL.to_vec() } else { directions.clone() };
            let (name, report) = match reference.as_deref() {
                Some("base") => ("base".to_string(), score(&IdentityEncoder, &p, cfg, run, "base", &dirs)?),
                Some(_) => {
                    let init = initial_adapter(&p, &cfg.train)?;
                    ("init".to_string(), score(&init, &p, cfg, run, "init", &dirs)?)
                }
                None => {
                    let params = load_checkpoint(&run.checkpoint(*loss), &train_config(cfg, *loss).hash())?.params;
                    (loss.key().to_string(), score(&params, &p, cfg, run, loss.key(), &dirs)?)
                }
            };
            Ok(format!("{name}\n{}", report.to_table()))
        }
        Command::Ablate(_) => ablate(cfg, run),
        Command::Sweep { grid, .. } => sweep(cfg, run, grid),
        Command::Report { loss, .. } => report(cfg, run, *loss),
    }
}

fn train_config(cfg: &PipelineConfig, loss: LossSpec) -> TrainConfig {
    TrainConfig { loss, ..cfg.train.clone() }
}

fn generate(cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    let data = run.data();
    mkdir(&data)?;
    generate_synthetic_corpus(&cfg.synthetic)?.write(&data)
}

fn load_data(cfg: &PipelineConfig, run: &RunDir) -> Result<(Corpus, Corpus, crate::data::Qrels)> {
    let data = run.data();
    let files = ["corpus.jsonl", "train.jsonl", "qrels.tsv", "eval_corpus.jsonl", "eval_qrels.tsv"];
    if files.iter().any(|f| !data.join(f).exists()) {
        generate(cfg, run)?;
    }
    let dim = cfg.synthetic.feature_dim;
    Ok((
        load_corpus(&data.join("corpus.jsonl"), dim)?,
        load_corpus(&data.join("eval_corpus.jsonl"), dim)?,
        load_qrels(&data.join("eval_qrels.tsv"))?,
    ))
}

fn mine(cfg: &PipelineConfig, run: &RunDir) -> Result<Prepared> {
    let (corpus, eval_corpus, eval_qrels) = load_data(cfg, run)?;
    let raw = load_examples_with(&corpus, &run.data().join("train.jsonl"))?;
    let examples = mix_and_mine(cfg, raw, &corpus)?;
    write_examples(&run.mined(), &examples)?;
    Ok(Prepared {
        corpus,
        examples,
        eval_corpus,
        eval_qrels,
    })
}

/// Loads the mined training set, producing any missing stage first.
fn staged(cfg: &PipelineConfig, run: &RunDir) -> Result<Prepared> {
    if !run.mined().exists() {
        return mine(cfg, run);
    }
    let (corpus, eval_corpus, eval_qrels) = load_data(cfg, run)?;
    let examples = load_examples_with(&corpus, &run.mined())?;
    Ok(Prepared {
        corpus,
        examples,
        eval_corpus,
        eval_qrels,
    })
}

fn train(
    cfg: &PipelineConfig,
    run: &RunDir,
    p: &Prepared,
    loss: LossSpec,
    stop_at: Option<u64>,
    resume: bool,
) -> Result<String> {
    let tc = train_config(cfg, loss);
    let ckpt_path = run.checkpoint(loss);
    let previous = if resume { Some(load_checkpoint(&ckpt_path, &tc.hash())?) } else { None };
    let outcome = train_run(&tc, &p.examples, &p.corpus, previous, stop_at)?;
    let dir = run.method(loss.key());
    mkdir(&dir)?;
    save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = outcome.log.clone();
    log.checkpoint_path = Some(ckpt_path.display().to_string());
    if resume && log_path.exists() {
        let earlier = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        write_text(&log_path, &(earlier + &log.to_jsonl()))?;
    } else {
        log.write_jsonl(&log_path)?;
    }
    let mut text = format!("{}: {} steps, checkpoint {}\n", loss.label(), outcome.checkpoint.step, ckpt_path.display());
    if let Some(last) = outcome.log.records.last() {
        writeln!(text, "final loss {:.6} at step {}", last.total, last.step).unwrap();
    }
    Ok(text)
}

/// Evaluates `encoder` and writes `<name>/report.json` and its run files.
fn score(
    encoder: &dyn Encoder,
    p: &Prepared,
    cfg: &PipelineConfig,
    run: &RunDir,
    name: &str,
    directions: &[Direction],
) -> Result<EvalReport> {
    let (report, runs) =
        evaluate_directions(encoder, &p.eval_corpus, &p.eval_qrels, directions, cfg.run_depth)?;
    let dir = run.method(name);
    let runs_dir = dir.join("runs");
    mkdir(&runs_dir)?;
    for (label, r) in &runs {
        write_text(&runs_dir.join(format!("{label}.trec")), &r.to_trec())?;
    }
    write_text(&dir.join("report.json"), &report.to_json())?;
    Ok(report)
}

/// One row of an ablation or sweep table.
#[derive(Debug, Clone, Serialize)]
struct MethodRow {
    method: String,
    loss: String,
    weights: LossWeights,
    en_lang_ndcg_at_10: f64,
    lang_en_ndcg_at_10: f64,
    en_en_ndcg_at_10: f64,
    report: EvalReport,
}

fn method_row(method: String, tc: &TrainConfig, report: EvalReport) -> MethodRow {
    let mean = |d| report.mean(d).map_or(f64::NAN, |m| m.ndcg_at_10);
    MethodRow {
        method,
        loss: tc.loss.key().to_string(),
        weights: tc.weights,
        en_lang_ndcg_at_10: mean(Direction::EnglishLang),
        lang_en_ndcg_at_10: mean(Direction::LangEnglish),
        en_en_ndcg_at_10: mean(Direction::EnglishEnglish),
        report,
    }
}

fn rows_table(first: &str, rows: &[MethodRow]) -> String {
    let mut out = format!("{first:<18} {:>10} {:>10} {:>10}\n", "P_en/Q_l", "P_l/Q_en", "P_en/Q_en");
    for r in rows {
        writeln!(
            out,
            "{:<18} {:>10.4} {:>10.4} {:>10.4}",
            r.method, r.en_lang_ndcg_at_10, r.lang_en_ndcg_at_10, r.en_en_ndcg_at_10
        )
        .unwrap();
    }
    out
}

fn ablate(cfg: &PipelineConfig, run: &RunDir) -> Result<String> {
    let p = staged(cfg, run)?;
    let mut rows = Vec::new();
    for loss in LossSpec::ABLATION {
        train(cfg, run, &p, loss, None, false)?;
        let tc = train_config(cfg, loss);
        let params = load_checkpoint(&run.checkpoint(loss), &tc.hash())?.params;
        let report = score(&params, &p, cfg, run, loss.key(), &Direction::ALL)?;
        rows.push(method_row(loss.label().to_string(), &tc, report));
    }
    write_text(
        &run.root.join("ablation.json"),
        &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"),
    )?;
    Ok(format!("nDCG@10 means\n{}", rows_table("method", &rows)))
}

fn sweep(cfg: &PipelineConfig, run: &RunDir, grid: &[[u32; 3]]) -> Result<String> {
    let p = staged(cfg, run)?;
    let cells: Vec<Result<MethodRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&triple| {
                let p = &p;
                s.spawn(move || sweep_cell(cfg, run, p, triple))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep cell panicked")).collect()
    });
    let rows: Vec<MethodRow> = cells.into_iter().collect::<Result<_>>()?;
    write_text(
        &run.root.join("sweep.json"),
        &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"),
    )?;
    Ok(format!("nDCG@10 means\n{}", rows_table("weights", &rows)))
}

fn sweep_cell(cfg: &PipelineConfig, run: &RunDir, p: &Prepared, triple: [u32; 3]) -> Result<MethodRow> {
    let [a, b, c] = triple;
    let cell = run.root.join("sweep").join(format!("w{a}-{b}-{c}"));
    let tc = TrainConfig {
        loss: LossSpec::Clear,
        weights: LossWeights::from_integers(triple)?,
        ..cfg.train.clone()
    };
    let outcome = train_run(&tc, &p.examples, &p.corpus, None, None)?;
    let runs_dir = cell.join("runs");
    mkdir(&runs_dir)?;
    save_checkpoint(&cell.join("checkpoint.bin"), &outcome.checkpoint)?;
    outcome.log.write_jsonl(&cell.join("train_log.jsonl"))?;
    let dirs = [Direction::EnglishLang, Direction::LangEnglish, Direction::EnglishEnglish];
    let (report, runs) =
        evaluate_directions(&outcome.checkpoint.params, &p.eval_corpus, &p.eval_qrels, &dirs, cfg.run_depth)?;
    for (label, r) in &runs {
        write_text(&runs_dir.join(format!("{label}.trec")), &r.to_trec())?;
    }
    write_text(&cell.join("report.json"), &report.to_json())?;
    Ok(method_row(format!("{a},{b},{c}"), &tc, report))
}

#[derive(Debug, Serialize)]
struct AlignmentSummary {
    loss: String,
    before: Vec<LanguageDistance>,
    after: Vec<LanguageDistance>,
}

fn report(cfg: &PipelineConfig, run: &RunDir, loss: LossSpec) -> Result<String> {
    let p = staged(cfg, run)?;
    let params = load_checkpoint(&run.checkpoint(loss), &train_config(cfg, loss).hash())?.params;
    let pairs = gold_pairs(&p.eval_corpus);
    let before: AlignmentReport = alignment_report(&initial_adapter(&p, &cfg.train)?, &pairs)?;
    let after = alignment_report(&params, &pairs)?;
    let dir = run.method(loss.key());
    write_text(&dir.join("alignment.csv"), &after.to_csv())?;
    write_text(&dir.join("alignment_init.csv"), &before.to_csv())?;
    let summary = AlignmentSummary {
        loss: loss.key().to_string(),
        before: before.languages.clone(),
        after: after.languages.clone(),
    };
    write_text(
        &dir.join("alignment.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    let mut out = format!("{}: mean gold-pair distance\n{:<6} {:>10} {:>10}\n", loss.label(), "lang", "before", "after");
    for (b, a) in before.languages.iter().zip(&after.languages) {
        writeln!(out, "{:<6} {:>10.4} {:>10.4}", b.lang, b.mean_distance, a.mean_distance).unwrap();
    }
    Ok(out)
}

mod checkpoint;
mod config;
mod manifest;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anatomist_core::anatomy::{plan_prompts, Lexicon, LabeledSentence};
use anatomist_core::corpus::{
    build_vocab, load_corpus, observation_clauses, synth_generate, write_corpus, CorpusRecord, LoadOptions, Report,
};
use anatomist_core::decoder::DecodeMode;
use anatomist_core::diagnostics::{fault_kind, gradcheck_all};
use anatomist_core::rougeval::evaluate_corpus;
use anatomist_core::trainer::{ablate, encode_all, fit};
use anatomist_core::{Ablation, Model};
use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Sidecar;
use crate::config::RunConfig;
use crate::manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "anatomist", version, about = "Anatomy-prompted multimodal impression generation")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with optional [model], [train], [synth] and [data] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split findings into sentences and prefix each with its anatomy.
    Prompt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic paired corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant and save the best validation checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Per-epoch metrics JSONL; defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Generate impressions for every report in a corpus.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        #[arg(long, default_value_t = 4)]
        beam_width: usize,
    },
    /// Score predicted impressions against a reference corpus.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and numeric gradients for every op and composite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Corrupt the backward pass of one op, as a negative control.
        #[arg(long)]
        fault: Option<String>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all six variants and tabulate test scores.
    Ablate {
        /// Corpus to split; a synthetic one from [synth] when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Greedy,
    Beam,
}

/// Exit status for a failed run.
enum Failure {
    Invalid(anyhow::Error),
    Numeric(anyhow::Error),
    Threshold(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let numeric = e
            .chain()
            .any(|c| c.downcast_ref::<anatomist_core::Error>().is_some_and(|e| e.is_numeric()));
        if numeric {
            Failure::Numeric(e)
        } else {
            Failure::Invalid(e)
        }
    }
}

impl From<anatomist_core::Error> for Failure {
    fn from(e: anatomist_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("numeric error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("threshold not met: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    cfg.data.validate()?;
    match cli.command {
        Command::Prompt { input, lexicon, out } => prompt(&cfg, &input, lexicon.as_deref(), &out),
        Command::Synth { out } => synth(&cfg, &out),
        Command::Train {
            corpus,
            out,
            ablation,
            metrics,
        } => train(cfg, &corpus, &out, ablation, metrics),
        Command::Generate {
            model,
            input,
            out,
            mode,
            beam_width,
        } => {
            let mode = match mode {
                Mode::Greedy => DecodeMode::Greedy,
                Mode::Beam => DecodeMode::Beam { width: beam_width },
            };
            generate(&cfg, &model, &input, &out, mode)
        }
        Command::Evaluate { pred, reference, out } => evaluate(&cfg, &pred, &reference, &out),
        Command::Gradcheck { seeds, fault, out } => gradcheck(&cfg, seeds, fault.as_deref(), out.as_deref()),
        Command::Ablate { corpus, out } => run_ablation(&cfg, corpus.as_deref(), &out),
    }
}

fn lexicon(cfg: &RunConfig, overridden: Option<&Path>) -> anyhow::Result<Lexicon> {
    let path = overridden.or(cfg.data.lexicon.as_deref());
    Lexicon::load(path).with_context(|| format!("loading lexicon {}", path.map_or("(built-in)".into(), |p| p.display().to_string())))
}

fn load_reports(cfg: &RunConfig, path: &Path) -> anyhow::Result<Vec<Report>> {
    let opts = LoadOptions {
        max_findings_tokens: cfg.data.max_findings_tokens,
    };
    let outcome = load_corpus(path, &lexicon(cfg, None)?, &opts).with_context(|| format!("loading {}", path.display()))?;
    if outcome.dropped > 0 {
        eprintln!("{}: dropped {} record(s) by length filters", path.display(), outcome.dropped);
    }
    Ok(outcome.reports)
}

fn writer(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| anatomist_core::Error::Ingest {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// `(train, val, test)` from the configured fractions; validation and test
/// come from the end of the corpus so the split does not depend on the seed.
fn split<'a>(reports: &'a [Report], cfg: &RunConfig, with_test: bool) -> (&'a [Report], &'a [Report], &'a [Report]) {
    let n = reports.len();
    let take = |f: f64| ((n as f64 * f).round() as usize).min(n);
    let n_val = take(cfg.data.val_fraction);
    let n_test = if with_test { take(cfg.data.test_fraction) } else { 0 };
    let n_train = n.saturating_sub(n_val + n_test);
    let (train, rest) = reports.split_at(n_train);
    let (test, val) = rest.split_at(n_test.min(rest.len()));
    (train, val, test)
}

#[derive(Deserialize)]
struct FindingsRecord {
    id: String,
    findings: String,
}

#[derive(Serialize)]
struct PromptedRecord {
    id: String,
    findings: String,
    prompted: String,
    sentences: Vec<LabeledSentence>,
}

fn prompt(cfg: &RunConfig, input: &Path, lex: Option<&Path>, out: &Path) -> Outcome {
    let lexicon = lexicon(cfg, lex)?;
    let records: Vec<FindingsRecord> = read_jsonl(input)?;
    let rows: Vec<PromptedRecord> = records
        .into_iter()
        .map(|r| {
            let sentences = plan_prompts(&r.findings, &lexicon);
            let prompted = sentences.iter().map(|s| s.prompted_text.as_str()).collect::<Vec<_>>().join(" ");
            PromptedRecord {
                id: r.id,
                findings: r.findings,
                prompted,
                sentences,
            }
        })
        .collect();
    write_jsonl(out, &rows)?;
    RunManifest::begin("prompt", cfg).input(input).output(out).finish(out)?;
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> Outcome {
    let reports = synth_generate(&cfg.synth)?;
    let mut w = writer(out)?;
    write_corpus(&reports, &mut w)?;
    eprintln!("wrote {} reports to {}", reports.len(), out.display());
    RunManifest::begin("synth", cfg).output(out).finish(out)?;
    Ok(())
}

fn train(mut cfg: RunConfig, corpus: &Path, out: &Path, ablation: Option<Ablation>, metrics: Option<PathBuf>) -> Outcome {
    if let Some(a) = ablation {
        cfg.train.ablation = a;
    }
    cfg.train.validate()?;
    let reports = load_reports(&cfg, corpus)?;
    let (train, val, _) = split(&reports, &cfg, false);
    if train.is_empty() {
        return Err(anatomist_core::Error::Config("no training reports after the validation split".into()).into());
    }
    let vocab = build_vocab(train, cfg.data.min_freq);
    cfg.model.vocab_size = vocab.len();
    let a = cfg.train.ablation;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let tr = encode_all(train, &vocab, a)?;
    let va = encode_all(val, &vocab, a)?;

    let metrics_path = metrics.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let mut log = writer(&metrics_path)?;
    let mut log_err = None;
    let outcome = fit(&mut model, &tr, &va, &vocab, &cfg.train, |m| {
        eprintln!(
            "epoch {:>3}  gen {:.4}  con {:.4}  total {:.4}  val R-1 {:.4}",
            m.epoch, m.gen, m.con, m.total, m.val_r1
        );
        let line = serde_json::to_string(m).map_err(anyhow::Error::from).and_then(|s| Ok(writeln!(log, "{s}")?));
        if let Err(e) = line {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.flush().context("writing metrics")?;
    eprintln!("best epoch {} (val R-1 {:.4})", outcome.best_epoch, outcome.best_val_r1);

    let sidecar = Sidecar {
        model: cfg.model.clone(),
        ablation: a,
        max_gen_len: cfg.train.max_gen_len,
        vocab,
    };
    let side = checkpoint::save(&model, &sidecar, out)?;
    RunManifest::begin("train", &cfg)
        .input(corpus)
        .output(out)
        .output(&side)
        .output(&metrics_path)
        .finish(out)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Prediction {
    id: String,
    impression: String,
    #[serde(default)]
    terminated: bool,
    #[serde(default)]
    score: f64,
}

fn generate(cfg: &RunConfig, ckpt: &Path, input: &Path, out: &Path, mode: DecodeMode) -> Outcome {
    let (model, side) = checkpoint::load(ckpt)?;
    let reports = load_reports(cfg, input)?;
    let data = encode_all(&reports, &side.vocab, side.ablation)?;
    let mut rows = Vec::with_capacity(data.len());
    for r in &data {
        let g = model.generate(r, side.ablation, mode, side.max_gen_len, Some(&side.vocab))?;
        rows.push(Prediction {
            id: r.id.clone(),
            impression: g.text,
            terminated: g.terminated,
            score: g.score,
        });
    }
    write_jsonl(out, &rows)?;
    RunManifest::begin("generate", cfg)
        .input(ckpt)
        .input(input)
        .output(out)
        .finish(out)?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluationFile {
    count: usize,
    mean: anatomist_core::rougeval::RougeScores,
    /// Share of reports whose observation clauses match the reference exactly.
    fc: f64,
    examples: Vec<anatomist_core::rougeval::ExampleScore>,
}

fn evaluate(cfg: &RunConfig, pred: &Path, reference: &Path, out: &Path) -> Outcome {
    let preds: Vec<Prediction> = read_jsonl(pred)?;
    let refs: Vec<CorpusRecord> = read_jsonl(reference)?;
    let p: Vec<(String, String)> = preds.into_iter().map(|r| (r.id, r.impression)).collect();
    let r: Vec<(String, String)> = refs.into_iter().map(|r| (r.id, r.impression)).collect();
    let report = evaluate_corpus(&p, &r)?;
    let by_id: std::collections::HashMap<&str, &str> = r.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let exact = p
        .iter()
        .filter(|(id, text)| by_id.get(id.as_str()).is_some_and(|t| observation_clauses(t) == observation_clauses(text)))
        .count();
    let file = EvaluationFile {
        count: p.len(),
        mean: report.mean,
        fc: if p.is_empty() { 0.0 } else { exact as f64 / p.len() as f64 },
        examples: report.examples,
    };
    std::fs::write(out, serde_json::to_string_pretty(&file).map_err(anyhow::Error::from)?)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "R-1 {:.4}  R-2 {:.4}  R-L {:.4}  FC {:.4}  ({} reports)",
        file.mean.rouge1.f1, file.mean.rouge2.f1, file.mean.rouge_l.f1, file.fc, file.count
    );
    RunManifest::begin("evaluate", cfg)
        .input(pred)
        .input(reference)
        .output(out)
        .finish(out)?;
    Ok(())
}

fn gradcheck(cfg: &RunConfig, seeds: u64, fault: Option<&str>, out: Option<&Path>) -> Outcome {
    let fault = match fault {
        None => None,
        Some(name) => Some(fault_kind(name).ok_or_else(|| anatomist_core::Error::Config(format!("unknown op {name:?}")))?),
    };
    let base = cfg.train.seed;
    let seeds: Vec<u64> = (0..seeds.max(1)).map(|i| base + i).collect();
    let report = gradcheck_all(&seeds, fault)?;
    let text = report.render();
    print!("{text}");
    if let Some(p) = out {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
        RunManifest::begin("gradcheck", cfg).output(p).finish(p)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let worst = report
            .results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        Err(Failure::Threshold(format!("gradient check failed for {worst}")))
    }
}

fn threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("ANATOMIST_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => available,
    }
}

fn run_ablation(cfg: &RunConfig, corpus: Option<&Path>, out: &Path) -> Outcome {
    cfg.train.validate()?;
    let reports = match corpus {
        Some(p) => load_reports(cfg, p)?,
        None => synth_generate(&cfg.synth)?,
    };
    let (train, val, test) = split(&reports, cfg, true);
    if train.is_empty() || test.is_empty() {
        return Err(anatomist_core::Error::Config("ablation needs non-empty train and test splits".into()).into());
    }
    let table = ablate(train, val, test, &cfg.model, &cfg.train, &cfg.data.lambdas, threads())?;
    print!("{}", table.render());
    std::fs::write(out, serde_json::to_string_pretty(&table).map_err(anyhow::Error::from)?)
        .with_context(|| format!("writing {}", out.display()))?;
    let mut m = RunManifest::begin("ablate", cfg).output(out);
    if let Some(p) = corpus {
        m = m.input(p);
    }
    m.finish(out)?;
    Ok(())
}

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use structrans::checkpoint;
use structrans::checks::{self, CheckReport};
use structrans::data::{self, MirrorSetup, Vocabulary};
use structrans::grammar::Grammar;
use structrans::inference::{self, PredictionRecord};
use structrans::training::{self, ExperimentConfig};
use structrans::Model;

#[derive(Parser)]
#[command(name = "structrans", version, about = "Fertility + reordering sequence transducer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/dev/test JSONL for a mirroring setup.
    GenerateData {
        #[arg(long)]
        setup: MirrorSetup,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the full experiment configuration with default values.
    DefaultConfig,
    /// Train a model and write a checkpoint plus a per-epoch metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.jsonl and dev.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log path (defaults to `<out>.metrics.jsonl`).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decode every source sequence of a JSONL file.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Restrict outputs to a context-free grammar in normal form.
        #[arg(long)]
        grammar: Option<PathBuf>,
        /// Number of candidate lengths (default 1, or 5 with a grammar).
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match accuracy of predictions against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Dynamic programs against brute-force enumeration.
    OracleCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceLine {
    source: Vec<String>,
    #[serde(default)]
    #[allow(dead_code)]
    target: Option<Vec<String>>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn generate(setup: MirrorSetup, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let splits = data::generate_mirror(setup, seed);
    data::write_splits(out, &splits)?;
    eprintln!(
        "wrote {} train, {} dev, {} test examples to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, data_dir: &Path, out: &Path, metrics: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("config {}", config.display()))?;
    let train_set = data::read_jsonl(&data_dir.join("train.jsonl"))?;
    let dev_set = data::read_jsonl(&data_dir.join("dev.jsonl"))?;
    let vocab = Vocabulary::build(&train_set);
    let mut model = Model::new(cfg.model.clone(), vocab, cfg.train.seed)?;
    log::info!(
        "{} parameters, {} train / {} dev examples",
        model.params.num_scalars(),
        train_set.len(),
        dev_set.len()
    );
    let metrics_path = metrics.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let mut metrics_out = BufWriter::new(File::create(&metrics_path)?);
    let report = training::train(&mut model, &train_set, &dev_set, &cfg.train, Some(&mut metrics_out))?;
    metrics_out.flush()?;
    checkpoint::save_model(&model, out)?;
    eprintln!(
        "best dev exact match {:.4} at epoch {}; checkpoint {}, metrics {}",
        report.best_dev_exact_match,
        report.best_epoch,
        out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn predict(ckpt: &Path, input: &Path, grammar: Option<&Path>, top_k: Option<usize>, out: &Path) -> Result<()> {
    let model = checkpoint::load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let grammar = match grammar {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(Grammar::parse(&text)?.compile(&model.vocab.target)?)
        }
        None => None,
    };
    let k = top_k.unwrap_or(if grammar.is_some() {
        inference::DEFAULT_TOP_K_GRAMMAR
    } else {
        inference::DEFAULT_TOP_K
    });
    let lines: Vec<SourceLine> = read_lines(input)?;
    let mut w = BufWriter::new(File::create(out)?);
    for (i, line) in lines.iter().enumerate() {
        let ctx = || format!("{}: example {}", input.display(), i + 1);
        let ids = model.encode_source(&line.source).with_context(ctx)?;
        let result = inference::decode(&model, &ids, k, grammar.as_ref()).with_context(ctx)?;
        let record = PredictionRecord {
            source: line.source.clone(),
            prediction: model.vocab.target.decode(&result.tokens),
            length: result.length,
            log_score: result.log_score,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    eprintln!("wrote {} predictions to {}", lines.len(), out.display());
    Ok(())
}

/// Output tokens of a line: `prediction` if present, else `target`.
fn output_tokens(v: &serde_json::Value) -> Option<Vec<String>> {
    let field = v.get("prediction").or_else(|| v.get("target"))?;
    serde_json::from_value(field.clone()).ok()
}

fn evaluate(pred: &Path, gold: &Path) -> Result<()> {
    let extract = |path: &Path| -> Result<Vec<Vec<String>>> {
        read_lines::<serde_json::Value>(path)?
            .iter()
            .enumerate()
            .map(|(i, v)| {
                output_tokens(v).with_context(|| {
                    format!("{}: line {} has no prediction or target", path.display(), i + 1)
                })
            })
            .collect()
    };
    let (p, g) = (extract(pred)?, extract(gold)?);
    let em = data::exact_match(&p, &g)?;
    println!("{}", serde_json::json!({ "exact_match": em }));
    Ok(())
}

fn report(reports: &[CheckReport]) -> bool {
    for r in reports {
        println!("{r}");
    }
    reports.iter().all(|r| r.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenerateData { setup, seed, out } => generate(setup, seed, &out).map(|_| true),
        Command::DefaultConfig => serde_json::to_string_pretty(&ExperimentConfig::default())
            .map(|s| println!("{s}"))
            .map(|_| true)
            .map_err(Into::into),
        Command::Train {
            config,
            data,
            out,
            metrics,
        } => train(&config, &data, &out, metrics).map(|_| true),
        Command::Predict {
            ckpt,
            input,
            grammar,
            top_k,
            out,
        } => predict(&ckpt, &input, grammar.as_deref(), top_k, &out).map(|_| true),
        Command::Evaluate { pred, gold } => evaluate(&pred, &gold).map(|_| true),
        Command::Gradcheck { instances, seed } => checks::gradcheck_all(instances, seed)
            .map(|r| report(&r))
            .map_err(Into::into),
        Command::OracleCheck { seed } => checks::oracle_check_all(seed).map(|r| report(&r)).map_err(Into::into),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use ltt_core::data::{load_corpus, read_lines};
use ltt_core::training::{FitReport, BEST_CHECKPOINT, METRICS_LOG};
use ltt_core::{
    bleu, fit, load_checkpoint, remove_repeated_bigrams, render_svg, translate_greedy, AdamConfig,
    AttentionDump, GradientMode, Limits, SentenceDump, SvgStyle, TrainConfig,
};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "ltt", version, about = "Latent-tree character-level translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Next-character losses train only the output layer.
    OutputOnly,
    /// Next-character and coverage losses backpropagate through the network.
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best checkpoint.
    Train {
        #[arg(long)]
        train_src: PathBuf,
        #[arg(long)]
        train_tgt: PathBuf,
        #[arg(long, requires = "dev_tgt")]
        dev_src: Option<PathBuf>,
        #[arg(long, requires = "dev_src")]
        dev_tgt: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 384, value_parser = clap::value_parser!(u64).range(1..))]
        hidden: u64,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        batch: u64,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Update reward baselines after every pair rather than per batch.
        #[arg(long)]
        strict_sequential: bool,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, value_enum, default_value_t = Mode::OutputOnly)]
        gradient_mode: Mode,
        #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
        max_depth: u64,
        /// Epochs without dev improvement before stopping; 0 never stops early.
        #[arg(long, default_value_t = 3)]
        patience: usize,
    },
    /// Translate one sentence per line with greedy decoding.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        no_bigram_filter: bool,
        /// Write trees and attention weights as JSON.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// Print corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Draw one sentence of an attention dump as SVG.
    RenderAttention {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        sentence: usize,
    },
}

enum Failure {
    /// Bad flags or paths; exit 2.
    Usage(String),
    /// Anything that went wrong after the inputs checked out; exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ltt_core::Error> for Failure {
    fn from(e: ltt_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn existing_file(path: &Path, flag: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag}: no such file: {}", path.display())))
    }
}

fn writable_dir(path: &Path, flag: &str) -> Result<(), Failure> {
    if path.exists() && !path.is_dir() {
        return Err(Failure::Usage(format!("{flag}: not a directory: {}", path.display())));
    }
    Ok(())
}

fn parent_dir(path: &Path, flag: &str) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Failure::Usage(format!(
            "{flag}: directory does not exist: {}",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn train(
    train_src: &Path,
    train_tgt: &Path,
    dev: Option<(&Path, &Path)>,
    out_dir: &Path,
    hidden: usize,
    config: TrainConfig,
) -> Result<FitReport, Failure> {
    existing_file(train_src, "--train-src")?;
    existing_file(train_tgt, "--train-tgt")?;
    if let Some((s, t)) = dev {
        existing_file(s, "--dev-src")?;
        existing_file(t, "--dev-tgt")?;
    }
    writable_dir(out_dir, "--out-dir")?;

    let corpus = load_corpus(train_src, train_tgt)?;
    if corpus.is_empty() {
        return Err(Failure::Usage(format!(
            "--train-src: no usable sentence pairs in {}",
            train_src.display()
        )));
    }
    let dev = dev.map(|(s, t)| load_corpus(s, t)).transpose()?;
    log::info!(
        "training on {} pairs, {} dev pairs, hidden size {}",
        corpus.len(),
        dev.as_ref().map_or(0, |d| d.len()),
        hidden
    );
    Ok(fit(&corpus, dev.as_ref(), &config, hidden, out_dir)?)
}

fn translate(
    model: &Path,
    input: &Path,
    output: &Path,
    bigram_filter: bool,
    dump: Option<&Path>,
) -> Result<(), Failure> {
    existing_file(model, "--model")?;
    existing_file(input, "--input")?;
    parent_dir(output, "--output")?;
    if let Some(d) = dump {
        parent_dir(d, "--dump-attention")?;
    }
    let ck = load_checkpoint(model)?;
    let params = ck.model()?;
    let vocabs = &ck.meta.vocabs;
    let limits = ck.meta.train.limits;
    let lines = read_lines(input)?;

    let results: Vec<_> = lines
        .par_iter()
        .map(|line| {
            if line.is_empty() {
                return None;
            }
            match translate_greedy(&params, vocabs, line, limits) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("could not translate {line:?}: {e}");
                    None
                }
            }
        })
        .collect();

    let mut text = String::new();
    for (i, r) in results.iter().enumerate() {
        match r {
            Some(r) => {
                if r.truncated {
                    log::warn!("line {}: output reached the length cap", i + 1);
                }
                if bigram_filter {
                    text.push_str(&remove_repeated_bigrams(&r.output));
                } else {
                    text.push_str(&r.output);
                }
            }
            None if lines[i].is_empty() => log::warn!("line {}: empty input", i + 1),
            None => {}
        }
        text.push('\n');
    }
    write_file(output, text.as_bytes())?;

    if let Some(path) = dump {
        let sentences = results
            .iter()
            .zip(&lines)
            .map(|(r, line)| match r {
                Some(r) => SentenceDump::from_translation(r),
                None => SentenceDump {
                    source: line.clone(),
                    output: String::new(),
                    encoder_nodes: vec![],
                    decoder_nodes: vec![],
                    alignments: vec![],
                },
            })
            .collect();
        let json = serde_json::to_string_pretty(&AttentionDump { sentences })
            .context("serializing attention dump")?;
        write_file(path, json.as_bytes())?;
    }
    Ok(())
}

fn evaluate(hyp: &Path, reference: &Path) -> Result<f64, Failure> {
    existing_file(hyp, "--hyp")?;
    existing_file(reference, "--ref")?;
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    if h.len() != r.len() {
        return Err(Failure::Usage(format!(
            "line count mismatch: {} hypotheses, {} references",
            h.len(),
            r.len()
        )));
    }
    if h.is_empty() {
        return Err(Failure::Usage("--hyp: file has no lines".into()));
    }
    Ok(bleu(&h, &r))
}

fn render_attention(dump: &Path, out: &Path, sentence: usize) -> Result<(), Failure> {
    existing_file(dump, "--dump")?;
    parent_dir(out, "--out")?;
    let text = fs::read_to_string(dump).with_context(|| format!("reading {}", dump.display()))?;
    let doc: AttentionDump =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", dump.display()))?;
    let Some(s) = doc.sentences.get(sentence) else {
        return Err(Failure::Usage(format!(
            "--sentence {sentence} out of range: dump has {} sentence(s)",
            doc.sentences.len()
        )));
    };
    write_file(out, render_svg(s, &SvgStyle::default()).as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            train_src,
            train_tgt,
            dev_src,
            dev_tgt,
            out_dir,
            hidden,
            batch,
            epochs,
            gamma,
            seed,
            strict_sequential,
            learning_rate,
            gradient_mode,
            max_depth,
            patience,
        } => {
            let config = TrainConfig {
                batch_size: batch as usize,
                max_epochs: epochs,
                gamma,
                seed,
                strict_sequential,
                patience: (patience > 0).then_some(patience),
                gradient_mode: match gradient_mode {
                    Mode::OutputOnly => GradientMode::OutputOnly,
                    Mode::Full => GradientMode::Full,
                },
                adam: AdamConfig {
                    learning_rate,
                    ..AdamConfig::default()
                },
                limits: Limits {
                    max_depth: max_depth as usize,
                },
                ..TrainConfig::default()
            };
            let dev = dev_src.as_deref().zip(dev_tgt.as_deref());
            let report = train(&train_src, &train_tgt, dev, &out_dir, hidden as usize, config)?;
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(
                stdout,
                "best epoch {} of {}; checkpoint {}; log {}",
                report.best_epoch,
                report.epochs_run,
                out_dir.join(BEST_CHECKPOINT).display(),
                out_dir.join(METRICS_LOG).display()
            );
            Ok(())
        }
        Command::Translate {
            model,
            input,
            output,
            no_bigram_filter,
            dump_attention,
        } => translate(&model, &input, &output, !no_bigram_filter, dump_attention.as_deref()),
        Command::Evaluate { hyp, reference } => {
            let score = evaluate(&hyp, &reference)?;
            println!("{score:.4}");
            Ok(())
        }
        Command::RenderAttention { dump, out, sentence } => render_attention(&dump, &out, sentence),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

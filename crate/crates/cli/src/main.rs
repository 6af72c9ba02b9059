use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use test_embed::data::{load_dataset, save_dataset};
use test_embed::pipeline::{self, evaluate, match_words, train_phase1, train_phase2};
use test_embed::synth::{self, Suite};
use test_embed::{Checkpoint, Container, Event, RunConfig, VocabMatrix};

#[derive(Parser)]
#[command(name = "test-embed", version, about = "Time-series token embeddings aligned to text prototypes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic dataset.
    GenData {
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Phase 1: contrastive encoder training.
    TrainEncoder {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 2: soft prompt and task head through the frozen LM.
    TrainPrompt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "from")]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy or forecasting error of a phase-2 checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Nearest vocabulary words of every token embedding.
    MatchWords {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(short = 'n', default_value_t = 5)]
        n: usize,
    },
    /// Write the built-in vocabulary and frozen LM for a given width.
    GenAssets {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn emit(out: &mut impl Write, record: &impl Serialize) -> CliResult {
    serde_json::to_writer(&mut *out, record)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct Written<'a> {
    event: &'static str,
    path: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    series: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checksum: Option<String>,
}

fn written<'a>(path: &'a Path, series: Option<usize>, checksum: Option<String>) -> Written<'a> {
    Written { event: "written", path, series, checksum }
}

fn run(cmd: Cmd, out: &mut impl Write) -> CliResult {
    match cmd {
        Cmd::GenData { suite, out: path, seed } => {
            let ds = synth::generate(suite, seed)?;
            save_dataset(&path, &ds)?;
            emit(out, &written(&path, Some(ds.len()), None))
        }
        Cmd::TrainEncoder { config, out: path } => {
            let cfg = RunConfig::load(&config)?;
            let mut failed = None;
            let ck = train_phase1(&cfg, &mut |e| {
                if failed.is_none() {
                    failed = emit(out, e).err();
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            ck.save(&path)?;
            emit(out, &written(&path, None, Some(ck.container.checksum(""))))
        }
        Cmd::TrainPrompt { config, from, out: path } => {
            let cfg = RunConfig::load(&config)?;
            let ck = Checkpoint::load(&from)?;
            let mut failed = None;
            let trained = train_phase2(&cfg, &ck, &mut |e: &Event| {
                if failed.is_none() {
                    failed = emit(out, e).err();
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            trained.save(&path)?;
            emit(out, &written(&path, None, Some(trained.container.checksum(""))))
        }
        Cmd::Eval { ckpt, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            let report = evaluate(&ck, &load_dataset(&data)?)?;
            emit(out, &report)
        }
        Cmd::MatchWords { ckpt, data, vocab, n } => {
            let ck = Checkpoint::load(&ckpt)?;
            let vocab = VocabMatrix::load(&vocab)?;
            let report = match_words(&ck, &load_dataset(&data)?, &vocab, n)?;
            for t in &report.tokens {
                emit(out, &serde_json::json!({ "event": "token", "series": t.series, "start": t.start, "end": t.end, "words": t.words }))?;
            }
            emit(out, &serde_json::json!({ "event": "frequencies", "counts": report.frequencies }))
        }
        Cmd::GenAssets { out: dir, width } => {
            std::fs::create_dir_all(&dir)?;
            let vocab_path = dir.join("vocab.tste");
            pipeline::default_vocab(width)?.save(&vocab_path)?;
            emit(out, &written(&vocab_path, None, None))?;
            let lm_path = dir.join("lm.tste");
            let mut lm = Container::new();
            pipeline::default_lm(width)?.export(&mut lm);
            lm.save(&lm_path)?;
            emit(out, &written(&lm_path, None, Some(lm.checksum(""))))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("test-embed: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli.cmd, &mut out).and_then(|()| Ok(out.flush()?)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("test-embed: {msg}");
            ExitCode::FAILURE
        }
    }
}

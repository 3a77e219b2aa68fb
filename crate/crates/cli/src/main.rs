//! `xtrd`: train, decode, and inspect streaming transducer models.
//!
//! Exit codes: 0 success, 2 usage or config error, 1 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Offline,
    Streaming,
}

#[derive(Parser)]
#[command(name = "xtrd", version, about = "Streaming transducer ASR toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic feature dataset plus manifest.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_utts: usize,
        /// Generation seed; defaults to the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes last/best checkpoints and per-epoch metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training manifest (entries must carry transcripts).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out manifest for per-epoch nll and best-checkpoint selection.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs of the configured schedule (the
        /// config stays authoritative; useful for interruption tests).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Decode a manifest with a trained checkpoint.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the emitted JSON lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Offline)]
        mode: Mode,
        /// Attention chunk size in frames.
        #[arg(long, conflicts_with = "full_attention")]
        chunk_frames: Option<usize>,
        /// Attend to the whole utterance (one chunk spanning it).
        #[arg(long)]
        full_attention: bool,
        /// Left-context chunks, or 'full'.
        #[arg(long, default_value = "1")]
        left_context: String,
        #[arg(long, default_value_t = 0)]
        sink_frames: usize,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 8)]
        max_symbols: usize,
    },
    /// Render an attention mask as an ASCII grid with cost accounting.
    InspectMask {
        #[arg(long)]
        chunk_frames: usize,
        #[arg(long, default_value = "1")]
        left_context: String,
        #[arg(long, default_value_t = 0)]
        sink_frames: usize,
        /// Total frames (<= 512).
        #[arg(long)]
        frames: usize,
    },
    /// Corpus WER of decode output against manifest references.
    EvalWer {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::SynthData { config, out, n_utts, seed } => {
            commands::synth_data(&config, &out, n_utts, seed)
        }
        Cmd::Train { config, data, out, dev, resume, stop_after } => commands::train(
            &config,
            &data,
            &out,
            dev.as_deref(),
            resume.as_deref(),
            stop_after,
        ),
        Cmd::Decode {
            ckpt,
            data,
            out,
            mode,
            chunk_frames,
            full_attention,
            left_context,
            sink_frames,
            beam,
            max_symbols,
        } => {
            let flags = commands::DecodeFlags {
                mode,
                chunk_frames,
                full_attention,
                left_context,
                sink_frames,
                beam,
                max_symbols,
            };
            commands::decode(&ckpt, &data, out.as_deref(), &flags)
        }
        Cmd::InspectMask { chunk_frames, left_context, sink_frames, frames } => {
            commands::inspect_mask(chunk_frames, &left_context, sink_frames, frames)
        }
        Cmd::EvalWer { refs, hyps } => commands::eval_wer(&refs, &hyps),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

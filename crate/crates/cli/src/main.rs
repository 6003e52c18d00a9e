//! `tokenplane` command-line tool.
//!
//! Results go to standard output as JSON (tables with `--pretty`). Exit
//! codes: 0 success, 1 data error, 2 usage error.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use tokenplane::layout::DelayPattern;

/// Seed used whenever `--seed` is not given.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Parser, Debug)]
#[command(name = "tokenplane", version, about = "Multi-stream audio token toolkit")]
pub struct Cli {
    /// Print human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pub pretty: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a joint token grid, describe a layout, or inspect a grid file.
    Layout(LayoutArgs),
    /// Latency in ms of an acoustic delay pattern.
    Latency(LatencyArgs),
    /// Build an aligned text stream from word timings.
    Align(AlignArgs),
    /// Train a toy RQ-Transformer and write a checkpoint.
    RqtTrain(TrainArgs),
    /// Sample a token grid from a checkpoint.
    RqtSample(SampleArgs),
    /// Streaming speech recognition: audio tokens in, delayed text out.
    Asr(AsrArgs),
    /// Streaming synthesis from a queue of words.
    Tts(TtsArgs),
    /// Full-duplex session driven by the user's audio tokens.
    Dialogue(DialogueArgs),
    /// Entropy-based artifact report of a grid.
    Entropy(EntropyArgs),
    /// Fingerprint WAV files into a signature index.
    FpIndex(FpIndexArgs),
    /// Look up a WAV clip in a signature index.
    FpQuery(FpQueryArgs),
    /// Find segments repeated across a WAV corpus.
    FpDedup(FpDedupArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridFormat {
    /// Little-endian binary grid file.
    Binary,
    /// One JSON array of grid ids per step.
    Json,
}

#[derive(Args, Debug)]
pub struct LayoutArgs {
    /// Grid file (binary or JSONL) to describe instead of building one.
    #[arg(long, value_name = "GRID", value_parser = existing_file,
          conflicts_with_all = ["agent", "user", "text", "out"])]
    pub inspect: Option<PathBuf>,
    /// Also print every row with --inspect.
    #[arg(long, requires = "inspect")]
    pub rows: bool,
    /// Audio levels per speaker. Inferred from --agent when given.
    #[arg(long, default_value_t = 8)]
    pub q_levels: usize,
    /// Model audio codes: one JSON array of Q vocabulary ids per step.
    #[arg(long, value_parser = existing_file)]
    pub agent: Option<PathBuf>,
    /// User audio codes, same format as --agent.
    #[arg(long, value_parser = existing_file, requires = "agent")]
    pub user: Option<PathBuf>,
    /// Text stream: a JSON array of text vocabulary ids, one per step.
    #[arg(long, value_parser = existing_file, requires = "agent")]
    pub text: Option<PathBuf>,
    /// Describe or build a layout without the text stream.
    #[arg(long, conflicts_with = "text")]
    pub no_text: bool,
    /// Single speaker (no user streams).
    #[arg(long, conflicts_with = "user")]
    pub single: bool,
    /// Acoustic delay pattern, e.g. 0,1,1,1,1,1,1,1. Defaults to 0 then 1s.
    #[arg(long, value_parser = parse_pattern)]
    pub pattern: Option<DelayPattern>,
    /// Text delay in steps (negative delays the audio instead).
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub text_delay: i32,
    #[arg(long, default_value_t = 32000)]
    pub text_vocab: usize,
    #[arg(long, default_value_t = 2048)]
    pub audio_vocab: usize,
    /// Where to write the grid.
    #[arg(long, requires = "agent")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GridFormat::Binary)]
    pub format: GridFormat,
}

#[derive(Args, Debug)]
pub struct LatencyArgs {
    /// Acoustic delay pattern, e.g. 0,2,2,2,2,2,2,2.
    #[arg(long, value_parser = parse_pattern)]
    pub pattern: DelayPattern,
}

#[derive(Debug, Clone, Args)]
pub struct SpecialArgs {
    /// Text vocabulary id of PAD.
    #[arg(long, default_value_t = 0)]
    pub pad_id: u32,
    /// Text vocabulary id of EPAD.
    #[arg(long, default_value_t = 1)]
    pub epad_id: u32,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    /// Word timings, one {"word", "tokens", "start"} object per line.
    #[arg(long, value_parser = existing_file)]
    pub words: PathBuf,
    /// Stream length in frames.
    #[arg(long)]
    pub frames: usize,
    #[command(flatten)]
    pub special: SpecialArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Streams repeat the first stream of the previous step.
    Copy,
    /// Streams depend on other tokens of the same step.
    IntraStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Depth {
    Joint,
    Independent,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training grids (binary or JSONL). Without them a synthetic task is used.
    #[arg(long, value_parser = existing_file, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Task::IntraStep, conflicts_with = "data")]
    pub task: Task,
    /// Synthetic task vocabulary size.
    #[arg(long, default_value_t = 6)]
    pub vocab: usize,
    /// Steps per synthetic grid.
    #[arg(long, default_value_t = 12)]
    pub grid_steps: usize,
    /// Number of synthetic grids.
    #[arg(long, default_value_t = 32)]
    pub grids: usize,
    /// Optimizer steps.
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = Depth::Joint)]
    pub depth: Depth,
    #[arg(long, default_value_t = 64)]
    pub d_temporal: usize,
    #[arg(long, default_value_t = 32)]
    pub d_depth: usize,
    /// Weight semantic levels by 100 for grids laid out with Q levels per speaker.
    #[arg(long)]
    pub q_levels: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long, value_parser = existing_file)]
    pub model: PathBuf,
    /// Grid steps to generate.
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.8)]
    pub temperature: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Write the grid here instead of printing its rows.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GridFormat::Binary)]
    pub format: GridFormat,
}

#[derive(Args, Debug)]
pub struct EngineArgs {
    /// Checkpoint with Q+1 streams (ASR, TTS) or 2Q+1 streams (dialogue).
    #[arg(long, value_parser = existing_file)]
    pub model: PathBuf,
    #[command(flatten)]
    pub special: SpecialArgs,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Session log (JSONL).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AsrArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Input audio codes: one JSON array of Q vocabulary ids per step.
    #[arg(long, value_parser = existing_file)]
    pub audio: PathBuf,
    /// Text delay in steps.
    #[arg(long, default_value_t = 25)]
    pub delay: usize,
}

#[derive(Args, Debug)]
pub struct TtsArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Words to speak, one {"tokens": [...]} object per line.
    #[arg(long, value_parser = existing_file)]
    pub words: PathBuf,
    /// Audio delay in steps.
    #[arg(long, default_value_t = 25)]
    pub delay: usize,
    /// Target share of PAD/EPAD in the text stream.
    #[arg(long, default_value_t = 0.65)]
    pub pad_target: f64,
    #[arg(long, default_value_t = 0.7)]
    pub text_temperature: f64,
    #[arg(long, default_value_t = 0.8)]
    pub audio_temperature: f64,
    /// Stop after this many steps even if the session has not ended.
    #[arg(long, default_value_t = 2000)]
    pub max_steps: usize,
}

#[derive(Args, Debug)]
pub struct DialogueArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    /// User audio codes: one JSON array of Q vocabulary ids per step.
    #[arg(long, value_parser = existing_file)]
    pub user: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub text_temperature: f64,
    #[arg(long, default_value_t = 0.8)]
    pub audio_temperature: f64,
}

#[derive(Args, Debug)]
pub struct EntropyArgs {
    /// Grid file (binary or JSONL).
    #[arg(long, value_parser = existing_file)]
    pub grid: PathBuf,
    /// Audio levels analysed after the text stream.
    #[arg(long, default_value_t = 8)]
    pub q_levels: usize,
    /// Tokens per entropy estimate.
    #[arg(long, default_value_t = 64)]
    pub context: usize,
    /// Entropy values per classified window.
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub eta_flat: f64,
    #[arg(long, default_value_t = 2.0)]
    pub eta_silence: f64,
    #[arg(long, default_value_t = 3.5)]
    pub eta_gibberish: f64,
    #[arg(long, default_value_t = 0.6)]
    pub eta_noise: f64,
    /// Include the label of every window.
    #[arg(long)]
    pub windows: bool,
}

#[derive(Args, Debug)]
pub struct FpIndexArgs {
    /// WAV files (16 or 24 kHz); ids follow the argument order.
    #[arg(long, value_parser = existing_file, num_args = 1.., required = true)]
    pub audio: Vec<PathBuf>,
    /// Index file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FpQueryArgs {
    #[arg(long, value_parser = existing_file)]
    pub index: PathBuf,
    #[arg(long, value_parser = existing_file)]
    pub audio: PathBuf,
    /// 1 also matches keys whose frequencies differ by one band.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    pub tolerance: u8,
    /// Maximum number of results.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Minimum votes for a result.
    #[arg(long, default_value_t = 1)]
    pub min_votes: u32,
}

#[derive(Args, Debug)]
pub struct FpDedupArgs {
    /// WAV corpus (16 or 24 kHz).
    #[arg(long, value_parser = existing_file, num_args = 1.., required = true)]
    pub audio: Vec<PathBuf>,
    /// Other clips a signature must recur in.
    #[arg(long, default_value_t = 10)]
    pub min_matches: usize,
    /// Votes at one offset that make two clips match.
    #[arg(long, default_value_t = 5)]
    pub threshold: u32,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    pub tolerance: u8,
    /// Write the fused duplicate signatures here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

fn parse_pattern(s: &str) -> Result<DelayPattern, String> {
    DelayPattern::parse(s).map_err(|e| e.to_string())
}

/// Failures caught after parsing that are still the caller's fault.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.kind() == clap::error::ErrorKind::InvalidSubcommand {
                eprintln!("\n{}", Cli::command().render_help());
            }
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("Run with --help for usage.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

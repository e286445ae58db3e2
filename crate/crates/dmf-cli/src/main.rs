//! `dmf`: the full pipeline from one binary. `dataset-gen` renders the
//! synthetic corpus, `build-vocab` makes a vocabulary from raw comment
//! lines, `train` fits a variant, `generate` decodes comments, and
//! `evaluate` scores them.
//!
//! Exit codes are fixed for scripting: 0 success, 2 configuration
//! (flags, config files, `DMF_THREADS`), 3 data (corpora, vocabularies,
//! metric input files), 4 checkpoints, 5 evaluation. Argument parsing
//! errors from clap also exit 2.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;
pub const EXIT_EVAL: u8 = 5;

/// A failure already mapped to its exit code.
pub struct Fail {
    pub code: u8,
    pub msg: String,
}

pub fn fail(code: u8, msg: impl Into<String>) -> Fail {
    Fail {
        code,
        msg: msg.into(),
    }
}

/// Maps every error of one phase onto a single exit code. The same
/// library error can rate different codes by context: bad magic in a
/// frame blob is a data problem, bad magic in a checkpoint is a
/// checkpoint problem.
pub trait Phase<T> {
    fn phase(self, code: u8) -> Result<T, Fail>;
}

impl<T> Phase<T> for dmf::Result<T> {
    fn phase(self, code: u8) -> Result<T, Fail> {
        self.map_err(|e| fail(code, e.to_string()))
    }
}

#[derive(Parser)]
#[command(name = "dmf", version, about = "Joint video-and-live-comment modeling on a desk-scale budget")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic corpus into a directory
    DatasetGen(commands::DatasetGenArgs),
    /// Build a vocabulary file from whitespace-tokenized comment lines
    BuildVocab(commands::BuildVocabArgs),
    /// Train one model variant on a corpus
    Train(commands::TrainArgs),
    /// Decode one comment per clip of a corpus
    Generate(commands::GenerateArgs),
    /// Score generations against references and probability streams
    Evaluate(commands::EvaluateArgs),
}

/// `DMF_THREADS` caps worker threads. The numeric core is single
/// threaded, so any valid cap is already honored; the value is
/// validated and otherwise ignored.
fn check_threads() -> Result<(), Fail> {
    let Some(raw) = std::env::var_os("DMF_THREADS") else {
        return Ok(());
    };
    let s = raw.to_string_lossy();
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(()),
        _ => Err(fail(
            EXIT_CONFIG,
            format!("DMF_THREADS must be a positive integer, got {s:?}"),
        )),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = check_threads().and_then(|()| match cli.cmd {
        Cmd::DatasetGen(args) => commands::dataset_gen(args),
        Cmd::BuildVocab(args) => commands::build_vocab(args),
        Cmd::Train(args) => commands::train(args),
        Cmd::Generate(args) => commands::generate(args),
        Cmd::Evaluate(args) => commands::evaluate(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

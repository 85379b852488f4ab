//! `glimpse` command line.
//!
//! Exit codes: 0 ok, 1 input or validation error, 2 i/o error, 3 oracle error.

mod commands;
mod logging;
mod settings;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use settings::{ConfigFlags, EvalFlags, EvalSettings, RenderSettings, RunConfig};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::MissingFile(_) => EXIT_IO,
        Error::OracleUnavailable(_) | Error::OracleMalformed(_) => EXIT_ORACLE,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Parser)]
#[command(name = "glimpse", version, about = "Holistic cross-modal saliency for vision-language model traces")]
struct Cli {
    /// Emit log records as JSON lines on stderr.
    #[arg(long, global = true)]
    log_json: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Visual heatmap, prompt saliency and token relevance for one trace.
    Explain {
        trace_dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Source image for the overlay (defaults to the trace's image_path).
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Comparison explainer maps.
    Baseline {
        trace_dir: PathBuf,
        /// raw, rollout, gradcam, tmme, tmme-last-<k>, or all.
        #[arg(long, default_value = "all")]
        kind: String,
        /// Layers kept by the truncated TMME variant.
        #[arg(long)]
        last_k: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// NSS and rank correlation against human attention maps over a corpus.
    EvalAlign {
        corpus: PathBuf,
        /// glimpse or a baseline kind.
        #[arg(long, default_value = "glimpse")]
        method: String,
        #[arg(short, long)]
        out: PathBuf,
        /// Worker threads for per-sample parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        config: ConfigFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Deletion and insertion AUCs against a confidence oracle.
    EvalFaith {
        corpus: PathBuf,
        #[arg(long, default_value = "glimpse")]
        method: String,
        #[arg(short, long)]
        out: PathBuf,
        /// Use the in-process oracle driven by synthetic sidecars.
        #[arg(long, conflicts_with = "oracle")]
        synthetic_oracle: bool,
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        config: ConfigFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Build one synthetic trace from a JSON spec.
    Synth {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the simulated human attention map as CSV.
        #[arg(long)]
        human: Option<PathBuf>,
        /// Pixels per patch cell in the human map.
        #[arg(long, default_value_t = 4)]
        pixels_per_cell: usize,
    },
    /// Build a planted-signal corpus with human maps and a manifest.
    SynthCorpus {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        planted: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        signal: f64,
        #[arg(long, default_value_t = 8)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 36)]
        visual: usize,
        #[arg(long, default_value_t = 5)]
        prompt: usize,
        #[arg(long, default_value_t = 6)]
        generated: usize,
    },
    /// Check a trace and print the report as JSON.
    Validate {
        trace_dir: PathBuf,
        /// Allowed attention row-sum error.
        #[arg(long, default_value_t = crate::trace::DEFAULT_ROW_TOL)]
        row_tol: f64,
    },
    /// Serve the synthetic oracle for a corpus over TCP or stdio.
    ServeOracle {
        corpus: PathBuf,
        /// Address to listen on, e.g. 127.0.0.1:7070.
        #[arg(long, conflicts_with = "stdio")]
        listen: Option<String>,
        #[arg(long)]
        stdio: bool,
    },
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    logging::init(cli.log_json, cli.verbose, cli.quiet);
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::MissingFile("x".into())), EXIT_IO);
        assert_eq!(exit_code(&Error::OracleUnavailable("x".into())), EXIT_ORACLE);
        assert_eq!(exit_code(&Error::ShapeMismatch("x".into())), EXIT_INPUT);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["glimpse", "frobnicate"]), EXIT_INPUT);
        assert_eq!(run(["glimpse", "--version"]), EXIT_OK);
    }
}

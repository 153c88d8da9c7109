//! Command-line front end: argument parsing, command dispatch and exit codes.
//!
//! Exit codes: 0 success, 2 input or usage error, 3 model endpoint failure,
//! 4 evaluation finished with failed queries.

pub mod commands;
pub mod config;
pub mod serve;
pub mod setup;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use cirank_core::clients::ClientError;
use cirank_core::evalkit::EvalError;
use cirank_core::PipelineError;

pub use config::{ConfigArgs, RoleConfig, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_ENDPOINT: u8 = 3;
pub const EXIT_PARTIAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "cirank", version, about = "Two-stage composed image retrieval with LLM re-ranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert benchmark annotations into canonical queries.jsonl and gallery.jsonl.
    Ingest(commands::IngestArgs),
    /// Build a gallery index from a gallery manifest.
    Index(commands::IndexArgs),
    /// Run one composed query and print the ranked list as JSON.
    Retrieve(commands::RetrieveArgs),
    /// Evaluate a canonical dataset and write a metric report.
    Eval(commands::EvalArgs),
    /// Evaluate a grid of configurations and write a comparison table.
    Ablate(commands::AblateArgs),
    /// Write a seeded synthetic dataset and matching mock fixtures.
    Synth(commands::SynthArgs),
    /// Serve retrieval over HTTP.
    Serve(serve::ServeArgs),
}

/// Exit code for an error: endpoint failures map to 3, everything else to 2.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            if p.is_endpoint_failure() {
                return EXIT_ENDPOINT;
            }
        }
        if let Some(EvalError::Pipeline(p)) = cause.downcast_ref::<EvalError>() {
            if p.is_endpoint_failure() {
                return EXIT_ENDPOINT;
            }
        }
        if cause.downcast_ref::<ClientError>().is_some() {
            return EXIT_ENDPOINT;
        }
    }
    EXIT_INPUT
}

pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Index(a) => commands::index(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Serve(a) => serve::serve(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

/// Output directory flag shared by writing commands.
pub(crate) fn out_dir(p: &Option<PathBuf>, default: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| PathBuf::from(default))
}

//! Push-button front end: one binary that validates, runs, packages,
//! verifies, publishes, and replays experiment workflows.
//!
//! Exit codes: 0 success, 1 validation or parse error, 2 runtime or
//! execution failure, 3 verification mismatch, 4 publish failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

pub(crate) const EXIT_VALIDATION: u8 = 1;
pub(crate) const EXIT_EXECUTION: u8 = 2;
pub(crate) const EXIT_VERIFICATION: u8 = 3;
pub(crate) const EXIT_PUBLISH: u8 = 4;

/// A command failure: a message for stderr plus the contract exit code.
#[derive(Debug)]
pub(crate) struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_VALIDATION, message: message.into() }
    }
    pub fn execution(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_EXECUTION, message: message.into() }
    }
    pub fn verification(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_VERIFICATION, message: message.into() }
    }
    pub fn publish(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_PUBLISH, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub(crate) enum OutputFormat {
    /// Terse human-readable lines.
    #[default]
    Human,
    /// One machine-readable JSON document on stdout.
    Json,
}

#[derive(Parser)]
#[command(
    name = "xanthus",
    version,
    about = "Declarative multi-machine experiments: run, package, verify, publish, replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a commented starter workflow
    Init {
        /// Destination path (conventionally `<name>.xanthus`)
        path: PathBuf,
    },
    /// Parse a workflow and report structural problems
    Validate {
        /// Workflow document to check
        workflow: PathBuf,
    },
    /// Validate, then execute a workflow end to end
    Run {
        /// Workflow document to execute
        workflow: PathBuf,
        /// Backend override: mock, local, managed-vm, or cloud
        #[arg(long)]
        mode: Option<String>,
        /// Seed override for template rendering
        #[arg(long)]
        seed: Option<u64>,
        /// Directory holding run state, image cache, and machines
        #[arg(long, default_value = "xanthus-work")]
        workdir: PathBuf,
        /// Comma-separated job names to run (default: every job)
        #[arg(long)]
        jobs: Option<String>,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
    /// Package a recorded run into a self-describing archive
    Package {
        /// Directory holding run state
        #[arg(long, default_value = "xanthus-work")]
        workdir: PathBuf,
        /// Run to package (default: the latest in the workdir)
        #[arg(long)]
        run_id: Option<String>,
        /// Embed built machine images instead of references only
        #[arg(long)]
        include_images: bool,
        /// Directory the archive is written to
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Recompute every digest and coverage rule in an archive
    Verify {
        /// Archive to check
        archive: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
    /// Plan, and unless --dry-run execute, publication of an archive
    Publish {
        /// Verified archive to publish
        archive: PathBuf,
        /// Index into the workflow's publish targets
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Print the action plan without executing anything
        #[arg(long)]
        dry_run: bool,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
    /// Re-run a packaged archive and compare output digests
    Replay {
        /// Archive produced by `package`
        archive: PathBuf,
        /// Backend override for the replay
        #[arg(long)]
        mode: Option<String>,
        /// Collector substituted into every job
        #[arg(long)]
        collector: Option<String>,
        /// Directory holding run state for the replay
        #[arg(long, default_value = "xanthus-work")]
        workdir: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors; everything else is usage.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match cli.command {
        Command::Init { path } => commands::init(&path),
        Command::Validate { workflow } => commands::validate(&workflow),
        Command::Run { workflow, mode, seed, workdir, jobs, format } => {
            commands::run(commands::RunArgs { workflow, mode, seed, workdir, jobs, format })
        }
        Command::Package { workdir, run_id, include_images, out_dir } => {
            commands::package(commands::PackageArgs {
                workdir,
                run_id,
                include_images,
                out_dir,
            })
        }
        Command::Verify { archive, format } => commands::verify(&archive, format),
        Command::Publish { archive, target, dry_run, format } => {
            commands::publish(commands::PublishArgs { archive, target, dry_run, format })
        }
        Command::Replay { archive, mode, collector, workdir, format } => {
            commands::replay(commands::ReplayArgs { archive, mode, collector, workdir, format })
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use curvedflat_cli::commands::{env_out_dir, exit_code, resolve_out_dir, run, CliError, Command};
use curvedflat_cli::config::{Policy, RunConfig};

#[derive(Parser)]
#[command(name = "curvedflat", version, about = "Dressing, Lax-pair verification and Cartan tests for U/U0-systems")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides CURVEDFLAT_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit with code 3 when any node fails to factor.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Audit the invariants of the symmetric pair.
    PairCheck,
    /// Dress the vacuum and write v, ψ, f and Y.
    Dress,
    /// Run the full residual and convergence suite.
    Verify,
    /// Check a flow family: flow equation, flux identities, conserved integral.
    Flows,
    /// Cartan characters and the Cartan test of the canonical flag.
    EdsReport,
    /// Write every computed field as CSV.
    Export,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::PairCheck => Command::PairCheck,
            Cmd::Dress => Command::Dress,
            Cmd::Verify => Command::Verify,
            Cmd::Flows => Command::Flows,
            Cmd::EdsReport => Command::EdsReport,
            Cmd::Export => Command::Export,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let Some(path) = cli.config.as_ref() else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    let cfg = match RunConfig::from_path(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CliError::from(e).exit_code() as u8);
        }
    };
    let strict = cli.strict || cfg.policy == Policy::Strict;
    let out = resolve_out_dir(cli.out.as_deref(), env_out_dir(), &cfg);
    let result = run(cli.command.into(), &cfg, &out, strict);
    match &result {
        Ok(report) => print!("{}", report.summary()),
        Err(e) => eprintln!("error: {e:#}"),
    }
    println!("output: {}", out.display());
    ExitCode::from(exit_code(&result) as u8)
}

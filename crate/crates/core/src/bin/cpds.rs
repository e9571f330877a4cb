use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use cpds::io::pipeline::load_config;
use cpds::io::{run_pipeline, Command};
use cpds::synthesis::ReconSlice;
use cpds::Integrator;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    CheckModel,
    Solve,
    Synthesize,
    Baseline,
    EscapeReport,
    Full,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::CheckModel => Command::CheckModel,
            Cmd::Solve => Command::Solve,
            Cmd::Synthesize => Command::Synthesize,
            Cmd::Baseline => Command::Baseline,
            Cmd::EscapeReport => Command::EscapeReport,
            Cmd::Full => Command::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum IntegratorArg {
    Mpe,
    Euler,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReconSliceArg {
    Next,
    Same,
}

/// Optimal control of production-destruction systems by semi-Lagrangian
/// dynamic programming.
#[derive(Debug, Parser)]
#[command(name = "cpds", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,

    /// Run configuration (TOML); a run manifest works too.
    #[arg(long, short)]
    config: PathBuf,

    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads (0: all cores).
    #[arg(long, env = "CPDS_WORKERS")]
    workers: Option<usize>,

    #[arg(long, value_enum)]
    integrator: Option<IntegratorArg>,

    #[arg(long, value_enum)]
    recon_slice: Option<ReconSliceArg>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(i) = cli.integrator {
        cfg.integrator = match i {
            IntegratorArg::Mpe => Integrator::Mpe,
            IntegratorArg::Euler => Integrator::Euler,
        };
    }
    if let Some(r) = cli.recon_slice {
        cfg.recon_slice = match r {
            ReconSliceArg::Next => ReconSlice::Next,
            ReconSliceArg::Same => ReconSlice::Same,
        };
    }
    match run_pipeline(&cfg, cli.command.into()) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

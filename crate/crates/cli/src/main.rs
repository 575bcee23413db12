use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gnpolicy_cli::commands;

#[derive(Parser)]
#[command(name = "gnpolicy", version, about = "Gauss-Newton policy search experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized property suites.
    Validate {
        /// all, gradient, hessian, definiteness, affine, em-gn, consistency or cg.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train according to a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; without it the aggregate CSV goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hessian-term norms along a converged run on a tabular problem.
    DiagnoseHessian {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat training with one configuration entry set to each value in turn.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dot-separated path into the configuration, e.g. `schedule.alpha`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = io::stdout().lock();
    let result = match cli.command {
        Command::Validate { suite, seed } => commands::validate(&suite, seed, &mut stdout).map(|ok| if ok { 0 } else { 1 }),
        Command::Train { config, out } => commands::train(&config, out.as_deref(), &mut stdout).map(|_| 0),
        Command::DiagnoseHessian { config, out } => commands::diagnose_hessian(&config, &out).map(|_| 0),
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => commands::sweep(&config, &param, &values, out.as_deref(), &mut stdout).map(|_| 0),
    };
    let _ = stdout.flush();
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("gnpolicy: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

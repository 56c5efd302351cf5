use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use resexp::commands::{self, RunContext};
use resexp::exit;

#[derive(Parser)]
#[command(name = "resexp", version, about = "Residual-network expansion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed override; takes precedence over RESEXP_SEED and the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel jobs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    /// Do not echo summaries to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct WithConfig {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base network; writes model.json and train_trace.csv.
    Train(WithConfig),
    /// Insert a zero-output block, take the jumpboard step, select and certify.
    Expand(WithConfig),
    /// Re-certify a saved expansion record and print the inequality chains.
    Certify {
        /// expansion.txt written by `expand`.
        #[arg(long)]
        input: PathBuf,
        /// Confidence parameter override.
        #[arg(long)]
        delta: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo alignment failure rates against the analytic bound.
    Align(WithConfig),
    /// Coupled depth-width risk recursion and exponent fit.
    Scaling(WithConfig),
    /// Activation-gradient covariance diagnostics of a trained network.
    Covariance(WithConfig),
    /// Seeded grid sweep: gradient decay, joint scaling or expansion.
    Sweep(WithConfig),
}

fn context(c: &Common) -> RunContext {
    RunContext { out: c.out.clone(), seed: c.seed, workers: c.workers as usize, quiet: c.quiet }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG as u8 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train(&a.config, &context(&a.common)),
        Command::Expand(a) => commands::expand(&a.config, &context(&a.common)),
        Command::Certify { input, delta, common } => {
            commands::certify_cmd(input, *delta, &context(common))
        }
        Command::Align(a) => commands::align(&a.config, &context(&a.common)),
        Command::Scaling(a) => commands::scaling(&a.config, &context(&a.common)),
        Command::Covariance(a) => commands::covariance(&a.config, &context(&a.common)),
        Command::Sweep(a) => commands::sweep(&a.config, &context(&a.common)),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

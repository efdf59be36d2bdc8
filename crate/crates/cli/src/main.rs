mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{Ctx, SweepKey};

#[derive(Parser)]
#[command(
    name = "deps-cli",
    version,
    about = "Dual-view propensity-weighted sequential recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory shared by all steps of a run.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and its interaction log.
    Simulate,
    /// Temporal split with a popularity-resampled evaluation part.
    Split,
    /// Train on the split and write a checkpoint and loss trace.
    Train,
    /// Rank the test split with the trained model.
    Eval,
    /// Monte Carlo checks of unbiasedness and the variance bound.
    Verify,
    /// Repeat the pipeline over a grid of one knob.
    Sweep {
        #[arg(long, value_enum)]
        key: Key,
        /// Comma-separated values; the configured grid is used when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Every weighting mode, plus dual weighting without stage 1.
    Ablate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Key {
    Clip,
    Alpha,
}

fn run(cli: Cli) -> deps::Result<String> {
    let cfg = commands::load_config(cli.config.as_deref(), cli.seed)?;
    let ctx = Ctx::new(cfg, cli.out)?;
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Split => commands::split(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Verify => commands::verify(&ctx),
        Command::Sweep { key, values } => {
            let key = match key {
                Key::Clip => SweepKey::Clip,
                Key::Alpha => SweepKey::Alpha,
            };
            commands::sweep(&ctx, key, values)
        }
        Command::Ablate => commands::ablate(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

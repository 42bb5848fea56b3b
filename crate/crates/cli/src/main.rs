use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsac::trainer::Algorithm;
use tsac_cli::{emit_plot_data, run, Check, CliError, Command, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "tsac", version, about = "Two-timescale actor-critic experiments on finite MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Run the command named in the config file.
    Run(RunArgs),
    /// Train one algorithm on one seed.
    Train(RunArgs),
    /// Run enumeration-based checks; exits 1 if any fails.
    Diagnose(RunArgs),
    /// Integrate the two-timescale ODE limit.
    OdeFlow(RunArgs),
    /// Train every configured algorithm on every configured seed.
    Sweep(RunArgs),
    /// Split a run CSV into per-metric files for gnuplot.
    PlotData {
        /// Run CSV written by `train` or `sweep`.
        csv: PathBuf,
        #[arg(long, default_value = "plot")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_algorithm)]
    algo: Option<Algorithm>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    record_every: Option<u64>,
    /// Checks for `diagnose`; repeatable or comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_check)]
    check: Vec<Check>,
    #[arg(long)]
    allow_invalid_schedule: bool,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: tsac::Error| e.to_string())
}

fn parse_check(s: &str) -> Result<Check, String> {
    s.parse()
}

fn execute(args: RunArgs, command: Option<Command>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&Overrides {
        command,
        seed: args.seed,
        algorithm: args.algo,
        out: args.out,
        record_every: args.record_every,
        checks: args.check,
        allow_invalid_schedule: args.allow_invalid_schedule,
    });
    let outcome = run(&cfg)?;
    println!("{}", outcome.message);
    for f in outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Sub::Run(a) => execute(a, None),
        Sub::Train(a) => execute(a, Some(Command::Train)),
        Sub::Diagnose(a) => execute(a, Some(Command::Diagnose)),
        Sub::OdeFlow(a) => execute(a, Some(Command::OdeFlow)),
        Sub::Sweep(a) => execute(a, Some(Command::Sweep)),
        Sub::PlotData { csv, out } => emit_plot_data(&csv, &out).map(|files| {
            for f in files {
                println!("wrote {}", f.display());
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

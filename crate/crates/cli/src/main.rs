use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bdsde_cli::scenario::Format;
use bdsde_cli::{run, Command, Inputs, RunOptions};

#[derive(Parser)]
#[command(name = "bdsde", version, about = "Monte-Carlo solver for backward doubly stochastic differential equations")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one scenario and write the solution tables.
    Simulate(Args),
    /// Run the truncation ladder of a singular scenario.
    Ladder(Args),
    /// Build the random field and its diagnostics.
    Field(Args),
    /// Run the acceptance suite over a scenario directory or manifest.
    Verify {
        #[command(flatten)]
        args: Args,
        /// Comma-separated criterion ids; all by default.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
    },
}

#[derive(clap::Args)]
struct Args {
    /// Scenario file, scenario directory, or manifest.json of an earlier run.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args, criteria) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a, Vec::new()),
        Cmd::Ladder(a) => (Command::Ladder, a, Vec::new()),
        Cmd::Field(a) => (Command::Field, a, Vec::new()),
        Cmd::Verify { args, criteria } => (Command::Verify, args, criteria),
    };
    let opts = RunOptions {
        out: args.out,
        seed_override: args.seed_override,
        workers: args.workers,
        format: args.format.map(|f| match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }),
        criteria,
    };
    let result = Inputs::load(&args.scenario).and_then(|inputs| run(cmd, &inputs, &opts));
    match result {
        Ok(m) => {
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.phase());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

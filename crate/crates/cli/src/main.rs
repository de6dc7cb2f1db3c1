//! Command-line front end: `fit`, `region` and `simulate`.

mod error;
mod fit;
mod input;
mod region;
mod report;
mod simulate;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "sparseiv", version, about = "Lasso-based instrumental variables estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Lasso first stage, IV estimate and optional extras.
    Fit(fit::FitArgs),
    /// Sup-score confidence region over a grid.
    Region(region::RegionArgs),
    /// Monte Carlo replications.
    Simulate(simulate::SimulateArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => fit::run(a),
        Command::Region(a) => region::run(a),
        Command::Simulate(a) => simulate::run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

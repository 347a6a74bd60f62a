use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lcns::config::Scenario;
use lcns::run;

#[derive(Parser)]
#[command(name = "lcns", version, about = "Optimal control of linearized compressible flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario description (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and the manifest
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// RNG seed for sampled certificates (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for verification (0 = all available cores)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Build the base state and write its snapshots and report
    Manufacture,
    /// Solve the uncontrolled linearized system and the energy balance
    Forward,
    /// Solve forward then adjoint; write costate snapshots and norms
    Adjoint,
    /// Compute the optimal control and the iterate log
    Optimize,
    /// Run certificate checks; nonzero exit when any fails
    Verify {
        /// pontryagin | cone | spike | dependence | gradient | lame | energy | all
        #[arg(default_value = "all")]
        which: String,
    },
    /// Print the manifest and summary of a previous run in --out
    Report,
}

fn load_scenario(cli: &Cli) -> lcns::Result<Scenario> {
    let path = cli.config.as_ref().ok_or_else(|| lcns::Error::Config {
        key: "--config".into(),
        message: "this subcommand needs a scenario file".into(),
    })?;
    Scenario::load(path)
}

fn dispatch(cli: &Cli) -> lcns::Result<bool> {
    if let Command::Report = cli.command {
        print!("{}", run::run_report(&cli.out)?);
        return Ok(true);
    }
    let sc = load_scenario(cli)?;
    let seed = cli.seed.unwrap_or(sc.config.verify.seed);
    match &cli.command {
        Command::Manufacture => run::run_manufacture(&sc, &cli.out, seed)?,
        Command::Forward => run::run_forward(&sc, &cli.out, seed)?,
        Command::Adjoint => run::run_adjoint(&sc, &cli.out, seed)?,
        Command::Optimize => run::run_optimize(&sc, &cli.out, seed)?,
        Command::Verify { which } => {
            let pass = run::run_verify(&sc, which, &cli.out, seed, cli.threads)?;
            let text = std::fs::read_to_string(cli.out.join("report.txt"))?;
            print!("{text}");
            return Ok(pass);
        }
        Command::Report => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LCNS_LOG")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use pdcguard::harness::{
    check_expectations, export_trace, list_scenarios, run_scenario, Format, ScenarioConfig, MAX_SEED,
};
use pdcguard::Error;

#[derive(Parser)]
#[command(name = "pdcguard", version, about = "Attack-resilient distributed mode estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and export its trace.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Iteration budget override.
        #[arg(long)]
        iters: Option<usize>,
        /// Seed override for residues and noise.
        #[arg(long, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// List the scenario files in a directory.
    ListScenarios {
        #[arg(long, default_value = "scenarios")]
        dir: PathBuf,
    },
    /// Run a scenario and check its embedded expectations.
    Verify {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn fail(err: &Error) -> ExitCode {
    let record = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
    eprintln!("{record}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Run { scenario, iters, seed, out, format } => {
            let mut config = ScenarioConfig::load(&scenario)?;
            if let Some(n) = iters {
                config.admm.iters = n;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            let format = match format {
                Some(FormatArg::Csv) => Format::Csv,
                Some(FormatArg::Json) => Format::Json,
                None => config.output.format,
            };
            let dir = out
                .or_else(|| config.output.dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out").join(&config.name));
            let trace = run_scenario(&config)?;
            let files = export_trace(&trace, format, &dir)?;
            let summary = serde_json::json!({
                "scenario": trace.scenario,
                "presence": trace.report.presence,
                "status": trace.report.status,
                "identified": trace.report.identified_malicious,
                "confirmed_at_iteration": trace.report.confirmed_at_iteration,
                "consensus_error": trace.consensus_error,
                "max_mode_error": trace.mode_comparison.max_error,
                "files": files,
            });
            println!("{summary}");
            Ok(ExitCode::SUCCESS)
        }
        Command::ListScenarios { dir } => {
            for (path, config) in list_scenarios(&dir)? {
                println!(
                    "{}\t{}\t{:?}\t{}",
                    config.name,
                    path.display(),
                    config.detection.method,
                    config.description
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { scenario } => {
            let config = ScenarioConfig::load(&scenario)?;
            let trace = run_scenario(&config)?;
            let checks = check_expectations(&config, &trace);
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if ok {
                Ok(ExitCode::SUCCESS)
            } else {
                let record = serde_json::json!({
                    "error": "verification_failed",
                    "scenario": config.name,
                    "failed": checks.iter().filter(|c| !c.passed).collect::<Vec<_>>(),
                });
                eprintln!("{record}");
                Ok(ExitCode::from(1))
            }
        }
    }
}

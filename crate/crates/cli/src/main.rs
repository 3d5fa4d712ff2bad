use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tclab::harness::{run_scenario_with, CheckKind, RunOptions, RunReport, Scenario, Verdict};

/// Construct time-changed Markov processes and verify their forward equations.
#[derive(Debug, Parser)]
#[command(name = "tclab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify the zeros of H by integrability of 1/H.
    Classify(Common),
    /// Simulate the ensemble and export it with the first path and time change.
    Simulate(Common),
    /// Weak Fokker-Planck residual over the test-function dictionary.
    CheckFp {
        #[command(flatten)]
        common: Common,
        /// Check this ensemble CSV (`path_id,t,value`) instead of simulating.
        #[arg(long, value_name = "FILE")]
        ensemble: Option<PathBuf>,
    },
    /// Homogeneous and inhomogeneous martingale residuals.
    CheckMartingale(Common),
    /// Space-time martingale residuals for each start time.
    CheckSpacetime(Common),
    /// Fixed-point residual of every path at the mesh and the refined mesh.
    CheckPathwise(Common),
    /// Kolmogorov-Smirnov comparison with an Euler-Maruyama ensemble.
    CheckUniqueness(Common),
    /// Every check listed in the scenario.
    Run(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output directory for CSV artifacts and report.json.
    #[arg(long, value_name = "DIR", default_value = "tclab-out")]
    out: PathBuf,
    /// Override the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, env = "TCLAB_WORKERS", default_value_t = 0)]
    workers: usize,
    /// Tolerance overrides, e.g. `solver_tol=1e-10,ks_c_alpha=1.36`.
    #[arg(long, value_name = "KEY=VALUE,...")]
    tol: Option<String>,
}

fn load(common: &Common, checks: Option<Vec<CheckKind>>) -> tclab::Result<Scenario> {
    let mut scenario = Scenario::load(&common.config)?;
    if let Some(seed) = common.seed {
        scenario.monte_carlo.master_seed = seed;
    }
    if let Some(tol) = &common.tol {
        scenario.tolerances = scenario.tolerances.with_overrides(tol)?;
    }
    if let Some(checks) = checks {
        scenario.checks = checks;
    }
    Ok(scenario)
}

fn print_summary(report: &RunReport, out: &std::path::Path) {
    for (name, check) in &report.checks {
        match &check.verdict {
            Verdict::Pass => println!("{name:<12} pass"),
            Verdict::Fail => println!("{name:<12} FAIL"),
            Verdict::Inconclusive => println!("{name:<12} inconclusive"),
            Verdict::Skipped { reason } => println!("{name:<12} skipped ({reason})"),
        }
    }
    println!("report: {}", out.join("report.json").display());
}

fn execute(cli: Cli) -> tclab::Result<i32> {
    let (common, checks, external, simulate) = match cli.command {
        Command::Classify(c) => (c, Some(vec![CheckKind::Classify]), None, false),
        Command::Simulate(c) => (c, Some(vec![]), None, true),
        Command::CheckFp { common, ensemble } => (common, Some(vec![CheckKind::Fp]), ensemble, false),
        Command::CheckMartingale(c) => (c, Some(vec![CheckKind::Martingale]), None, false),
        Command::CheckSpacetime(c) => (c, Some(vec![CheckKind::Spacetime]), None, false),
        Command::CheckPathwise(c) => (c, Some(vec![CheckKind::Pathwise]), None, false),
        Command::CheckUniqueness(c) => (c, Some(vec![CheckKind::Uniqueness]), None, false),
        Command::Run(c) => (c, None, None, false),
    };
    let scenario = load(&common, checks)?;
    let options = RunOptions { workers: common.workers, external_ensemble: external, always_simulate: simulate };
    let report = run_scenario_with(&scenario, &common.out, &options)?;
    print_summary(&report, &common.out);
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

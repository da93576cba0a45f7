use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expdelay_cli::commands;
use expdelay_cli::{CliError, LoadedScenario};

#[derive(Parser)]
#[command(name = "expdelay", version, about = "Exponential-utility trading under delayed information")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the scenario's `outputs`, relative to the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the optimal strategy and value.
    Solve(Common),
    /// Closed-form quantities of the example market.
    Oracle(Common),
    /// Solve on a sequence of grids.
    Convergence {
        #[command(flatten)]
        common: Common,
        /// Comma-separated, increasing step counts.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<usize>,
    },
    /// Monte Carlo checks of the solution.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Check the zero strategy instead of the optimal one.
        #[arg(long)]
        zero_strategy: bool,
    },
    /// Write the prepared and solved kernels as CSV.
    DumpKernels(Common),
}

fn out_dir(common: &Common, sc: Option<&LoadedScenario>) -> Option<PathBuf> {
    if let Some(out) = &common.out {
        return Some(out.clone());
    }
    sc.map(|s| s.base_dir.join(&s.scenario.outputs))
}

fn run(command: &Command, common: &Common) -> Result<(), (CliError, Option<PathBuf>)> {
    let sc = LoadedScenario::load(&common.config, common.seed).map_err(|e| (e, out_dir(common, None)))?;
    let out = out_dir(common, Some(&sc)).expect("scenario supplies a default");
    let fail = |e: CliError| (e, Some(out.clone()));
    match command {
        Command::Solve(_) => {
            let r = commands::run_solve(&sc, &out).map_err(fail)?;
            println!("value = {:.12e}", r.value.value);
            if let Some(o) = &r.oracle {
                println!("oracle = {:.12e}  relative error = {:.3e}", o.oracle_value, o.relative_error);
            }
        }
        Command::Oracle(_) => {
            let r = commands::run_oracle(&sc, &out).map_err(fail)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
        Command::Convergence { levels, .. } => {
            let rows = commands::run_convergence(&sc, levels, &out).map_err(fail)?;
            for r in rows {
                println!("N = {:5}  value = {:.12e}  residual = {:.2e}", r.n_steps, r.value, r.system_residual);
            }
        }
        Command::Validate { zero_strategy, .. } => {
            let r = commands::run_validate(&sc, &out, *zero_strategy).map_err(fail)?;
            let verdict = |p: bool| if p { "PASS" } else { "FAIL" };
            println!(
                "utility        {}  {:.6} ± {:.6} vs {:.6}",
                verdict(r.utility.pass),
                r.utility.estimate.mean,
                r.utility.estimate.std_error,
                r.utility.target
            );
            println!(
                "perturbation   {}  {} failures, max improvement {:.2} SE",
                verdict(r.perturbation.pass),
                r.perturbation.failures,
                r.perturbation.max_improvement_se
            );
            println!(
                "risk aversion  {}  max gap {:.2} SE",
                verdict(r.risk_aversion.pass),
                r.risk_aversion.max_gap_se
            );
            println!(
                "normalization  {}  {:.6} ± {:.6}",
                verdict(r.rn_normalization.pass),
                r.rn_normalization.mean,
                r.rn_normalization.std_error
            );
            if !r.pass {
                return Err(fail(CliError::Statistical("at least one check failed; see validate.json".into())));
            }
        }
        Command::DumpKernels(_) => commands::run_dump_kernels(&sc, &out).map_err(fail)?,
    }
    Ok(())
}

fn report(err: &CliError, out: Option<&Path>) {
    let json = serde_json::to_string_pretty(&err.diagnostic()).expect("diagnostic serializes");
    if let Some(dir) = out {
        // best effort: the diagnostic also goes to stderr
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), format!("{json}\n"));
        }
    }
    eprintln!("{json}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Solve(c) | Command::Oracle(c) | Command::DumpKernels(c) => c,
        Command::Convergence { common, .. } | Command::Validate { common, .. } => common,
    };
    match run(&cli.command, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err((err, out)) => {
            report(&err, out.as_deref());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

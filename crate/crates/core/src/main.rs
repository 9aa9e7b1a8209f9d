use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pwsopt::cli::{self, ConvergeArgs, OptimizeArgs, SimulateArgs};

/// Simulate, optimize and study bimodal piecewise-smooth systems.
#[derive(Parser)]
#[command(name = "pwsopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a configured system and write its trajectory.
    Simulate(SimulateArgs),
    /// Optimize the configured inputs and replay them on the Filippov system.
    Optimize(OptimizeArgs),
    /// Run a convergence or boundedness study; exit 4 when it fails.
    Converge(ConvergeArgs),
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let code = match run(args.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn run(command: Command) -> Result<i32, cli::CliError> {
    match command {
        Command::Simulate(a) => {
            let traj = cli::simulate(&a)?;
            println!(
                "{} samples, {} events, final time {} -> {}",
                traj.len(),
                traj.events.len(),
                traj.final_time(),
                a.out.display()
            );
            Ok(cli::EXIT_OK)
        }
        Command::Optimize(a) => {
            let report = cli::optimize(&a)?;
            print!("{}", report.text_summary());
            println!("artifacts in {}", a.out_dir.display());
            Ok(cli::EXIT_OK)
        }
        Command::Converge(a) => {
            let v = cli::converge(&a)?;
            match (&v.error, v.slope, v.ratio) {
                (Some(e), _, _) => println!("FAIL: {e}"),
                (None, Some(s), _) => println!(
                    "{}: slope {s:.4}, r^2 {:.4}",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.r_squared.unwrap_or(f64::NAN)
                ),
                (None, None, Some(r)) => println!("{}: ratio {r:.4}", if v.pass { "PASS" } else { "FAIL" }),
                _ => {}
            }
            Ok(cli::verdict_exit_code(&v))
        }
    }
}

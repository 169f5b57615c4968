use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hopper_cli::{load_scenario, run_scenario, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "hopper", version, about = "Run hopping-robot MPC scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file and write trace, MPC log and summary.
    Run {
        scenario: PathBuf,
        /// Directory for the output files.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Simulate this many seconds instead of the scenario duration.
        #[arg(long)]
        duration_override: Option<f64>,
        /// Interleave MPC solves synchronously (reproducible output).
        #[arg(long)]
        deterministic: bool,
        /// Run the MPC on a worker thread against wall-clock time.
        #[arg(long, conflicts_with = "deterministic")]
        realtime_sim: bool,
        /// Write one trace row every N ticks.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        log_every: u64,
    },
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run {
            scenario,
            out_dir,
            duration_override,
            deterministic,
            realtime_sim,
            log_every,
        } => {
            let s = load_scenario(&scenario)?;
            let opts = RunOptions {
                out_dir,
                duration_override,
                force_deterministic: deterministic,
                realtime: realtime_sim,
                log_every: log_every as usize,
            };
            let out = run_scenario(&s, &opts)?;
            let sm = &out.summary;
            println!(
                "{}: {} hops, final xy error {:.3} m, mean solve {:.2} ms, {} stale",
                sm.name,
                sm.hop_count,
                sm.final_position_error,
                sm.mean_solve_time * 1e3,
                sm.stale_solves
            );
            println!("wrote {}", out.summary_path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hopper: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

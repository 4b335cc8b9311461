use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use soliton_lab::sweep::parse_values;
use soliton_lab::{run_scenario_file, sweep, verify, LabResult, Scenario};

#[derive(Parser)]
#[command(name = "soliton-lab", version, about = "Trapped NLS soliton laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run { scenario: PathBuf },
    /// Run a scenario once per value of a numeric parameter.
    Sweep {
        scenario: PathBuf,
        /// Field name (`h`) or dotted path (`task_params.z0`).
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 0.2,0.1,0.05.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// Worker count; defaults to the logical core count.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Re-check every output listed in a run manifest.
    Verify { manifest: PathBuf },
}

fn execute(cli: Cli) -> LabResult<()> {
    match cli.command {
        Command::Run { scenario } => {
            let report = run_scenario_file(&scenario)?;
            println!("{}", report.manifest_path.display());
        }
        Command::Sweep {
            scenario,
            param,
            values,
            jobs,
        } => {
            let s = Scenario::load(&scenario)?;
            let values = parse_values(&values)?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let out = s.resolved_output_dir();
            let table = sweep(&s, &param, &values, jobs, &out)?;
            for w in &table.warnings {
                eprintln!("[sweep] warning: {w}");
            }
            println!("{}", out.join(soliton_lab::sweep::SWEEP_FILE).display());
        }
        Command::Verify { manifest } => {
            let m = verify(&manifest)?;
            println!("{} outputs verified", m.outputs.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

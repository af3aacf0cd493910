use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fledgesim_cli::{cmd_run, cmd_sweep, cmd_viability, print_viability, CliError, SEED_ENV};
use fledgesim_core::viability::DEFAULT_SAMPLES;

#[derive(Parser)]
#[command(name = "fledgesim", version, about = "Deterministic federated learning simulator for edge systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write summary.json, rounds.csv and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dotted-path override, e.g. `dropout.p=0.5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run one experiment per value of a numeric field and write matrix.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted key, or one of the aliases z, p, q, mu, alpha.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Estimate per-round computation/communication balance for a model size.
    Viability {
        #[arg(long)]
        params: usize,
        #[arg(long)]
        network: String,
        #[arg(long)]
        device: String,
        /// Samples trained per round.
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let env_seed = std::env::var(SEED_ENV).ok();
    match cli.command {
        Command::Run { config, out, overrides } => {
            let s = cmd_run(&config, &out, &overrides, env_seed.as_deref())?;
            println!("final accuracy {} over {} repeat(s); {:.6e} kWh", s.final_accuracy, s.repeats, s.total_kwh);
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            overrides,
        } => {
            let rows = cmd_sweep(&config, &axis, &values, &out, &overrides, env_seed.as_deref())?;
            for r in rows {
                println!("{}={:<8} accuracy {:.4}±{:.4}  epsilon {}", r.axis, r.value, r.accuracy_mean, r.accuracy_std, r.epsilon);
            }
            println!("wrote {}", out.join("matrix.csv").display());
        }
        Command::Viability {
            params,
            network,
            device,
            samples,
            json,
        } => {
            let report = cmd_viability(params, &network, &device, samples)?;
            let mut stdout = std::io::stdout().lock();
            let res = if json {
                serde_json::to_writer_pretty(&mut stdout, &report).map_err(std::io::Error::from)
            } else {
                print_viability(&report, &mut stdout)
            };
            res.map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fledgesim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

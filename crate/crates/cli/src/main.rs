use clap::{Parser, Subcommand};
use qi_dpfl_cli::{config, plot, runner};
use qi_dpfl_core::game::{equilibrium_round, reduce_to_interior, verify_equilibrium};
use qi_dpfl_core::model::ModelShape;
use qi_dpfl_core::selection::select_clients;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qi-dpfl", about = "Federated learning simulator with incentives and privacy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy x seed cell from a config file.
    Run {
        config: PathBuf,
        /// Output directory for CSVs and the run summary.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the worker thread count from the config.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render SVG charts from previously written run CSVs.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the closed-form equilibrium against numeric oracles for
    /// every round and seed of a config, without training.
    Verify { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { config, out, seed, workers } => {
            let mut cfg = config::parse_config(&config).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            if let Some(workers) = workers {
                if workers == 0 {
                    return Err("workers must be >= 1".into());
                }
                cfg.workers = workers;
            }
            let summary = runner::run_all(&cfg, &out).map_err(|e| e.to_string())?;
            let degraded = summary.cells.iter().filter(|c| c.degraded).count();
            println!(
                "wrote {} cells to {} ({} degraded)",
                summary.cells.len(),
                out.display(),
                degraded
            );
            if degraded > 0 {
                return Err(format!("{degraded} cells exceeded the equilibrium tolerance"));
            }
            Ok(())
        }
        Command::Plot { csv, out } => {
            let written = plot::plot_files(&csv, &out).map_err(|e| e.to_string())?;
            println!("wrote {} charts to {}", written.len(), out.display());
            Ok(())
        }
        Command::Verify { config } => {
            let cfg = config::parse_config(&config).map_err(|e| e.to_string())?;
            verify_config(&cfg)
        }
    }
}

/// Equilibrium-oracle suite: for each seed, assemble the game over the
/// selected clients and check every round's closed-form solution against
/// the numeric best-response and cost-minimization oracles.
fn verify_config(cfg: &config::ExperimentConfig) -> Result<(), String> {
    let mut failures = 0usize;
    for seed in 0..cfg.seed_count as u64 {
        let exp = cfg.build_experiment(seed).map_err(|e| e.to_string())?;
        let selected = select_clients(&exp.profiles, &exp.selection).map_err(|e| e.to_string())?;
        let profiles: Vec<_> = selected.iter().map(|&i| &exp.profiles[i]).collect();
        let shape = ModelShape {
            n_features: exp.test.n_features(),
            classes: exp.test.class_count(),
        };
        let game = exp.game.instance_for(&profiles, shape.dim());
        let (kept, game) = reduce_to_interior(&game).map_err(|e| e.to_string())?;
        if kept.len() < profiles.len() {
            println!("seed {seed}: {} of {} clients interior", kept.len(), profiles.len());
        }
        let mut max_residual = 0.0f64;
        let mut ok = true;
        for t in 1..=exp.rounds {
            let round = equilibrium_round(t, &game).map_err(|e| e.to_string())?;
            let report =
                verify_equilibrium(&round, &game, runner::RESIDUAL_TOLERANCE)
                    .map_err(|e| e.to_string())?;
            max_residual = max_residual.max(report.max_residual());
            ok &= report.passed();
        }
        println!(
            "seed {seed}: {} over {} rounds, max residual {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            exp.rounds,
            max_residual
        );
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        Err(format!("{failures} seed(s) failed equilibrium verification"))
    } else {
        Ok(())
    }
}

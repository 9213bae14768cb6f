//! Drives strategy x seed experiment cells, writes one CSV per cell plus
//! a run-level JSON summary. All output files are written to a temp file
//! first and renamed into place so readers never observe partial files.

use crate::config::ExperimentConfig;
use qi_dpfl_core::strategies::{run_experiment, ExperimentResult, StrategyKind};
use serde::Serialize;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("strategy error in {strategy} seed {seed}: {source}")]
    Strategy {
        strategy: &'static str,
        seed: u64,
        source: qi_dpfl_core::strategies::StrategyError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Equilibrium residuals above this are reported as degraded cells.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub strategy: String,
    pub seed: u64,
    pub csv: String,
    pub rounds: usize,
    pub participants: Vec<usize>,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub total_server_cost: f64,
    pub total_rho: f64,
    /// Largest best-response residual observed across rounds, when the
    /// strategy verifies its equilibrium.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_equilibrium_residual: Option<f64>,
    pub degraded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub master_seed: u64,
    pub seed_count: usize,
    pub strategies: Vec<String>,
    pub cells: Vec<CellSummary>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.display().to_string(), source }
}

/// Write `bytes` to `path` atomically via a sibling temp file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Render one experiment cell as CSV. The per-client columns cover the
/// selected participants in ascending id order; every float goes through
/// plain `Display` so reruns are byte-identical.
pub fn render_csv(result: &ExperimentResult, seed: u64) -> String {
    let mut ids = result.participants.clone();
    ids.sort_unstable();

    let mut out = String::new();
    out.push_str(
        "round,strategy,seed,accuracy,loss,reward,rho_total,\
         server_cost_accuracy_term,server_cost_reward_term,server_cost_total",
    );
    for id in &ids {
        out.push_str(&format!(",client_{id}_rho,client_{id}_utility"));
    }
    out.push('\n');

    for o in &result.outcomes {
        let rho_total: f64 = o.clients.iter().map(|c| c.rho).sum();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}",
            o.t,
            result.strategy.name(),
            seed,
            o.accuracy,
            o.loss,
            o.reward,
            rho_total,
            o.cost_accuracy_term,
            o.cost_reward_term,
            o.cost_total,
        ));
        for id in &ids {
            let rec = o
                .clients
                .iter()
                .find(|c| c.id == *id)
                .expect("participant missing from round record");
            out.push_str(&format!(",{},{}", rec.rho, rec.utility));
        }
        out.push('\n');
    }
    out
}

fn summarize_cell(
    result: &ExperimentResult,
    seed: u64,
    csv_name: &str,
) -> CellSummary {
    let last = result.outcomes.last();
    let max_residual = result
        .outcomes
        .iter()
        .filter_map(|o| o.equilibrium_residual)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    let total_rho: f64 = result
        .outcomes
        .iter()
        .flat_map(|o| o.clients.iter().map(|c| c.rho))
        .sum();
    CellSummary {
        strategy: result.strategy.name().to_string(),
        seed,
        csv: csv_name.to_string(),
        rounds: result.outcomes.len(),
        participants: {
            let mut ids = result.participants.clone();
            ids.sort_unstable();
            ids
        },
        final_accuracy: last.map_or(f64::NAN, |o| o.accuracy),
        final_loss: last.map_or(f64::NAN, |o| o.loss),
        total_server_cost: result.outcomes.iter().map(|o| o.cost_total).sum(),
        total_rho,
        max_equilibrium_residual: max_residual,
        degraded: max_residual.is_some_and(|r| r > RESIDUAL_TOLERANCE),
    }
}

/// Run every strategy x seed cell from the config and write results under
/// `out_dir`. Cells execute on `workers` threads; output order in the
/// summary is deterministic regardless of scheduling.
pub fn run_all(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, RunnerError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let strategies = cfg.strategy_kinds()?;

    let mut cells: Vec<(StrategyKind, u64)> = Vec::new();
    for seed in 0..cfg.seed_count as u64 {
        for &s in &strategies {
            cells.push((s, seed));
        }
    }

    // Shards depend only on the seed, so build each experiment once and
    // share it across strategies.
    let experiments: Vec<_> = (0..cfg.seed_count as u64)
        .map(|seed| cfg.build_experiment(seed))
        .collect::<Result<_, _>>()?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(ExperimentResult, PathBuf), RunnerError>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(cells.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (strategy, seed) = cells[i];
                let outcome = run_cell(strategy, seed, &experiments[seed as usize], out_dir);
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let mut summary = RunSummary {
        master_seed: cfg.master_seed,
        seed_count: cfg.seed_count,
        strategies: strategies.iter().map(|s| s.name().to_string()).collect(),
        cells: Vec::new(),
    };
    for (i, slot) in results.into_inner().unwrap().into_iter().enumerate() {
        let (result, csv_path) = slot.expect("cell not executed")?;
        let csv_name = csv_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        summary.cells.push(summarize_cell(&result, cells[i].1, &csv_name));
    }

    let json = serde_json::to_vec_pretty(&summary)?;
    write_atomic(&out_dir.join("summary.json"), &json)?;
    Ok(summary)
}

fn run_cell(
    strategy: StrategyKind,
    seed: u64,
    exp: &qi_dpfl_core::strategies::Experiment,
    out_dir: &Path,
) -> Result<(ExperimentResult, PathBuf), RunnerError> {
    log::info!("running {} seed {}", strategy.name(), seed);
    let result = run_experiment(strategy, exp).map_err(|source| RunnerError::Strategy {
        strategy: strategy.name(),
        seed,
        source,
    })?;
    let csv = render_csv(&result, seed);
    let path = out_dir.join(format!("{}_seed{}.csv", strategy.name(), seed));
    write_atomic(&path, csv.as_bytes())?;
    Ok((result, path))
}

//! End-to-end acceptance gate. Each test covers one release criterion and
//! prints a single PASS/FAIL line; tolerances are stated inline.

use qi_dpfl_cli::config::{parse_config_str, ExperimentConfig};
use qi_dpfl_cli::runner;
use qi_dpfl_core::data::{generate_synthetic, Dataset};
use qi_dpfl_core::game::{
    best_response_oracle, budget_coefficient, equilibrium_round, fit_accuracy_model,
    golden_section_min, optimal_budget, optimal_reward, reward_range, server_round_cost,
    AccuracyModel, FitOptions, GameInstance,
};
use qi_dpfl_core::model::{gradient, loss, ModelShape};
use qi_dpfl_core::privacy::{noise_variance, perturb, BudgetLedger};
use qi_dpfl_core::selection::emd;
use qi_dpfl_core::strategies::{run_experiment, total_server_cost, Experiment, StrategyKind};
use qi_dpfl_core::ParameterVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn report(criterion: &str, pass: bool) {
    println!("acceptance: {criterion}: {}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion failed: {criterion}");
}

/// Random game instance whose budget coefficients are all positive, so
/// every client participates at equilibrium.
fn random_interior_instance(rng: &mut ChaCha8Rng) -> GameInstance {
    loop {
        let n = rng.gen_range(2..=10usize);
        let valuations: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
        let g = GameInstance {
            horizon: rng.gen_range(1..=50),
            gamma: rng.gen_range(0.05..0.95),
            discount: rng.gen_range(0.5..1.0),
            phi1: rng.gen_range(0.1..10.0),
            valuations,
            beta: rng.gen_range(0.1..5.0),
            lambda: rng.gen_range(0.1..5.0),
            clip: rng.gen_range(0.1..3.0),
            dim: rng.gen_range(1..=200),
            grad_bound: rng.gen_range(0.0..2.0),
            shard_sizes: (0..n).map(|_| rng.gen_range(1..500usize)).collect(),
            fixed_costs: (0..n).map(|_| rng.gen_range(0.0..0.5)).collect(),
        };
        if (0..n).all(|i| budget_coefficient(i, &g) > 0.0) {
            return g;
        }
    }
}

#[test]
fn criterion_1_equilibrium_oracle_equivalence() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
    let mut pass = true;
    for _ in 0..100 {
        let g = random_interior_instance(&mut rng);
        let n = g.client_count();
        let reward = rng.gen_range(0.1..100.0);

        // Stage II: closed-form budgets vs numeric best responses, given
        // everyone else's closed-form play, within 1e-6 absolute. The raw
        // utility is too flat near its peak for a direct search to resolve
        // 1e-6 on large budgets, so the independent oracle golden-sections
        // the magnitude of the utility slope
        // d/drho [rho/(rho+sigma) R - phi1 nu rho], which is V-shaped at
        // the best response and numerically well conditioned.
        let budgets: Vec<f64> =
            (0..n).map(|i| optimal_budget(i, reward, &g).unwrap().rho).collect();
        let total: f64 = budgets.iter().sum();
        for i in 0..n {
            let sigma: f64 = total - budgets[i];
            let slope = |rho: f64| {
                (sigma * reward / ((rho + sigma) * (rho + sigma))
                    - g.phi1 * g.valuations[i])
                    .abs()
            };
            let oracle = golden_section_min(slope, 0.0, 10.0 * (total + 1.0), 1e-9);
            pass &= (oracle - budgets[i]).abs() < 1e-6;
            // Cross-check the flat-utility search at a loose tolerance so
            // the production oracle stays covered too.
            let others: Vec<f64> =
                (0..n).filter(|&j| j != i).map(|j| budgets[j]).collect();
            let coarse =
                best_response_oracle(i, &others, reward, &g, 10.0 * (total + 1.0)).unwrap();
            pass &= (coarse - budgets[i]).abs() <= 1e-4 * (1.0 + budgets[i]);
        }

        // Stage I: closed-form reward vs a 1-D numeric minimizer of the
        // round cost, within 1e-6 relative.
        let t = rng.gen_range(1..=g.horizon);
        let closed = optimal_reward(t, &g).unwrap();
        let numeric = golden_section_min(
            |r| server_round_cost(r, t, &g).unwrap(),
            closed * 1e-3,
            closed * 1e3,
            1e-12,
        );
        pass &= ((numeric - closed) / closed).abs() < 1e-6;
    }
    pass &= start.elapsed().as_secs_f64() < 10.0;
    report("1 equilibrium oracle equivalence (100 instances, 1e-6)", pass);
}

#[test]
fn criterion_2_worked_instances() {
    let mut pass = true;

    // Two clients with valuations (1,3), phi1=1, reward 16: budgets (3,1).
    let g = GameInstance {
        horizon: 1,
        gamma: 0.5,
        discount: 1.0,
        phi1: 1.0,
        valuations: vec![1.0, 3.0],
        beta: 1.0,
        lambda: 1.0,
        clip: 1.0,
        dim: 1,
        grad_bound: 0.0,
        shard_sizes: vec![1, 1],
        fixed_costs: vec![0.0, 0.0],
    };
    let r0 = optimal_budget(0, 16.0, &g).unwrap().rho;
    let r1 = optimal_budget(1, 16.0, &g).unwrap().rho;
    pass &= (r0 - 3.0).abs() < 1e-9 && (r1 - 1.0).abs() < 1e-9;
    // Total matches (n-1) * reward / (phi1 * sum of valuations) = 4.
    pass &= (r0 + r1 - 4.0).abs() < 1e-9;

    // Symmetric two-client instance: A_t = 4, first-round reward sqrt(8).
    let sym = GameInstance { valuations: vec![1.0, 1.0], ..g };
    let round = equilibrium_round(1, &sym).unwrap();
    pass &= (round.a_t - 4.0).abs() < 1e-9;
    pass &= (round.reward - 8.0f64.sqrt()).abs() < 1e-9;

    report("2 worked instances (budgets (3,1), A=4, R1=sqrt(8), 1e-9)", pass);
}

#[test]
fn criterion_3_reward_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC3);
    let mut pass = true;
    for _ in 0..20 {
        let mut g = random_interior_instance(&mut rng);
        g.horizon = g.horizon.max(5);
        let rewards: Vec<f64> =
            (1..=g.horizon).map(|t| optimal_reward(t, &g).unwrap()).collect();
        if g.discount < 1.0 {
            pass &= rewards.windows(2).all(|w| w[1] > w[0]);
        }
        let mut flat = g.clone();
        flat.discount = 1.0;
        let flat_rewards: Vec<f64> =
            (1..=flat.horizon).map(|t| optimal_reward(t, &flat).unwrap()).collect();
        pass &= flat_rewards.windows(2).all(|w| w[1] == w[0]);
    }
    report("3 reward strictly increases when discount < 1, constant at 1", pass);
}

#[test]
fn criterion_4_noise_calibration() {
    let start = std::time::Instant::now();
    let mut pass = true;
    let draws = 100_000usize;
    for (k, (rho, clip, shard)) in
        [(1.0, 1.0, 10usize), (0.5, 2.0, 50), (2.0, 0.1, 5)].into_iter().enumerate()
    {
        let sigma_sq = noise_variance(rho, clip, shard).unwrap();
        let noisy =
            perturb(&ParameterVector::zeros(draws), sigma_sq, 77 + k as u64).unwrap();
        let mean: f64 = noisy.values().iter().sum::<f64>() / draws as f64;
        let var: f64 =
            noisy.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws as f64;
        pass &= (var / sigma_sq - 1.0).abs() < 0.05;
    }
    pass &= start.elapsed().as_secs_f64() < 5.0;
    report("4 noise variance matches 2C^2/(rho |D|^2) within 5%", pass);
}

#[test]
fn criterion_5_composition_accounting() {
    let mut ledger = BudgetLedger::new();
    let rounds: Vec<BTreeMap<usize, f64>> = vec![
        BTreeMap::from([(0, 0.5), (1, 1.25), (3, 0.75)]),
        BTreeMap::from([(0, 0.25), (3, 2.0)]),
        BTreeMap::from([(1, 0.125)]),
    ];
    let mut pass = true;
    for budgets in &rounds {
        let total = ledger.compose(budgets).unwrap();
        pass &= total == budgets.values().sum::<f64>();
    }
    let round_totals = ledger.round_totals().to_vec();
    pass &= round_totals.len() == rounds.len();
    pass &= ledger.cumulative_total() == round_totals.iter().sum::<f64>();
    // Per-client totals are additive across rounds, exactly.
    pass &= ledger.client_total(0) == 0.5 + 0.25;
    pass &= ledger.client_total(1) == 1.25 + 0.125;
    pass &= ledger.client_total(3) == 0.75 + 2.0;
    pass &= ledger.client_total(2) == 0.0;
    report("5 composition accounting is exact and additive", pass);
}

fn fd_gradient(
    shape: &ModelShape,
    w: &ParameterVector,
    ds: &Dataset,
    rows: &[usize],
    ridge: f64,
) -> ParameterVector {
    let h = 1e-5;
    let mut g = ParameterVector::zeros(shape.dim());
    for k in 0..shape.dim() {
        let mut plus = w.clone();
        plus[k] += h;
        let mut minus = w.clone();
        minus[k] -= h;
        g[k] = (loss(shape, &plus, ds, rows, ridge) - loss(shape, &minus, ds, rows, ridge))
            / (2.0 * h);
    }
    g
}

#[test]
fn criterion_6_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC6);
    let mut pass = true;
    for trial in 0..20 {
        let classes = rng.gen_range(2..=4usize);
        let dim = rng.gen_range(2..=4usize);
        let ds = generate_synthetic(classes, dim, 6, 2.0, 900 + trial).unwrap();
        let shape = ModelShape { n_features: dim, classes };
        let mut w = ParameterVector::zeros(shape.dim());
        for k in 0..shape.dim() {
            w[k] = rng.gen_range(-1.0..1.0);
        }
        let rows: Vec<usize> = (0..ds.len()).collect();
        let ridge = if trial % 2 == 0 { 1e-3 } else { 0.0 };
        let analytic = gradient(&shape, &w, &ds, &rows, ridge);
        let numeric = fd_gradient(&shape, &w, &ds, &rows, ridge);
        let diff = analytic.sub(&numeric).l2_norm();
        pass &= diff / analytic.l2_norm().max(1e-12) < 1e-6;
    }
    report("6 analytic gradient matches finite differences (rel 1e-6)", pass);
}

/// Shared setup for the desk-scale comparison: 10 clients on skewed
/// synthetic data, the selection threshold calibrated per seed so exactly
/// two clients are excluded.
fn desk_scale_config() -> ExperimentConfig {
    parse_config_str(
        r#"
master_seed = 41
seed_count = 5
strategies = ["fedavg", "fedavg_select", "fedavg_dp", "qi_dpfl", "max_select"]

[dataset]
kind = "synthetic"
classes = 3
dim = 6
per_class = 400
test_per_class = 334
separation = 0.8

[partition]
mode = "dirichlet"
concentration = 0.3
client_count = 10

[clients]
nu_range = [0.9, 1.1]

[game]
phi1 = 0.01
beta = 9000.0
lambda = 0.005
clip = 6.0

[dp]
fixed_rho = 0.15

[training]
global_rounds = 30
local_epochs = 32
learning_rate = 0.3
batch_size = 32
"#,
    )
    .unwrap()
}

fn desk_scale_experiment(cfg: &ExperimentConfig, seed: u64) -> Experiment {
    let mut exp = cfg.build_experiment(seed).unwrap();
    // Admission uses a strict upper bound on the distribution distance, so
    // the midpoint of the 8th and 9th order statistics keeps exactly 8 of
    // the 10 clients.
    let mut distances: Vec<f64> = exp
        .profiles
        .iter()
        .map(|p| emd(&p.label_dist, &exp.selection.reference).unwrap())
        .collect();
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    exp.selection.threshold = ((distances[7] + distances[8]) / 2.0).min(2.0);
    exp
}

/// Final accuracy as the mean over the last five rounds, damping the
/// round-to-round jitter of small-sample SGD.
fn final_accuracy(strategy: StrategyKind, exp: &Experiment) -> f64 {
    let result = run_experiment(strategy, exp).unwrap();
    let n = result.outcomes.len();
    result.outcomes[n - 5..].iter().map(|o| o.accuracy).sum::<f64>() / 5.0
}

#[test]
fn criterion_7_strategy_ordering() {
    let start = std::time::Instant::now();
    let cfg = desk_scale_config();
    let mut seeds_ok = 0;
    for seed in 0..5 {
        let exp = desk_scale_experiment(&cfg, seed);
        let acc_fedavg = final_accuracy(StrategyKind::FedAvg, &exp);
        let acc_select = final_accuracy(StrategyKind::FedAvgSelect, &exp);
        let acc_dp = final_accuracy(StrategyKind::FedAvgDp, &exp);
        let acc_qi = final_accuracy(StrategyKind::QiDpfl, &exp);
        let ok = acc_select >= acc_fedavg
            && acc_fedavg >= acc_dp
            && (acc_qi - acc_select).abs() <= 0.03;
        println!(
            "  seed {seed}: select={acc_select:.4} fedavg={acc_fedavg:.4} \
             dp={acc_dp:.4} qi={acc_qi:.4} -> {}",
            if ok { "ok" } else { "violated" }
        );
        seeds_ok += usize::from(ok);
    }
    let in_time = start.elapsed().as_secs_f64() < 120.0;
    report(
        "7 strategy ordering holds in >= 4 of 5 seeds under 2 min",
        seeds_ok >= 4 && in_time,
    );
}

#[test]
fn criterion_8_cost_dominance() {
    let cfg = desk_scale_config();
    let mut pass = true;
    for seed in 0..5 {
        let exp = desk_scale_experiment(&cfg, seed);
        let qi = run_experiment(StrategyKind::QiDpfl, &exp).unwrap();
        let max = run_experiment(StrategyKind::MaxSelect, &exp).unwrap();
        let qi_cost = total_server_cost(&qi.outcomes, qi.game.as_ref().unwrap());
        let max_cost = total_server_cost(&max.outcomes, max.game.as_ref().unwrap());
        pass &= qi_cost < max_cost;
    }
    report("8 qi_dpfl total server cost below max_select on every seed", pass);
}

#[test]
fn criterion_9_accuracy_model_round_trip() {
    let planted = AccuracyModel { i1: 0.92, i2: 0.85, i3: 2.0, i4: 0.0 };
    let points: Vec<(f64, f64)> = (0..12)
        .map(|k| {
            let rho = 0.05 + 0.35 * k as f64;
            (rho, planted.accuracy(rho))
        })
        .collect();
    let fitted = fit_accuracy_model(&points, &FitOptions::default()).unwrap();
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let mut pass = rel(fitted.i1, planted.i1) < 1e-3
        && rel(fitted.i2, planted.i2) < 1e-3
        && rel(fitted.i3, planted.i3) < 1e-3
        && (fitted.i4 - planted.i4).abs() < 1e-3;

    // Inverting the fitted curve for the reward floor must land exactly on
    // the accuracy target.
    let g = GameInstance {
        horizon: 10,
        gamma: 0.5,
        discount: 0.9,
        phi1: 1.5,
        valuations: vec![0.8, 1.1, 2.0],
        beta: 1.0,
        lambda: 1.0,
        clip: 1.0,
        dim: 20,
        grad_bound: 1.0,
        shard_sizes: vec![40, 55, 60],
        fixed_costs: vec![0.01; 3],
    };
    let (r_lo, r_hi) = reward_range(&fitted, 0.55, 0.85, &g).unwrap();
    pass &= r_hi > r_lo;
    let n = g.client_count() as f64;
    let rho_lo = (n - 1.0) * r_lo / (g.phi1 * g.sum_valuations());
    pass &= (fitted.accuracy(rho_lo) - 0.55).abs() < 1e-9;

    report("9 curve fit round trip (1e-3) and target inversion (1e-9)", pass);
}

#[test]
fn criterion_10_determinism() {
    let cfg = parse_config_str(
        r#"
seed_count = 2
strategies = ["qi_dpfl", "fedavg_dp"]
workers = 2

[dataset]
kind = "synthetic"
classes = 3
dim = 4
per_class = 40
test_per_class = 20

[partition]
client_count = 5

[training]
global_rounds = 4
batch_size = 16
"#,
    )
    .unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    runner::run_all(&cfg, dir_a.path()).unwrap();
    runner::run_all(&cfg, dir_b.path()).unwrap();
    let mut pass = true;
    for strategy in ["qi_dpfl", "fedavg_dp"] {
        for seed in 0..2 {
            let name = format!("{strategy}_seed{seed}.csv");
            let a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(&name)).unwrap();
            pass &= !a.is_empty() && a == b;
        }
    }
    report("10 reruns produce byte-identical CSVs", pass);
}

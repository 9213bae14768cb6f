//! Two-stage Stackelberg game between the server (reward designer) and
//! clients (privacy-budget choosers).
//!
//! Stage II: given round reward R, client i maximizes
//! `(rho_i / sum_j rho_j) * R - phi1 * nu_i * rho_i - fixed_i`.
//! The closed-form maximizer is linear in R with coefficient
//! `C_i = (N-1) * [sum(nu) - nu_i * (N-1)] / (phi1 * sum(nu)^2)`.
//!
//! Stage I: substituting the Stage-II response, the R-dependent part of
//! the server's per-round cost is `A_t / R + (1 - gamma) * pi^(t-1) * R`,
//! minimized at `R_t* = sqrt(A_t * pi^(1-t) / (1 - gamma))`.
//!
//! Every closed form is cross-checked by an independent numeric oracle
//! (golden-section search), so equilibrium claims are verified rather than
//! assumed.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate division: all privacy budgets are zero")]
    DegenerateDivision,
    #[error("degenerate coefficient: client {client} has C_i = {value} <= 0")]
    DegenerateCoefficient { client: usize, value: f64 },
    #[error("accuracy-model fit failed: {0}")]
    FitFailure(String),
}

/// All constants of one Stackelberg game instance. Client-indexed vectors
/// are parallel; index `i` here is a position in the participating set,
/// not a global client id.
#[derive(Debug, Clone)]
pub struct GameInstance {
    /// Global training horizon T.
    pub horizon: usize,
    /// Accuracy/reward trade-off gamma in (0,1).
    pub gamma: f64,
    /// Reward discount factor pi in (0,1].
    pub discount: f64,
    /// Privacy-cost weight phi1 > 0.
    pub phi1: f64,
    /// Privacy valuations nu_i > 0.
    pub valuations: Vec<f64>,
    /// Smoothness constant beta > 0.
    pub beta: f64,
    /// Strong-convexity constant lambda > 0.
    pub lambda: f64,
    /// Clipping threshold C > 0.
    pub clip: f64,
    /// Model dimension d >= 1.
    pub dim: usize,
    /// Gradient-norm bound V >= 0.
    pub grad_bound: f64,
    /// Shard sizes |D_i| >= 1.
    pub shard_sizes: Vec<usize>,
    /// Combined non-privacy cost per client (phi2..phi4 terms folded).
    pub fixed_costs: Vec<f64>,
}

impl GameInstance {
    pub fn client_count(&self) -> usize {
        self.valuations.len()
    }

    pub fn sum_valuations(&self) -> f64 {
        self.valuations.iter().sum()
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let n = self.client_count();
        if n < 2 {
            return Err(GameError::InvalidArgument("need at least 2 clients".into()));
        }
        if self.horizon == 0 {
            return Err(GameError::InvalidArgument("horizon must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(GameError::InvalidArgument(format!(
                "gamma {} out of (0,1)",
                self.gamma
            )));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(GameError::InvalidArgument(format!(
                "discount {} out of (0,1]",
                self.discount
            )));
        }
        if self.phi1 <= 0.0 {
            return Err(GameError::InvalidArgument("phi1 must be > 0".into()));
        }
        if self.valuations.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(GameError::InvalidArgument("all valuations must be > 0".into()));
        }
        if self.beta <= 0.0 || self.lambda <= 0.0 || self.clip <= 0.0 {
            return Err(GameError::InvalidArgument("beta, lambda, clip must be > 0".into()));
        }
        if self.dim == 0 {
            return Err(GameError::InvalidArgument("dim must be >= 1".into()));
        }
        if self.grad_bound < 0.0 {
            return Err(GameError::InvalidArgument("grad bound must be >= 0".into()));
        }
        if self.shard_sizes.len() != n || self.fixed_costs.len() != n {
            return Err(GameError::InvalidArgument(
                "shard_sizes and fixed_costs must match client count".into(),
            ));
        }
        if self.shard_sizes.iter().any(|&s| s == 0) {
            return Err(GameError::InvalidArgument("shard sizes must be >= 1".into()));
        }
        if self.fixed_costs.iter().any(|&c| c < 0.0) {
            return Err(GameError::InvalidArgument("fixed costs must be >= 0".into()));
        }
        Ok(())
    }
}

/// Stage-II utility of client `i` given its own budget, the other clients'
/// budgets, and the announced round reward.
pub fn client_utility(
    i: usize,
    rho_i: f64,
    rho_others: &[f64],
    reward: f64,
    g: &GameInstance,
) -> Result<f64, GameError> {
    if rho_i < 0.0 {
        return Err(GameError::InvalidArgument("rho_i must be >= 0".into()));
    }
    let total: f64 = rho_i + rho_others.iter().sum::<f64>();
    if total <= 0.0 {
        return Err(GameError::DegenerateDivision);
    }
    let share = rho_i / total;
    Ok(share * reward - g.phi1 * g.valuations[i] * rho_i - g.fixed_costs[i])
}

/// A client's closed-form Stage-II best response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalBudget {
    pub rho: f64,
    /// True when the closed form went negative and was clamped to zero;
    /// the client effectively drops out this round.
    pub dropped: bool,
}

/// Per-client reward-to-budget coefficient C_i. The closed-form optimal
/// budget is `C_i * R`; nonpositive C_i means the client drops out.
pub fn budget_coefficient(i: usize, g: &GameInstance) -> f64 {
    let n = g.client_count() as f64;
    let sum_nu = g.sum_valuations();
    (n - 1.0) * (sum_nu - g.valuations[i] * (n - 1.0)) / (g.phi1 * sum_nu * sum_nu)
}

/// Closed-form optimal privacy budget of client `i` under reward `R`.
pub fn optimal_budget(i: usize, reward: f64, g: &GameInstance) -> Result<OptimalBudget, GameError> {
    if g.client_count() < 2 {
        return Err(GameError::InvalidArgument("need at least 2 clients".into()));
    }
    if reward < 0.0 {
        return Err(GameError::InvalidArgument("reward must be >= 0".into()));
    }
    let raw = budget_coefficient(i, g) * reward;
    if raw < 0.0 {
        Ok(OptimalBudget { rho: 0.0, dropped: true })
    } else {
        Ok(OptimalBudget { rho: raw, dropped: false })
    }
}

/// Golden-section minimizer of `f` on `[lo, hi]` to absolute x-tolerance.
pub fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Numerically maximize client `i`'s utility in its own budget over
/// `[0, search_hi]`, holding the others fixed. Independent check of the
/// closed form; golden-section is valid because the utility is strictly
/// concave in the feasible region.
pub fn best_response_oracle(
    i: usize,
    rho_others: &[f64],
    reward: f64,
    g: &GameInstance,
    search_hi: f64,
) -> Result<f64, GameError> {
    if search_hi <= 0.0 || !search_hi.is_finite() {
        return Err(GameError::InvalidArgument("search_hi must be > 0".into()));
    }
    let others_total: f64 = rho_others.iter().sum();
    if others_total <= 0.0 {
        return Err(GameError::InvalidArgument(
            "oracle requires positive budgets from other clients".into(),
        ));
    }
    // The utility rho/(rho+sigma)*R - phi1*nu*rho - fixed is strictly
    // concave, so its slope sigma*R/(rho+sigma)^2 - phi1*nu decreases
    // monotonically and |slope| is unimodal with its minimum at the best
    // response. Searching the slope instead of the utility itself avoids
    // the catastrophic flatness of the utility near its peak, which caps
    // a direct search at ~sqrt(machine epsilon) relative accuracy.
    let abs_slope = |rho: f64| {
        let s = rho + others_total;
        (others_total * reward / (s * s) - g.phi1 * g.valuations[i]).abs()
    };
    if others_total * reward / (others_total * others_total) <= g.phi1 * g.valuations[i] {
        // Slope already nonpositive at zero: contributing never pays.
        return Ok(0.0);
    }
    Ok(golden_section_min(abs_slope, 0.0, search_hi, 1e-9))
}

/// Theorem-2 constants: per-client coefficients C_i and the round constant
/// A_t (time-independent for static valuations).
pub fn round_constants(g: &GameInstance) -> Result<(Vec<f64>, f64), GameError> {
    g.validate()?;
    let n = g.client_count();
    let cis: Vec<f64> = (0..n).map(|i| budget_coefficient(i, g)).collect();
    if let Some((i, &c)) = cis.iter().enumerate().find(|(_, &c)| c <= 0.0) {
        return Err(GameError::DegenerateCoefficient { client: i, value: c });
    }
    let nf = n as f64;
    let tf = g.horizon as f64;
    let a_t: f64 = (0..n)
        .map(|i| {
            let d_i = g.shard_sizes[i] as f64;
            4.0 * g.dim as f64 * g.gamma * g.beta * g.clip * g.clip
                / (tf * tf * g.lambda * g.lambda * nf * nf * cis[i] * d_i * d_i)
        })
        .sum();
    Ok((cis, a_t))
}

/// The R-dependent part of the server's round-t cost after substituting
/// the Stage-II response: `A_t / R + (1 - gamma) * pi^(t-1) * R`.
/// `t` is 1-based.
pub fn server_round_cost(reward: f64, t: usize, g: &GameInstance) -> Result<f64, GameError> {
    if reward <= 0.0 {
        return Err(GameError::InvalidArgument("reward must be > 0".into()));
    }
    if t == 0 {
        return Err(GameError::InvalidArgument("round index is 1-based".into()));
    }
    let (_, a_t) = round_constants(g)?;
    Ok(a_t / reward + (1.0 - g.gamma) * g.discount.powi(t as i32 - 1) * reward)
}

/// Closed-form optimal round-t reward `sqrt(A_t * pi^(1-t) / (1 - gamma))`.
/// `t` is 1-based.
pub fn optimal_reward(t: usize, g: &GameInstance) -> Result<f64, GameError> {
    if t == 0 {
        return Err(GameError::InvalidArgument("round index is 1-based".into()));
    }
    let (_, a_t) = round_constants(g)?;
    Ok((a_t * g.discount.powi(1 - t as i32) / (1.0 - g.gamma)).sqrt())
}

/// One round's equilibrium strategy profile.
#[derive(Debug, Clone)]
pub struct EquilibriumRound {
    pub t: usize,
    pub reward: f64,
    pub budgets: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub a_t: f64,
}

/// Compute the full closed-form equilibrium for round `t` (1-based).
pub fn equilibrium_round(t: usize, g: &GameInstance) -> Result<EquilibriumRound, GameError> {
    let (coefficients, a_t) = round_constants(g)?;
    let reward = (a_t * g.discount.powi(1 - t as i32) / (1.0 - g.gamma)).sqrt();
    let budgets = coefficients.iter().map(|c| c * reward).collect();
    Ok(EquilibriumRound { t, reward, budgets, coefficients, a_t })
}

/// Result of verifying one equilibrium round against numeric oracles.
#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    /// |oracle best response - closed-form budget| per client.
    pub client_residuals: Vec<f64>,
    /// Relative gap between the numeric cost minimizer and the closed-form
    /// reward.
    pub server_residual: f64,
    pub clients_pass: bool,
    pub server_pass: bool,
}

impl EquilibriumReport {
    pub fn passed(&self) -> bool {
        self.clients_pass && self.server_pass
    }

    pub fn max_residual(&self) -> f64 {
        self.client_residuals
            .iter()
            .copied()
            .fold(self.server_residual, f64::max)
    }
}

/// Check that no client can improve by deviating from its closed-form
/// budget and that the closed-form reward matches the numeric minimizer of
/// the server's separable round cost.
pub fn verify_equilibrium(
    round: &EquilibriumRound,
    g: &GameInstance,
    tol: f64,
) -> Result<EquilibriumReport, GameError> {
    let n = g.client_count();
    if round.budgets.len() != n {
        return Err(GameError::InvalidArgument("budget count mismatch".into()));
    }
    let total: f64 = round.budgets.iter().sum();

    let mut client_residuals = Vec::with_capacity(n);
    for i in 0..n {
        let others: Vec<f64> = round
            .budgets
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &b)| b)
            .collect();
        let hi = 10.0 * total.max(round.budgets[i]).max(1e-6);
        let br = best_response_oracle(i, &others, round.reward, g, hi)?;
        client_residuals.push((br - round.budgets[i]).abs());
    }

    let numeric_reward = golden_section_min(
        |r| {
            // Inline separable cost: constants already computed for this round.
            round.a_t / r + (1.0 - g.gamma) * g.discount.powi(round.t as i32 - 1) * r
        },
        round.reward * 1e-3,
        round.reward * 1e3,
        round.reward * 1e-10,
    );
    let server_residual = (numeric_reward - round.reward).abs() / round.reward.abs().max(1e-300);

    let clients_pass = client_residuals.iter().all(|&r| r <= tol);
    let server_pass = server_residual <= tol;
    Ok(EquilibriumReport { client_residuals, server_residual, clients_pass, server_pass })
}

/// Iteratively remove clients whose coefficient C_i is nonpositive and
/// recompute the constants over the remainder. Returns the kept positions
/// (indices into the original instance) and the reduced instance.
pub fn reduce_to_interior(g: &GameInstance) -> Result<(Vec<usize>, GameInstance), GameError> {
    g.validate()?;
    let mut kept: Vec<usize> = (0..g.client_count()).collect();
    let mut current = g.clone();
    loop {
        if current.client_count() < 2 {
            return Err(GameError::InvalidArgument(
                "fewer than 2 clients remain after dropouts".into(),
            ));
        }
        let cis: Vec<f64> = (0..current.client_count())
            .map(|i| budget_coefficient(i, &current))
            .collect();
        let drops: Vec<usize> = cis
            .iter()
            .enumerate()
            .filter(|(_, &c)| c <= 0.0)
            .map(|(i, _)| i)
            .collect();
        if drops.is_empty() {
            return Ok((kept, current));
        }
        let keep_mask: Vec<bool> =
            (0..current.client_count()).map(|i| !drops.contains(&i)).collect();
        let filter = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(&keep_mask).filter(|(_, &k)| k).map(|(&x, _)| x).collect()
        };
        kept = kept
            .iter()
            .zip(&keep_mask)
            .filter(|(_, &k)| k)
            .map(|(&x, _)| x)
            .collect();
        current = GameInstance {
            valuations: filter(&current.valuations),
            shard_sizes: current
                .shard_sizes
                .iter()
                .zip(&keep_mask)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .collect(),
            fixed_costs: filter(&current.fixed_costs),
            ..current
        };
    }
}

/// Fitted constants of the privacy-budget-to-accuracy curve
/// `accuracy(rho) = I1 - I2 * exp(-I3 * rho - I4)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyModel {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub i4: f64,
}

impl AccuracyModel {
    pub fn accuracy(&self, rho: f64) -> f64 {
        self.i1 - self.i2 * (-self.i3 * rho - self.i4).exp()
    }

    pub fn validate(&self) -> Result<(), GameError> {
        if self.i2 <= 0.0 || self.i3 <= 0.0 {
            return Err(GameError::InvalidArgument("I2 and I3 must be > 0".into()));
        }
        if !(self.i1 > 0.0 && self.i1 <= 1.0) {
            return Err(GameError::InvalidArgument("I1 must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Number of multi-start points for the decay-rate search.
    pub restarts: usize,
    /// Search box for I3 (log-spaced starts).
    pub i3_range: (f64, f64),
    /// Reject fits whose residual L2 norm exceeds this bound.
    pub max_residual: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { restarts: 16, i3_range: (1e-3, 1e3), max_residual: 0.05 }
    }
}

// For fixed I3 the model is linear in (I1, B) with B = I2 * exp(-I4):
// accuracy_j = I1 - B * exp(-I3 * rho_j). Solve that subproblem exactly
// and search only over I3. Returns ((i1, b), sse).
fn linear_subfit(points: &[(f64, f64)], i3: f64) -> ((f64, f64), f64) {
    let n = points.len() as f64;
    let mut su = 0.0;
    let mut suu = 0.0;
    let mut sy = 0.0;
    let mut suy = 0.0;
    for &(rho, acc) in points {
        let u = (-i3 * rho).exp();
        su += u;
        suu += u * u;
        sy += acc;
        suy += u * acc;
    }
    // Normal equations for accuracy = i1 - b*u.
    let det = n * suu - su * su;
    if det.abs() < 1e-300 {
        return ((sy / n, 0.0), f64::INFINITY);
    }
    let i1 = (suu * sy - su * suy) / det;
    let b = (su * sy - n * suy) / det;
    let sse: f64 = points
        .iter()
        .map(|&(rho, acc)| {
            let r = i1 - b * (-i3 * rho).exp() - acc;
            r * r
        })
        .sum();
    ((i1, b), sse)
}

/// Least-squares fit of the accuracy curve by multi-start search over the
/// decay rate with an exact linear solve for the remaining parameters.
///
/// The offset I4 is redundant with I2 (only `I2 * exp(-I4)` is
/// identifiable), so fits report I4 = 0 with the product folded into I2.
pub fn fit_accuracy_model(
    points: &[(f64, f64)],
    opts: &FitOptions,
) -> Result<AccuracyModel, GameError> {
    if points.len() < 4 {
        return Err(GameError::InvalidArgument("need at least 4 points".into()));
    }
    {
        let mut rhos: Vec<f64> = points.iter().map(|p| p.0).collect();
        rhos.sort_by(|a, b| a.partial_cmp(b).expect("finite rho"));
        if rhos.windows(2).any(|w| w[0] == w[1]) {
            return Err(GameError::InvalidArgument("rho values must be distinct".into()));
        }
    }
    if points.iter().any(|&(rho, acc)| rho < 0.0 || !(0.0 < acc && acc < 1.0)) {
        return Err(GameError::InvalidArgument(
            "rho must be >= 0 and accuracies in (0,1)".into(),
        ));
    }
    let (lo, hi) = opts.i3_range;
    if !(lo > 0.0 && hi > lo) || opts.restarts == 0 {
        return Err(GameError::InvalidArgument("bad fit options".into()));
    }

    let log_lo = lo.ln();
    let log_hi = hi.ln();
    let mut best: Option<(f64, f64, f64, f64)> = None; // (sse, i1, b, i3)
    for s in 0..opts.restarts {
        let frac = s as f64 / (opts.restarts - 1).max(1) as f64;
        let start = log_lo + frac * (log_hi - log_lo);
        // Local refine around the start, one decade each way within the box.
        let bracket_lo = (start - std::f64::consts::LN_10).max(log_lo);
        let bracket_hi = (start + std::f64::consts::LN_10).min(log_hi);
        let log_i3 = golden_section_min(
            |l| linear_subfit(points, l.exp()).1,
            bracket_lo,
            bracket_hi,
            1e-10,
        );
        let i3 = log_i3.exp();
        let ((i1, b), sse) = linear_subfit(points, i3);
        if best.map_or(true, |(bs, ..)| sse < bs) {
            best = Some((sse, i1, b, i3));
        }
    }

    let (sse, i1, b, i3) = best.expect("at least one restart");
    let model = AccuracyModel { i1, i2: b, i3, i4: 0.0 };
    if sse.sqrt() > opts.max_residual {
        return Err(GameError::FitFailure(format!(
            "residual norm {:.6} exceeds bound {:.6}",
            sse.sqrt(),
            opts.max_residual
        )));
    }
    model
        .validate()
        .map_err(|e| GameError::FitFailure(format!("degenerate fit: {e}")))?;
    Ok(model)
}

/// Reward bounds [R_lo, R_hi] such that the equilibrium round budget
/// reaches accuracy `eps_target` (lower bound) and `eps_max` (upper
/// bound) under the fitted curve. Rewards are clamped at zero when the
/// target is already met with no budget.
pub fn reward_range(
    model: &AccuracyModel,
    eps_target: f64,
    eps_max: f64,
    g: &GameInstance,
) -> Result<(f64, f64), GameError> {
    model.validate()?;
    g.validate()?;
    if eps_target >= model.i1 {
        return Err(GameError::InvalidArgument(format!(
            "eps_target {} unreachable: I1 = {}",
            eps_target, model.i1
        )));
    }
    if !(eps_target < eps_max && eps_max < model.i1) {
        return Err(GameError::InvalidArgument(
            "need eps_target < eps_max < I1".into(),
        ));
    }
    let n = g.client_count() as f64;
    let reward_for = |eps: f64| -> f64 {
        let rho_needed = ((model.i2 / (model.i1 - eps)).ln() - model.i4) / model.i3;
        (g.phi1 * g.sum_valuations() * rho_needed / (n - 1.0)).max(0.0)
    };
    Ok((reward_for(eps_target), reward_for(eps_max)))
}

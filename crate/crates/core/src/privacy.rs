//! Clipping, sensitivity, zCDP noise calibration, and budget accounting.

use crate::params::ParameterVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Noise calibration for one client and round: sigma_sq = 2C^2/(rho*|D|^2).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCalibration {
    pub clip: f64,
    pub shard_size: usize,
    pub sigma_sq: f64,
}

impl NoiseCalibration {
    pub fn new(rho: f64, clip: f64, shard_size: usize) -> Result<Self, PrivacyError> {
        let sigma_sq = noise_variance(rho, clip, shard_size)?;
        Ok(Self { clip, shard_size, sigma_sq })
    }
}

/// Scale `v` to L2 norm at most `clip`, preserving direction.
pub fn clip(v: &ParameterVector, clip: f64) -> Result<ParameterVector, PrivacyError> {
    if clip <= 0.0 || !clip.is_finite() {
        return Err(PrivacyError::InvalidArgument("clip threshold must be > 0".into()));
    }
    let norm = v.l2_norm();
    if norm <= clip {
        Ok(v.clone())
    } else {
        Ok(v.scale(clip / norm))
    }
}

/// L2 sensitivity of the averaged-update query: 2C/|D|.
pub fn sensitivity(clip: f64, shard_size: usize) -> Result<f64, PrivacyError> {
    if clip <= 0.0 || !clip.is_finite() {
        return Err(PrivacyError::InvalidArgument("clip threshold must be > 0".into()));
    }
    if shard_size == 0 {
        return Err(PrivacyError::InvalidArgument("shard_size must be >= 1".into()));
    }
    Ok(2.0 * clip / shard_size as f64)
}

/// Gaussian noise variance achieving rho-zCDP: 2C^2/(rho*|D|^2).
pub fn noise_variance(rho: f64, clip: f64, shard_size: usize) -> Result<f64, PrivacyError> {
    if rho <= 0.0 || !rho.is_finite() {
        return Err(PrivacyError::InvalidArgument("rho must be > 0".into()));
    }
    if clip <= 0.0 || !clip.is_finite() {
        return Err(PrivacyError::InvalidArgument("clip threshold must be > 0".into()));
    }
    if shard_size == 0 {
        return Err(PrivacyError::InvalidArgument("shard_size must be >= 1".into()));
    }
    let d = shard_size as f64;
    Ok(2.0 * clip * clip / (rho * d * d))
}

/// Add i.i.d. zero-mean Gaussian noise of variance `sigma_sq` per
/// coordinate. Deterministic given `seed`.
pub fn perturb(
    v: &ParameterVector,
    sigma_sq: f64,
    seed: u64,
) -> Result<ParameterVector, PrivacyError> {
    if sigma_sq < 0.0 || !sigma_sq.is_finite() {
        return Err(PrivacyError::InvalidArgument("variance must be nonnegative".into()));
    }
    if sigma_sq == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma_sq.sqrt())
        .map_err(|e| PrivacyError::InvalidArgument(e.to_string()))?;
    let mut out = v.clone();
    for x in out.values_mut() {
        *x += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Additive zCDP composition ledger: per-round totals and per-client
/// cumulative budgets.
#[derive(Debug, Clone, Default)]
pub struct BudgetLedger {
    per_client_totals: BTreeMap<usize, f64>,
    per_round_totals: Vec<f64>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record one round's budgets. The round total is the sum of all
    /// client budgets spent that round; client cumulative totals grow by
    /// their own contribution.
    pub fn compose(&mut self, budgets: &BTreeMap<usize, f64>) -> Result<f64, PrivacyError> {
        if let Some((id, &rho)) = budgets.iter().find(|(_, &rho)| rho <= 0.0 || !rho.is_finite()) {
            return Err(PrivacyError::InvalidArgument(format!(
                "client {id} budget {rho} must be > 0"
            )));
        }
        let round_total: f64 = budgets.values().sum();
        for (&id, &rho) in budgets {
            *self.per_client_totals.entry(id).or_insert(0.0) += rho;
        }
        self.per_round_totals.push(round_total);
        Ok(round_total)
    }

    pub fn client_total(&self, id: usize) -> f64 {
        self.per_client_totals.get(&id).copied().unwrap_or(0.0)
    }

    pub fn round_totals(&self) -> &[f64] {
        &self.per_round_totals
    }

    pub fn cumulative_total(&self) -> f64 {
        self.per_round_totals.iter().sum()
    }
}

/// Per-round squared-gradient bound G^2(t) = V^2 + (d/N^2) * sum sigma_i^2.
pub fn g_squared(v_bound: f64, dim: usize, sigmas_sq: &[f64], n_clients: usize) -> Result<f64, PrivacyError> {
    if v_bound < 0.0 || !v_bound.is_finite() {
        return Err(PrivacyError::InvalidArgument("V must be nonnegative".into()));
    }
    if dim == 0 || n_clients == 0 {
        return Err(PrivacyError::InvalidArgument("d and N must be >= 1".into()));
    }
    let n = n_clients as f64;
    let noise: f64 = sigmas_sq.iter().sum();
    Ok(v_bound * v_bound + dim as f64 / (n * n) * noise)
}

/// Accuracy-loss bound 2*beta*G^2/(lambda^2*T).
pub fn accuracy_loss_bound(beta: f64, g_sq: f64, lambda: f64, horizon: usize) -> Result<f64, PrivacyError> {
    if beta < 0.0 || lambda <= 0.0 || g_sq < 0.0 || horizon == 0 {
        return Err(PrivacyError::InvalidArgument(
            "beta, G^2 must be >= 0; lambda > 0; T >= 1".into(),
        ));
    }
    Ok(2.0 * beta * g_sq / (lambda * lambda * horizon as f64))
}

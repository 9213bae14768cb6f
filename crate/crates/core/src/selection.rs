//! Quality-aware client selection by label-distribution distance.

use crate::data::{Dataset, LabelDistribution};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("dimension mismatch: {left} vs {right} classes")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One simulated client: its data shard, reported label distribution,
/// privacy valuation, and fixed (non-privacy) round cost.
#[derive(Debug, Clone)]
pub struct ClientProfile {
    pub id: usize,
    pub shard: Dataset,
    pub label_dist: LabelDistribution,
    /// Privacy valuation nu_i > 0.
    pub valuation: f64,
    /// Combined data/computation/communication cost per round.
    pub fixed_cost: f64,
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    /// Reference distribution the clients are compared against.
    pub reference: LabelDistribution,
    /// Admission threshold; clients with distance strictly below it pass.
    pub threshold: f64,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if !(0.0..=2.0).contains(&self.threshold) {
            return Err(SelectionError::InvalidArgument(format!(
                "threshold {} out of [0, 2]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// L1 distance between two label distributions. Ranges over [0, 2].
pub fn emd(
    client_dist: &LabelDistribution,
    reference: &LabelDistribution,
) -> Result<f64, SelectionError> {
    if client_dist.class_count() != reference.class_count() {
        return Err(SelectionError::DimensionMismatch {
            left: client_dist.class_count(),
            right: reference.class_count(),
        });
    }
    Ok(client_dist
        .probs()
        .iter()
        .zip(reference.probs())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Ids of clients whose distance to the reference is strictly below the
/// threshold, in input order. An empty result is not an error; the caller
/// decides how to handle it.
pub fn select_clients(
    profiles: &[ClientProfile],
    cfg: &SelectionConfig,
) -> Result<Vec<usize>, SelectionError> {
    if profiles.is_empty() {
        return Err(SelectionError::InvalidArgument("no client profiles".into()));
    }
    cfg.validate()?;
    let mut selected = Vec::new();
    for p in profiles {
        if emd(&p.label_dist, &cfg.reference)? < cfg.threshold {
            selected.push(p.id);
        }
    }
    Ok(selected)
}

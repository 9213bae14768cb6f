//! Federated training engine: multinomial logistic regression with local
//! SGD, update clipping/perturbation, weighted aggregation, and evaluation.

use crate::data::Dataset;
use crate::params::ParameterVector;
use crate::privacy::{self, PrivacyError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

/// Learning-rate schedule for local SGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// eta_t = 1 / (lambda * t), with t the 1-based global round.
    InverseLambdaT { lambda: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    /// L2 ridge coefficient on the weight block (biases excluded); keeps
    /// the loss strongly convex.
    pub ridge: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidArgument(
                "local_epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate < 1.0) {
            return Err(ModelError::InvalidArgument(format!(
                "learning_rate {} out of [0, 1)",
                self.learning_rate
            )));
        }
        if self.ridge < 0.0 {
            return Err(ModelError::InvalidArgument("ridge must be >= 0".into()));
        }
        Ok(())
    }

    /// Effective learning rate for a 1-based global round.
    pub fn lr_at(&self, round: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::InverseLambdaT { lambda } => 1.0 / (lambda * round.max(1) as f64),
        }
    }
}

/// Multinomial logistic model shape: weight block of n_features x classes
/// laid out class-major, then one bias per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub n_features: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn dim(&self) -> usize {
        self.n_features * self.classes + self.classes
    }

    pub fn zero_params(&self) -> ParameterVector {
        ParameterVector::zeros(self.dim())
    }

    fn weight(&self, w: &ParameterVector, class: usize, feature: usize) -> f64 {
        w[class * self.n_features + feature]
    }

    fn bias(&self, w: &ParameterVector, class: usize) -> f64 {
        w[self.classes * self.n_features + class]
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn logits(shape: &ModelShape, w: &ParameterVector, x: &[f64]) -> Vec<f64> {
    (0..shape.classes)
        .map(|p| {
            let mut z = shape.bias(w, p);
            for (f, &xf) in x.iter().enumerate() {
                z += shape.weight(w, p, f) * xf;
            }
            z
        })
        .collect()
}

/// Mean multinomial log-loss plus the ridge penalty over the given rows.
pub fn loss(
    shape: &ModelShape,
    w: &ParameterVector,
    ds: &Dataset,
    rows: &[usize],
    ridge: f64,
) -> f64 {
    let mut total = 0.0;
    for &i in rows {
        let (x, y) = ds.sample(i);
        let probs = softmax(&logits(shape, w, x));
        total -= probs[y].max(1e-300).ln();
    }
    let mut reg = 0.0;
    for p in 0..shape.classes {
        for f in 0..shape.n_features {
            let wv = shape.weight(w, p, f);
            reg += wv * wv;
        }
    }
    total / rows.len() as f64 + 0.5 * ridge * reg
}

/// Analytic gradient of [`loss`] over the given rows.
pub fn gradient(
    shape: &ModelShape,
    w: &ParameterVector,
    ds: &Dataset,
    rows: &[usize],
    ridge: f64,
) -> ParameterVector {
    let mut grad = ParameterVector::zeros(shape.dim());
    let scale = 1.0 / rows.len() as f64;
    for &i in rows {
        let (x, y) = ds.sample(i);
        let probs = softmax(&logits(shape, w, x));
        for p in 0..shape.classes {
            let err = probs[p] - f64::from(u8::from(p == y));
            let base = p * shape.n_features;
            for (f, &xf) in x.iter().enumerate() {
                grad[base + f] += scale * err * xf;
            }
            grad[shape.classes * shape.n_features + p] += scale * err;
        }
    }
    for p in 0..shape.classes {
        for f in 0..shape.n_features {
            let idx = p * shape.n_features + f;
            grad[idx] += ridge * w[idx];
        }
    }
    grad
}

/// Run `local_epochs` of mini-batch SGD on the shard starting from `w`.
/// Batch order reshuffles each epoch; deterministic given `seed`.
pub fn local_sgd(
    w: &ParameterVector,
    shard: &Dataset,
    cfg: &TrainConfig,
    round: usize,
    seed: u64,
) -> Result<ParameterVector, ModelError> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(ModelError::InvalidArgument("shard must be nonempty".into()));
    }
    let shape = ModelShape { n_features: shard.n_features(), classes: shard.class_count() };
    if w.dim() != shape.dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "params dim {} vs model dim {}",
            w.dim(),
            shape.dim()
        )));
    }
    let eta = cfg.lr_at(round);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = w.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let grad = gradient(&shape, &params, shard, batch, cfg.ridge);
            params.axpy(-eta, &grad);
        }
    }
    Ok(params)
}

/// Compute the message a client uploads: the local update delta, clipped
/// to norm `clip_threshold` (skipped when `None`), with per-coordinate
/// Gaussian noise of variance `sigma_sq`.
pub fn local_update_message(
    w_global: &ParameterVector,
    shard: &Dataset,
    cfg: &TrainConfig,
    round: usize,
    clip_threshold: Option<f64>,
    sigma_sq: f64,
    train_seed: u64,
    noise_seed: u64,
) -> Result<ParameterVector, ModelError> {
    let local = local_sgd(w_global, shard, cfg, round, train_seed)?;
    let mut delta = local.sub(w_global);
    if let Some(c) = clip_threshold {
        delta = privacy::clip(&delta, c)?;
    }
    Ok(privacy::perturb(&delta, sigma_sq, noise_seed)?)
}

/// Weighted mean of messages: sum_i (w_i / sum w) * m_i.
pub fn aggregate(
    messages: &[ParameterVector],
    weights: &[f64],
) -> Result<ParameterVector, ModelError> {
    if messages.is_empty() || messages.len() != weights.len() {
        return Err(ModelError::InvalidArgument(
            "need equally many messages and weights, at least one".into(),
        ));
    }
    let dim = messages[0].dim();
    if messages.iter().any(|m| m.dim() != dim) {
        return Err(ModelError::DimensionMismatch("messages differ in dimension".into()));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(ModelError::InvalidArgument("weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(ModelError::InvalidArgument("weights must not all be zero".into()));
    }
    let mut out = ParameterVector::zeros(dim);
    for (m, &w) in messages.iter().zip(weights) {
        out.axpy(w / total, m);
    }
    Ok(out)
}

/// How aggregated messages move the global model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GlobalStepMode {
    /// Messages are gradients: w <- w - eta * aggregate.
    GradientDescent { eta: f64 },
    /// Messages are parameter deltas with the step absorbed:
    /// w <- w + aggregate.
    ApplyDelta,
}

pub fn global_step(
    w_global: &ParameterVector,
    aggregated: &ParameterVector,
    mode: GlobalStepMode,
) -> Result<ParameterVector, ModelError> {
    if w_global.dim() != aggregated.dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "global dim {} vs aggregate dim {}",
            w_global.dim(),
            aggregated.dim()
        )));
    }
    Ok(match mode {
        GlobalStepMode::GradientDescent { eta } => {
            let mut w = w_global.clone();
            w.axpy(-eta, aggregated);
            w
        }
        GlobalStepMode::ApplyDelta => w_global.add(aggregated),
    })
}

/// Accuracy (argmax, ties to the lowest class id) and mean log-loss on a
/// test set. The ridge penalty is excluded from the reported loss.
pub fn evaluate(w: &ParameterVector, test: &Dataset) -> Result<(f64, f64), ModelError> {
    if test.is_empty() {
        return Err(ModelError::InvalidArgument("test set must be nonempty".into()));
    }
    let shape = ModelShape { n_features: test.n_features(), classes: test.class_count() };
    if w.dim() != shape.dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "params dim {} vs model dim {}",
            w.dim(),
            shape.dim()
        )));
    }
    let mut correct = 0usize;
    let mut total_loss = 0.0;
    for i in 0..test.len() {
        let (x, y) = test.sample(i);
        let probs = softmax(&logits(&shape, w, x));
        let pred = probs
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                if v > bv { (j, v) } else { (bi, bv) }
            })
            .0;
        if pred == y {
            correct += 1;
        }
        total_loss -= probs[y].max(1e-300).ln();
    }
    Ok((correct as f64 / test.len() as f64, total_loss / test.len() as f64))
}

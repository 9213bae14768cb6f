//! Experiment configuration: a TOML document with defaults applied and
//! every field validated before any run starts. Unknown keys are
//! rejected.

use qi_dpfl_core::data::{self, LabelDistribution, PartitionMode, PartitionSpec};
use qi_dpfl_core::game::AccuracyModel;
use qi_dpfl_core::model::{LrSchedule, TrainConfig};
use qi_dpfl_core::seeding::derive_seed;
use qi_dpfl_core::selection::{ClientProfile, SelectionConfig};
use qi_dpfl_core::strategies::{
    AggregationMode, Experiment, GameTemplate, StrategyKind,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
}

fn default_master_seed() -> u64 {
    0
}
fn default_seed_count() -> usize {
    1
}
fn default_strategies() -> Vec<String> {
    vec!["fedavg".into(), "qi_dpfl".into()]
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    /// Number of independent seed indices each strategy runs with.
    #[serde(default = "default_seed_count")]
    pub seed_count: usize,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub clients: ClientsConfig,
    #[serde(default)]
    pub game: GameConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub accuracy_model: AccuracyModelConfig,
    #[serde(default)]
    pub dp: DpConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::per_class")]
        per_class: usize,
        #[serde(default = "defaults::test_per_class")]
        test_per_class: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "defaults::partition_mode")]
    pub mode: String,
    #[serde(default = "defaults::concentration")]
    pub concentration: f64,
    #[serde(default = "defaults::client_count")]
    pub client_count: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: defaults::partition_mode(),
            concentration: defaults::concentration(),
            client_count: defaults::client_count(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    /// Explicit reference distribution; uniform when omitted.
    #[serde(default)]
    pub reference: Option<Vec<f64>>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self { threshold: defaults::threshold(), reference: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    /// Explicit per-client privacy valuations; drawn from `nu_range`
    /// when omitted.
    #[serde(default)]
    pub nu: Option<Vec<f64>>,
    #[serde(default = "defaults::nu_range")]
    pub nu_range: [f64; 2],
    #[serde(default = "defaults::fixed_cost")]
    pub fixed_cost: f64,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        Self { nu: None, nu_range: defaults::nu_range(), fixed_cost: defaults::fixed_cost() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::pi")]
    pub pi: f64,
    #[serde(default = "defaults::phi1")]
    pub phi1: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::clip")]
    pub clip: f64,
    #[serde(default = "defaults::grad_bound")]
    pub v: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            gamma: defaults::gamma(),
            pi: defaults::pi(),
            phi1: defaults::phi1(),
            beta: defaults::beta(),
            lambda: defaults::lambda(),
            clip: defaults::clip(),
            v: defaults::grad_bound(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::lr_schedule")]
    pub lr_schedule: String,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::global_rounds")]
    pub global_rounds: usize,
    #[serde(default = "defaults::ridge")]
    pub ridge: f64,
    #[serde(default = "defaults::aggregation")]
    pub aggregation: String,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            local_epochs: defaults::local_epochs(),
            learning_rate: defaults::learning_rate(),
            lr_schedule: defaults::lr_schedule(),
            batch_size: defaults::batch_size(),
            global_rounds: defaults::global_rounds(),
            ridge: defaults::ridge(),
            aggregation: defaults::aggregation(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyModelConfig {
    #[serde(default = "defaults::i1")]
    pub i1: f64,
    #[serde(default = "defaults::i2")]
    pub i2: f64,
    #[serde(default = "defaults::i3")]
    pub i3: f64,
    #[serde(default = "defaults::i4")]
    pub i4: f64,
    #[serde(default = "defaults::eps_target")]
    pub eps_target: f64,
    #[serde(default = "defaults::eps_max")]
    pub eps_max: f64,
}

impl Default for AccuracyModelConfig {
    fn default() -> Self {
        Self {
            i1: defaults::i1(),
            i2: defaults::i2(),
            i3: defaults::i3(),
            i4: defaults::i4(),
            eps_target: defaults::eps_target(),
            eps_max: defaults::eps_max(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Fixed per-client budget for fedavg_dp; the mean of the round-1
    /// equilibrium budgets when omitted.
    #[serde(default)]
    pub fixed_rho: Option<f64>,
}

mod defaults {
    pub fn classes() -> usize {
        3
    }
    pub fn dim() -> usize {
        5
    }
    pub fn per_class() -> usize {
        200
    }
    pub fn test_per_class() -> usize {
        50
    }
    pub fn separation() -> f64 {
        3.0
    }
    pub fn partition_mode() -> String {
        "dirichlet".into()
    }
    pub fn concentration() -> f64 {
        1.0
    }
    pub fn client_count() -> usize {
        10
    }
    pub fn threshold() -> f64 {
        2.0
    }
    pub fn nu_range() -> [f64; 2] {
        [0.5, 2.0]
    }
    pub fn fixed_cost() -> f64 {
        0.01
    }
    pub fn gamma() -> f64 {
        0.5
    }
    // Table-1 MNIST profile.
    pub fn pi() -> f64 {
        0.9429
    }
    pub fn phi1() -> f64 {
        1.0
    }
    pub fn beta() -> f64 {
        1.0
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn clip() -> f64 {
        1.0
    }
    pub fn grad_bound() -> f64 {
        1.0
    }
    pub fn local_epochs() -> usize {
        1
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn lr_schedule() -> String {
        "constant".into()
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn global_rounds() -> usize {
        30
    }
    pub fn ridge() -> f64 {
        1e-3
    }
    pub fn aggregation() -> String {
        "uniform".into()
    }
    pub fn i1() -> f64 {
        0.9
    }
    pub fn i2() -> f64 {
        0.8
    }
    pub fn i3() -> f64 {
        1.0
    }
    pub fn i4() -> f64 {
        0.0
    }
    pub fn eps_target() -> f64 {
        0.5
    }
    pub fn eps_max() -> f64 {
        0.85
    }
}

impl ExperimentConfig {
    pub fn strategy_kinds(&self) -> Result<Vec<StrategyKind>, ConfigError> {
        self.strategies
            .iter()
            .map(|s| s.parse::<StrategyKind>().map_err(ConfigError::Validation))
            .collect()
    }

    pub fn partition_mode(&self) -> Result<PartitionMode, ConfigError> {
        match self.partition.mode.as_str() {
            "iid" => Ok(PartitionMode::Iid),
            "dirichlet" => Ok(PartitionMode::Dirichlet),
            other => Err(ConfigError::Validation(format!(
                "partition.mode '{other}' must be 'iid' or 'dirichlet'"
            ))),
        }
    }

    pub fn lr_schedule(&self) -> Result<LrSchedule, ConfigError> {
        match self.training.lr_schedule.as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "inverse_lambda_t" => Ok(LrSchedule::InverseLambdaT { lambda: self.game.lambda }),
            other => Err(ConfigError::Validation(format!(
                "training.lr_schedule '{other}' must be 'constant' or 'inverse_lambda_t'"
            ))),
        }
    }

    pub fn aggregation_mode(&self) -> Result<AggregationMode, ConfigError> {
        match self.training.aggregation.as_str() {
            "uniform" => Ok(AggregationMode::Uniform),
            "shard_size" => Ok(AggregationMode::ShardSize),
            other => Err(ConfigError::Validation(format!(
                "training.aggregation '{other}' must be 'uniform' or 'shard_size'"
            ))),
        }
    }

    pub fn accuracy_model(&self) -> AccuracyModel {
        AccuracyModel {
            i1: self.accuracy_model.i1,
            i2: self.accuracy_model.i2,
            i3: self.accuracy_model.i3,
            i4: self.accuracy_model.i4,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Validation(msg));
        if self.seed_count == 0 {
            return fail("seed_count must be >= 1".into());
        }
        if self.strategies.is_empty() {
            return fail("strategies must be nonempty".into());
        }
        if self.workers == 0 {
            return fail("workers must be >= 1".into());
        }
        self.strategy_kinds()?;
        self.partition_mode()?;
        self.lr_schedule()?;
        self.aggregation_mode()?;

        match &self.dataset {
            DatasetConfig::Synthetic { classes, dim, per_class, test_per_class, separation } => {
                if *classes < 2 {
                    return fail("dataset.classes must be >= 2".into());
                }
                if *dim == 0 || *per_class == 0 || *test_per_class == 0 {
                    return fail("dataset sizes must be >= 1".into());
                }
                if *separation <= 0.0 {
                    return fail("dataset.separation must be > 0".into());
                }
            }
            DatasetConfig::Idx { images, labels, test_images, test_labels } => {
                for p in [images, labels, test_images, test_labels] {
                    if !p.exists() {
                        return fail(format!("dataset path {} does not exist", p.display()));
                    }
                }
            }
        }

        if self.partition.concentration <= 0.0 {
            return fail("partition.concentration must be > 0".into());
        }
        if self.partition.client_count < 2 {
            return fail("partition.client_count must be >= 2".into());
        }
        if !(0.0..=2.0).contains(&self.selection.threshold) {
            return fail(format!(
                "selection.threshold {} out of [0, 2]",
                self.selection.threshold
            ));
        }
        if let Some(reference) = &self.selection.reference {
            LabelDistribution::new(reference.clone())
                .map_err(|e| ConfigError::Validation(format!("selection.reference: {e}")))?;
        }

        if let Some(nu) = &self.clients.nu {
            if nu.len() != self.partition.client_count {
                return fail(format!(
                    "clients.nu has {} entries, expected {}",
                    nu.len(),
                    self.partition.client_count
                ));
            }
            if nu.iter().any(|&v| v <= 0.0) {
                return fail("clients.nu entries must be > 0".into());
            }
        }
        let [lo, hi] = self.clients.nu_range;
        if !(lo > 0.0 && hi >= lo) {
            return fail("clients.nu_range must satisfy 0 < lo <= hi".into());
        }
        if self.clients.fixed_cost < 0.0 {
            return fail("clients.fixed_cost must be >= 0".into());
        }

        if !(self.game.gamma > 0.0 && self.game.gamma < 1.0) {
            return fail(format!("gamma {} out of (0,1)", self.game.gamma));
        }
        if !(self.game.pi > 0.0 && self.game.pi <= 1.0) {
            return fail(format!("pi {} out of (0,1]", self.game.pi));
        }
        for (name, value) in [
            ("phi1", self.game.phi1),
            ("beta", self.game.beta),
            ("lambda", self.game.lambda),
            ("clip", self.game.clip),
        ] {
            if value <= 0.0 {
                return fail(format!("game.{name} must be > 0"));
            }
        }
        if self.game.v < 0.0 {
            return fail("game.v must be >= 0".into());
        }

        if self.training.local_epochs == 0 || self.training.batch_size == 0 {
            return fail("training.local_epochs and batch_size must be >= 1".into());
        }
        if !(self.training.learning_rate >= 0.0 && self.training.learning_rate < 1.0) {
            return fail(format!(
                "training.learning_rate {} out of [0, 1)",
                self.training.learning_rate
            ));
        }
        if self.training.global_rounds == 0 {
            return fail("training.global_rounds must be >= 1".into());
        }
        if self.training.ridge < 0.0 {
            return fail("training.ridge must be >= 0".into());
        }

        let am = &self.accuracy_model;
        if am.i2 <= 0.0 || am.i3 <= 0.0 {
            return fail("accuracy_model.i2 and i3 must be > 0".into());
        }
        if !(am.i1 > 0.0 && am.i1 <= 1.0) {
            return fail(format!("accuracy_model.i1 {} out of (0, 1]", am.i1));
        }
        if !(am.eps_target < am.eps_max && am.eps_max < am.i1) {
            return fail(format!(
                "need eps_target < eps_max < i1, got {} / {} / {}",
                am.eps_target, am.eps_max, am.i1
            ));
        }

        if let Some(rho) = self.dp.fixed_rho {
            if rho <= 0.0 {
                return fail(format!("dp.fixed_rho {rho} must be > 0"));
            }
        }
        Ok(())
    }

    /// Build the train/test data for one seed index. Data seeds depend on
    /// the master seed and seed index only, never on the strategy.
    pub fn build_experiment(&self, seed_index: u64) -> Result<Experiment, ConfigError> {
        let data_seed = derive_seed(self.master_seed, "data", &[seed_index]);
        let test_seed = derive_seed(self.master_seed, "test", &[seed_index]);
        let (train, test) = match &self.dataset {
            DatasetConfig::Synthetic { classes, dim, per_class, test_per_class, separation } => {
                let train =
                    data::generate_synthetic(*classes, *dim, *per_class, *separation, data_seed)
                        .map_err(|e| ConfigError::Validation(e.to_string()))?;
                let test = data::generate_synthetic(
                    *classes,
                    *dim,
                    *test_per_class,
                    *separation,
                    test_seed,
                )
                .map_err(|e| ConfigError::Validation(e.to_string()))?;
                (train, test)
            }
            DatasetConfig::Idx { images, labels, test_images, test_labels } => {
                let train = data::load_idx(images, labels)
                    .map_err(|e| ConfigError::Validation(e.to_string()))?;
                let test = data::load_idx(test_images, test_labels)
                    .map_err(|e| ConfigError::Validation(e.to_string()))?;
                (train, test)
            }
        };

        let spec = PartitionSpec {
            mode: self.partition_mode()?,
            concentration: self.partition.concentration,
            client_count: self.partition.client_count,
            seed: derive_seed(self.master_seed, "partition", &[seed_index]),
        };
        let shards =
            data::partition(&train, &spec).map_err(|e| ConfigError::Validation(e.to_string()))?;

        let valuations: Vec<f64> = match &self.clients.nu {
            Some(nu) => nu.clone(),
            None => {
                let [lo, hi] = self.clients.nu_range;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.master_seed,
                    "valuations",
                    &[seed_index],
                ));
                (0..shards.len())
                    .map(|_| if lo == hi { lo } else { rng.gen_range(lo..hi) })
                    .collect()
            }
        };

        let profiles: Vec<ClientProfile> = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| {
                let label_dist = data::label_distribution(&shard)
                    .map_err(|e| ConfigError::Validation(e.to_string()))?;
                Ok(ClientProfile {
                    id,
                    shard,
                    label_dist,
                    valuation: valuations[id],
                    fixed_cost: self.clients.fixed_cost,
                })
            })
            .collect::<Result<_, ConfigError>>()?;

        let reference = match &self.selection.reference {
            Some(probs) => LabelDistribution::new(probs.clone())
                .map_err(|e| ConfigError::Validation(e.to_string()))?,
            None => LabelDistribution::uniform(test.class_count()),
        };

        Ok(Experiment {
            profiles,
            test,
            selection: SelectionConfig { reference, threshold: self.selection.threshold },
            train: TrainConfig {
                local_epochs: self.training.local_epochs,
                learning_rate: self.training.learning_rate,
                lr_schedule: self.lr_schedule()?,
                batch_size: self.training.batch_size,
                ridge: self.training.ridge,
            },
            rounds: self.training.global_rounds,
            game: GameTemplate {
                horizon: self.training.global_rounds,
                gamma: self.game.gamma,
                discount: self.game.pi,
                phi1: self.game.phi1,
                beta: self.game.beta,
                lambda: self.game.lambda,
                clip: self.game.clip,
                grad_bound: self.game.v,
            },
            accuracy_model: Some(self.accuracy_model()),
            eps_target: self.accuracy_model.eps_target,
            eps_max: self.accuracy_model.eps_max,
            fixed_rho: self.dp.fixed_rho,
            aggregation: self.aggregation_mode()?,
            master_seed: self.master_seed,
            seed_index,
        })
    }
}

/// Parse and validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
kind = "synthetic"
"#;

    #[test]
    fn minimal_config_gets_table_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.training.learning_rate, 0.01);
        assert_eq!(cfg.training.global_rounds, 30);
        assert_eq!(cfg.game.pi, 0.9429);
        assert_eq!(cfg.strategies, vec!["fedavg", "qi_dpfl"]);
    }

    #[test]
    fn out_of_range_gamma_is_rejected() {
        let text = format!("{MINIMAL}\n[game]\ngamma = 1.5\n");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{MINIMAL}\n[game]\ngamm = 0.5\n");
        let err = parse_config_str(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");
    }

    #[test]
    fn unknown_strategy_is_rejected() {
        let text = format!("{MINIMAL}\nstrategies = [\"fedavg\", \"fedavgg\"]\n");
        assert!(parse_config_str(&text).is_err());
    }

    #[test]
    fn builds_experiment_with_matching_shards() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        let exp = cfg.build_experiment(0).unwrap();
        assert_eq!(exp.profiles.len(), 10);
        let total: usize = exp.profiles.iter().map(|p| p.shard.len()).sum();
        assert_eq!(total, 600); // 3 classes x 200 per class

        // Data stream is seed-dependent, not strategy-dependent.
        let again = cfg.build_experiment(0).unwrap();
        for (a, b) in exp.profiles.iter().zip(&again.profiles) {
            assert_eq!(a.shard, b.shard);
            assert_eq!(a.valuation, b.valuation);
        }
        let other = cfg.build_experiment(1).unwrap();
        assert_ne!(exp.profiles[0].shard, other.profiles[0].shard);
    }

    #[test]
    fn nu_length_mismatch_is_rejected() {
        let text = format!("{MINIMAL}\n[clients]\nnu = [1.0, 2.0]\n");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.to_string().contains("clients.nu"), "{err}");
    }
}

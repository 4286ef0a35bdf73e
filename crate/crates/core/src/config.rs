//! Flat experiment configuration, read from TOML with `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, ViewConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::federation::FederationConfig;
use crate::model::LossWeights;
use crate::privacy::{DpConfig, DpStage, Mechanism};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Gaussian,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    OneStage,
    TwoStage,
}

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_path: PathBuf,
    /// Directory for normalized corpus caches; empty disables caching.
    pub cache_dir: PathBuf,
    /// Keep only the first N users (by id) when non-zero.
    pub max_users: usize,
    pub seed: u64,

    pub embed_dim: usize,
    pub hidden: Vec<usize>,

    pub rounds: usize,
    pub local_epochs: usize,
    pub clients_per_round: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    /// 0 means unlimited.
    pub max_local_steps: usize,
    pub checkpoint_every: usize,

    pub lambda_dssm: f64,
    pub lambda_im: f64,
    pub lambda_sm: f64,
    pub item_negatives: usize,
    pub segment_negatives: usize,
    pub pretrain_rounds: usize,

    pub clip_bound: f64,
    pub noise_multiplier: f64,
    /// When positive, the noise multiplier is calibrated to this ε instead.
    pub target_epsilon: f64,
    pub dp_delta: f64,
    pub mechanism: MechanismKind,
    pub dp_stage: StageKind,

    pub k_values: Vec<usize>,
    pub eval_negatives: usize,
    pub personalize: bool,
    /// When non-zero, evaluate only users with fewer interactions.
    pub inactive_threshold: usize,

    pub shadow_users: usize,
    pub forest_trees: usize,
    pub forest_depth: usize,
    pub attack_epsilons: Vec<f64>,

    pub accountant_n: usize,
    pub accountant_m: Vec<usize>,
    pub accountant_z: f64,
    pub accountant_rounds: usize,
    pub accountant_deltas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fed = FederationConfig::default();
        let views = ViewConfig::default();
        let dp = DpConfig::default();
        Self {
            dataset: DatasetKind::Movielens,
            data_path: PathBuf::from("data/ml-1m"),
            cache_dir: PathBuf::new(),
            max_users: 0,
            seed: 0,
            embed_dim: 8,
            hidden: vec![32, 16],
            rounds: fed.rounds,
            local_epochs: fed.local_epochs,
            clients_per_round: fed.clients_per_round,
            alpha1: fed.alpha1,
            alpha2: fed.alpha2,
            batch_size: fed.batch_size,
            negatives_per_positive: fed.negatives_per_positive,
            max_local_steps: 0,
            checkpoint_every: 0,
            lambda_dssm: 1.0,
            lambda_im: 1.0,
            lambda_sm: 1.0,
            item_negatives: views.item_negatives,
            segment_negatives: views.segment_negatives,
            pretrain_rounds: 20,
            clip_bound: dp.clip_bound,
            noise_multiplier: dp.noise_multiplier,
            target_epsilon: 0.0,
            dp_delta: dp.delta,
            mechanism: MechanismKind::Gaussian,
            dp_stage: StageKind::TwoStage,
            k_values: vec![5, 10, 20, 30],
            eval_negatives: 99,
            personalize: true,
            inactive_threshold: 0,
            shadow_users: 1000,
            forest_trees: 50,
            forest_depth: 6,
            attack_epsilons: vec![2.0, 5.0, 15.0],
            accountant_n: 4800,
            accountant_m: vec![5, 10, 15, 20, 25, 30],
            accountant_z: 1.0,
            accountant_rounds: 1000,
            accountant_deltas: vec![0.0, 1e-8, 1e-6, 1e-4],
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{raw}' is not key=value")))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

impl ExperimentConfig {
    /// Reads `path` (if any), then applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return bad("k_values must be non-empty and positive");
        }
        if self.eval_negatives == 0 {
            return bad("eval_negatives must be at least 1");
        }
        if self.accountant_deltas.iter().any(|d| !(0.0..1.0).contains(d)) {
            return bad("accountant deltas must lie in [0, 1)");
        }
        if self.attack_epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("attack epsilons must be positive");
        }
        self.weights().validate()?;
        self.federation().validate(usize::MAX)?;
        self.dp_config_with(self.noise_multiplier.max(0.0)).validate()?;
        Ok(())
    }

    /// Fails with a config error when the dataset path is missing.
    pub fn require_data(&self) -> Result<()> {
        if !self.data_path.exists() {
            return Err(Error::Config(format!("data_path {} does not exist", self.data_path.display())));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            dssm: self.lambda_dssm,
            item_mask: self.lambda_im,
            segment_mask: self.lambda_sm,
        }
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            clients_per_round: self.clients_per_round,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            batch_size: self.batch_size,
            seed: self.seed,
            negatives_per_positive: self.negatives_per_positive,
            max_local_steps: (self.max_local_steps > 0).then_some(self.max_local_steps),
            weights: self.weights(),
            views: ViewConfig {
                item_negatives: self.item_negatives,
                segment_negatives: self.segment_negatives,
            },
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            k_values: self.k_values.clone(),
            negatives: self.eval_negatives,
            personalize: self.personalize,
            max_interactions: (self.inactive_threshold > 0).then_some(self.inactive_threshold),
            seed: self.seed,
        }
    }

    pub fn stage(&self) -> DpStage {
        match self.dp_stage {
            StageKind::OneStage => DpStage::OneStage,
            StageKind::TwoStage => DpStage::TwoStage {
                pretrain_rounds: self.pretrain_rounds,
            },
        }
    }

    /// DP settings with an explicit noise multiplier (the Laplace budget, if
    /// any, comes from `target_epsilon` split over `rounds`).
    pub fn dp_config_with(&self, z: f64) -> DpConfig {
        let mechanism = match self.mechanism {
            MechanismKind::Gaussian => Mechanism::Gaussian,
            MechanismKind::Laplace => Mechanism::Laplace {
                epsilon_per_round: if self.target_epsilon > 0.0 {
                    self.target_epsilon / self.rounds.max(1) as f64
                } else {
                    f64::NAN
                },
            },
        };
        DpConfig {
            clip_bound: self.clip_bound,
            noise_multiplier: z,
            delta: self.dp_delta,
            mechanism,
        }
    }
}

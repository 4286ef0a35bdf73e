//! End-to-end recipes shared by the command line and the experiment tests.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::attack::{
    build_attack_dataset, build_shadow, measure_attack, train_attack, AttackModel, AttackRecord, Featurizer,
    ForestConfig, ShadowSplit,
};
use crate::config::{ExperimentConfig, MechanismKind};
use crate::data::{load_or_ingest, split, ClientDataset, Corpus, SplitPlan};
use crate::error::Result;
use crate::eval::{evaluate, MetricsReport};
use crate::federation::{train_with, Checkpointing, FederationConfig, LocalObjective, TrainOutput};
use crate::linalg::RngStream;
use crate::model::{ParamLayout, ParamSet};
use crate::privacy::{calibrate_noise, train_dp, DpOutput};

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    cfg.require_data()?;
    let cache = (!cfg.cache_dir.as_os_str().is_empty()).then_some(cfg.cache_dir.as_path());
    let corpus = load_or_ingest(&cfg.data_path, cfg.dataset, cache)?;
    Ok(if cfg.max_users > 0 && cfg.max_users < corpus.clients.len() {
        corpus.subset(&(0..cfg.max_users as u32).collect::<Vec<_>>())
    } else {
        corpus
    })
}

pub fn make_split(corpus: &Corpus, seed: u64) -> Result<SplitPlan> {
    split(corpus, &mut RngStream::new(seed, "split"))
}

pub fn init_params(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<ParamSet> {
    let layout = ParamLayout::new(corpus.model_dims(cfg.embed_dim, &cfg.hidden))?;
    Ok(ParamSet::init(Arc::new(layout), &mut RngStream::new(cfg.seed, "init")))
}

pub fn clients_of(corpus: &Corpus, ids: &[u32]) -> Vec<ClientDataset> {
    ids.iter().map(|&i| corpus.clients[i as usize].clone()).collect()
}

/// Federated REPTILE training on the recommendation loss.
pub fn train_privrec(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    clients: &[ClientDataset],
    checkpoints: &Checkpointing,
) -> Result<TrainOutput> {
    let theta0 = init_params(corpus, cfg)?;
    train_with(theta0, clients, &corpus.catalog, &cfg.federation(), LocalObjective::Dssm, 0, checkpoints)
}

/// Noiseless federated self-supervised pretraining for `pretrain_rounds`.
pub fn pretrain_ssl(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    clients: &[ClientDataset],
    checkpoints: &Checkpointing,
) -> Result<TrainOutput> {
    let theta0 = init_params(corpus, cfg)?;
    let fed = FederationConfig {
        rounds: cfg.pretrain_rounds,
        ..cfg.federation()
    };
    train_with(theta0, clients, &corpus.catalog, &fed, LocalObjective::SslOnly, 0, checkpoints)
}

/// Noise multiplier for a run: calibrated to `target_epsilon` when set.
pub fn resolve_noise(cfg: &ExperimentConfig, n_clients: usize) -> Result<f64> {
    if cfg.target_epsilon > 0.0 && cfg.mechanism == MechanismKind::Gaussian {
        calibrate_noise(cfg.target_epsilon, n_clients, cfg.clients_per_round, cfg.rounds, cfg.dp_delta)
    } else {
        Ok(cfg.noise_multiplier)
    }
}

pub fn train_private(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    clients: &[ClientDataset],
    checkpoints: &Checkpointing,
) -> Result<DpOutput> {
    let z = resolve_noise(cfg, clients.len())?;
    let dp = cfg.dp_config_with(z);
    let theta0 = init_params(corpus, cfg)?;
    train_dp(theta0, clients, &corpus.catalog, &cfg.federation(), &dp, cfg.stage(), checkpoints)
}

pub fn evaluate_model(cfg: &ExperimentConfig, theta: &ParamSet, corpus: &Corpus, plan: &SplitPlan, model: &str) -> Result<MetricsReport> {
    evaluate(theta, corpus, plan, &cfg.eval(), &cfg.federation(), model)
}

/// The attacker's side of the experiment: shadow model and attack classifier.
pub struct Attacker {
    pub split: ShadowSplit,
    pub model: AttackModel,
}

pub fn build_attacker(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Attacker> {
    let split = build_shadow(corpus, cfg.shadow_users, &mut RngStream::new(cfg.seed, "shadow"))?;
    let shadow = train_privrec(cfg, corpus, &clients_of(corpus, &split.used), &Checkpointing::default())?;
    let mut shadow_users: Vec<u32> = split.used.iter().chain(&split.unused).copied().collect();
    shadow_users.sort_unstable();
    let featurizer = Featurizer::new(&shadow.theta, corpus, &shadow_users)?;
    let examples = build_attack_dataset(&shadow.theta, corpus, &split)?;
    let forest = ForestConfig {
        trees: cfg.forest_trees,
        max_depth: cfg.forest_depth,
        seed: cfg.seed,
        ..ForestConfig::default()
    };
    let model = train_attack(&examples, featurizer, &forest)?;
    log::info!("attack training accuracy {:.4}", model.train_accuracy);
    Ok(Attacker { split, model })
}

/// Members (train the target) and the full probe list with membership truth.
pub fn probe_population(cfg: &ExperimentConfig, split: &ShadowSplit) -> (Vec<u32>, Vec<u32>, Vec<bool>) {
    let mut private = split.private.clone();
    private.shuffle(&mut RngStream::new(cfg.seed, "probe"));
    let half = private.len() / 2;
    let mut members = private[..half].to_vec();
    members.sort_unstable();
    let mut probes = private;
    probes.sort_unstable();
    let truth = probes.iter().map(|p| members.binary_search(p).is_ok()).collect();
    (members, probes, truth)
}

/// Attack accuracy against PrivRec and, per budget in `attack_epsilons`,
/// against Gaussian (DP-PrivRec) and Laplace (LM-PrivRec) targets.
pub fn run_attack(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<AttackRecord>> {
    let attacker = build_attacker(cfg, corpus)?;
    let (members, probes, truth) = probe_population(cfg, &attacker.split);
    let member_clients = clients_of(corpus, &members);
    let mut records = Vec::new();

    let target = train_privrec(cfg, corpus, &member_clients, &Checkpointing::default())?;
    records.push(AttackRecord {
        target_model: "privrec".into(),
        epsilon: None,
        mechanism: "none".into(),
        attack_accuracy: measure_attack(&attacker.model, &target.theta, corpus, &probes, &truth)?,
        seed: cfg.seed,
    });

    for &eps in &cfg.attack_epsilons {
        for mech in [MechanismKind::Gaussian, MechanismKind::Laplace] {
            let run_cfg = ExperimentConfig {
                target_epsilon: eps,
                mechanism: mech,
                ..cfg.clone()
            };
            let out = train_private(&run_cfg, corpus, &member_clients, &Checkpointing::default())?;
            let (name, mech_name) = match mech {
                MechanismKind::Gaussian => ("dp-privrec", "gaussian"),
                MechanismKind::Laplace => ("lm-privrec", "laplace"),
            };
            records.push(AttackRecord {
                target_model: name.into(),
                epsilon: Some(eps),
                mechanism: mech_name.into(),
                attack_accuracy: measure_attack(&attacker.model, &out.theta, corpus, &probes, &truth)?,
                seed: cfg.seed,
            });
        }
    }
    Ok(records)
}

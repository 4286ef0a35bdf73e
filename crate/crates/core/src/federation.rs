//! Simulated federated training: client sampling, local mini-batch SGD and
//! the REPTILE server update `θ0 ← θ0 + α2·mean(Δτ)`.
//!
//! Every client task draws from its own substream keyed by
//! `(seed, round, client)`, and deltas are reduced in ascending client-id
//! order, so results do not depend on the size of the rayon pool.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{client_views, examples_for, sample_negatives, ClientDataset, Interaction, ViewConfig};
use crate::error::{Error, Result};
use crate::linalg::{l2_norm, RngStream};
use crate::model::{Example, FieldValues, ItemCatalog, LossWeights, Objective, ParamSet, SslViews};

/// Which loss a local update descends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LocalObjective {
    Dssm,
    Joint,
    SslOnly,
}

impl LocalObjective {
    fn weights(self, w: LossWeights) -> LossWeights {
        match self {
            LocalObjective::Dssm => LossWeights {
                item_mask: 0.0,
                segment_mask: 0.0,
                ..w
            },
            LocalObjective::Joint => w,
            LocalObjective::SslOnly => LossWeights { dssm: 0.0, ..w },
        }
    }

    fn uses_examples(self) -> bool {
        self != LocalObjective::SslOnly
    }

    fn uses_views(self) -> bool {
        self != LocalObjective::Dssm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Global rounds (E1).
    pub rounds: usize,
    /// Local epochs per client update (E2).
    pub local_epochs: usize,
    /// Clients sampled per round (M).
    pub clients_per_round: usize,
    /// Local learning rate (α1).
    pub alpha1: f64,
    /// Server learning rate (α2).
    pub alpha2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Unobserved items sampled as label-0 examples per positive interaction.
    pub negatives_per_positive: usize,
    /// Caps the number of SGD steps in one local update; `Some(1)` gives the
    /// single-step variant.
    pub max_local_steps: Option<usize>,
    pub weights: LossWeights,
    pub views: ViewConfig,
    /// Write a checkpoint every K rounds (0 disables).
    pub checkpoint_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 40,
            local_epochs: 5,
            clients_per_round: 20,
            alpha1: 0.01,
            alpha2: 1.0,
            batch_size: 32,
            seed: 0,
            negatives_per_positive: 4,
            max_local_steps: None,
            weights: LossWeights::default(),
            views: ViewConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl FederationConfig {
    pub fn movielens() -> Self {
        Self {
            rounds: 80,
            local_epochs: 100,
            clients_per_round: 20,
            ..Self::default()
        }
    }

    pub fn frappe() -> Self {
        Self {
            rounds: 40,
            local_epochs: 100,
            clients_per_round: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_clients: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.local_epochs == 0 || self.clients_per_round == 0 || self.batch_size == 0 {
            return bad("local_epochs, clients_per_round and batch_size must be at least 1".into());
        }
        if !(self.alpha1 >= 0.0 && self.alpha1.is_finite()) || !(self.alpha2 > 0.0 && self.alpha2.is_finite()) {
            return bad(format!("learning rates must be finite with alpha2 > 0 (alpha1={}, alpha2={})", self.alpha1, self.alpha2));
        }
        if self.clients_per_round > n_clients {
            return bad(format!("clients_per_round {} exceeds {n_clients} clients", self.clients_per_round));
        }
        if self.max_local_steps == Some(0) {
            return bad("max_local_steps must be at least 1".into());
        }
        self.weights.validate()
    }
}

/// `θτ − θ0` with its cached L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    values: Vec<f64>,
    norm: f64,
}

impl Delta {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values)?;
        Ok(Self { values, norm })
    }

    pub fn between(after: &ParamSet, before: &ParamSet) -> Result<Self> {
        if after.len() != before.len() {
            return Err(Error::DimensionMismatch(format!("{} vs {} parameters", after.len(), before.len())));
        }
        Self::new(after.flatten().iter().zip(before.flatten()).map(|(a, b)| a - b).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// `m` distinct client ids drawn uniformly without replacement.
pub fn sample_clients(rng: &mut RngStream, n_total: usize, m: usize) -> Result<Vec<u32>> {
    if m == 0 || m > n_total {
        return Err(Error::InvalidArgument(format!("cannot sample {m} of {n_total} clients")));
    }
    Ok(index::sample(rng, n_total, m).into_iter().map(|i| i as u32).collect())
}

/// The examples and self-supervised views one local update trains on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalData {
    pub examples: Vec<Example>,
    pub views: SslViews,
}

/// Labeled interactions plus `negatives_per_positive` unobserved items per positive.
pub fn local_examples(
    user_features: &[FieldValues],
    interactions: &[Interaction],
    catalog: &ItemCatalog,
    negatives_per_positive: usize,
    rng: &mut RngStream,
) -> Result<Vec<Example>> {
    let mut out = examples_for(user_features, interactions, catalog)?;
    let positives = interactions.iter().filter(|i| i.label == 1).count();
    let seen: HashSet<u32> = interactions.iter().map(|i| i.item).collect();
    for item in sample_negatives(rng, catalog.len(), &seen, positives * negatives_per_positive) {
        out.push(catalog.example(user_features, item, 0)?);
    }
    Ok(out)
}

pub fn local_data(
    data: &ClientDataset,
    catalog: &ItemCatalog,
    cfg: &FederationConfig,
    mode: LocalObjective,
    rng: &mut RngStream,
) -> Result<LocalData> {
    let examples = if mode.uses_examples() {
        local_examples(&data.user_features, &data.interactions, catalog, cfg.negatives_per_positive, rng)?
    } else {
        Vec::new()
    };
    let views = if mode.uses_views() {
        client_views(&data.sessions, rng, catalog.len(), &cfg.views)
    } else {
        SslViews::default()
    };
    Ok(LocalData { examples, views })
}

/// Runs the local epochs from `theta0` and returns `θτ` with the mean batch
/// loss of the last epoch.
///
/// Each epoch shuffles the examples into `ceil(n / batch_size)` batches (one
/// batch when the client is smaller than `batch_size`) and deals the shuffled
/// views round-robin across them. Without examples the views themselves are
/// batched.
pub fn local_sgd(
    theta0: &ParamSet,
    local: &LocalData,
    catalog: &ItemCatalog,
    cfg: &FederationConfig,
    mode: LocalObjective,
    rng: &mut RngStream,
) -> Result<(ParamSet, f64)> {
    let n_ex = if mode.uses_examples() { local.examples.len() } else { 0 };
    let n_item = if mode.uses_views() { local.views.item.len() } else { 0 };
    let n_seg = if mode.uses_views() { local.views.segment.len() } else { 0 };
    if n_ex + n_item + n_seg == 0 {
        return Err(Error::Empty("client has no usable examples for the local objective"));
    }
    let objective = Objective {
        catalog,
        weights: mode.weights(cfg.weights),
    };
    let units = if n_ex > 0 { n_ex } else { n_item + n_seg };
    let n_batches = units.div_ceil(cfg.batch_size);
    let step_cap = cfg.max_local_steps.unwrap_or(usize::MAX);

    let mut theta = theta0.clone();
    let mut grad = vec![0.0; theta.len()];
    let mut steps = 0;
    let mut last_epoch_loss = 0.0;
    let mut ex_order: Vec<usize> = (0..n_ex).collect();
    let mut item_order: Vec<usize> = (0..n_item).collect();
    let mut seg_order: Vec<usize> = (0..n_seg).collect();

    'epochs: for _ in 0..cfg.local_epochs {
        ex_order.shuffle(rng);
        item_order.shuffle(rng);
        seg_order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0;
        for b in 0..n_batches {
            if steps == step_cap {
                if epoch_batches > 0 {
                    last_epoch_loss = epoch_loss / epoch_batches as f64;
                }
                break 'epochs;
            }
            let batch: Vec<Example> = if n_ex > 0 {
                ex_order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n_ex)]
                    .iter()
                    .map(|&i| local.examples[i].clone())
                    .collect()
            } else {
                Vec::new()
            };
            let views = if n_ex > 0 {
                SslViews {
                    item: deal(&item_order, b, n_batches, &local.views.item),
                    segment: deal(&seg_order, b, n_batches, &local.views.segment),
                }
            } else {
                // view batches: the concatenated item-then-segment order, chunked
                let lo = b * cfg.batch_size;
                let hi = ((b + 1) * cfg.batch_size).min(units);
                let mut v = SslViews::default();
                for u in lo..hi {
                    if u < n_item {
                        v.item.push(local.views.item[item_order[u]].clone());
                    } else {
                        v.segment.push(local.views.segment[seg_order[u - n_item]].clone());
                    }
                }
                v
            };
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = objective.evaluate(&theta, &batch, &views, Some(&mut grad))?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite("local loss"));
            }
            theta.axpy(-cfg.alpha1, &grad);
            epoch_loss += loss.total;
            epoch_batches += 1;
            steps += 1;
        }
        last_epoch_loss = epoch_loss / epoch_batches.max(1) as f64;
    }
    Ok((theta, last_epoch_loss))
}

fn deal<T: Clone>(order: &[usize], batch: usize, n_batches: usize, items: &[T]) -> Vec<T> {
    order
        .iter()
        .skip(batch)
        .step_by(n_batches)
        .map(|&i| items[i].clone())
        .collect()
}

/// One client's local update: builds its local data and runs [`local_sgd`].
/// Returns `Δτ = θτ − θ0` and the final local-epoch loss.
pub fn client_update(
    theta0: &ParamSet,
    data: &ClientDataset,
    catalog: &ItemCatalog,
    cfg: &FederationConfig,
    mode: LocalObjective,
    rng: &mut RngStream,
) -> Result<(Delta, f64)> {
    let local = local_data(data, catalog, cfg, mode, rng)?;
    let (theta, loss) = local_sgd(theta0, &local, catalog, cfg, mode, rng)?;
    Ok((Delta::between(&theta, theta0)?, loss))
}

/// Element-wise mean of the deltas, summed in the order given.
pub fn mean_delta(deltas: &[Delta]) -> Result<Vec<f64>> {
    let first = deltas.first().ok_or(Error::Empty("delta list"))?;
    let mut sum = vec![0.0; first.len()];
    for d in deltas {
        if d.len() != sum.len() {
            return Err(Error::DimensionMismatch(format!("delta of length {} vs {}", d.len(), sum.len())));
        }
        sum.iter_mut().zip(d.values()).for_each(|(s, v)| *s += v);
    }
    let m = deltas.len() as f64;
    sum.iter_mut().for_each(|s| *s /= m);
    Ok(sum)
}

/// `θ0 + α2 · (1/M) Σ Δτ`.
pub fn meta_update(theta0: &ParamSet, deltas: &[Delta], alpha2: f64) -> Result<ParamSet> {
    let mean = mean_delta(deltas)?;
    if mean.len() != theta0.len() {
        return Err(Error::DimensionMismatch(format!("delta of length {} vs {} parameters", mean.len(), theta0.len())));
    }
    let mut out = theta0.clone();
    out.axpy(alpha2, &mean);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundLoss {
    pub round: usize,
    pub mean_local_loss: f64,
}

/// Result of a federated run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub theta: ParamSet,
    pub trace: Vec<RoundLoss>,
}

pub fn write_loss_trace(path: &Path, trace: &[RoundLoss]) -> Result<()> {
    let mut out = String::from("round,mean_local_loss\n");
    for r in trace {
        out.push_str(&format!("{},{}\n", r.round, r.mean_local_loss));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Where and how often a run writes `round-XXXXX.ckpt` files.
#[derive(Debug, Clone, Default)]
pub struct Checkpointing {
    pub dir: Option<PathBuf>,
    pub every: usize,
}

impl Checkpointing {
    pub(crate) fn maybe_write(&self, round: usize, theta: &ParamSet) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        if self.every == 0 || round % self.every != 0 {
            return Ok(());
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        theta.write_checkpoint(&dir.join(format!("round-{round:05}.ckpt")))
    }
}

/// Per-round client work shared by plain and private training: samples `M`
/// clients, runs their updates in parallel and returns `(client, Δτ, loss)`
/// triples in ascending client-id order. `clip`, when set, is applied to each
/// delta inside its client task.
pub(crate) fn round_updates(
    theta: &ParamSet,
    clients: &[ClientDataset],
    catalog: &ItemCatalog,
    cfg: &FederationConfig,
    mode: LocalObjective,
    round: usize,
    clip: Option<f64>,
) -> Result<Vec<(u32, Delta, f64)>> {
    let mut sampler = RngStream::derived(cfg.seed, "sample-clients", &[round as u64]);
    let mut ids = sample_clients(&mut sampler, clients.len(), cfg.clients_per_round)?;
    ids.sort_unstable();
    ids.par_iter()
        .map(|&id| {
            let mut rng = RngStream::derived(cfg.seed, "client-update", &[round as u64, u64::from(id)]);
            let (delta, loss) = client_update(theta, &clients[id as usize], catalog, cfg, mode, &mut rng)?;
            let delta = match clip {
                Some(s) => crate::privacy::clip(&delta, s)?,
                None => delta,
            };
            Ok((id, delta, loss))
        })
        .collect()
}

pub(crate) fn mean_loss(updates: &[(u32, Delta, f64)]) -> f64 {
    updates.iter().map(|u| u.2).sum::<f64>() / updates.len() as f64
}

/// Runs `cfg.rounds` federated rounds from `theta0`.
pub fn train(
    theta0: ParamSet,
    clients: &[ClientDataset],
    catalog: &ItemCatalog,
    cfg: &FederationConfig,
    mode: LocalObjective,
) -> Result<TrainOutput> {
    train_with(theta0, clients, catalog, cfg, mode, 0, &Checkpointing::default())
}

/// [`train`] with checkpointing, numbering rounds from `first_round` so
/// consecutive stages draw from distinct client substreams.
pub fn train_with(
    theta0: ParamSet,
    clients: &[ClientDataset],
    catalog: &ItemCatalog,
    cfg: &FederationConfig,
    mode: LocalObjective,
    first_round: usize,
    checkpoints: &Checkpointing,
) -> Result<TrainOutput> {
    cfg.validate(clients.len())?;
    let mut theta = theta0;
    let mut trace = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let round = first_round + r;
        let updates = round_updates(&theta, clients, catalog, cfg, mode, round, None)?;
        trace.push(RoundLoss {
            round,
            mean_local_loss: mean_loss(&updates),
        });
        let deltas: Vec<Delta> = updates.into_iter().map(|u| u.1).collect();
        theta = meta_update(&theta, &deltas, cfg.alpha2)?;
        log::debug!("round {round}: mean local loss {:.5}", trace.last().unwrap().mean_local_loss);
        checkpoints.maybe_write(r + 1, &theta)?;
    }
    Ok(TrainOutput { theta, trace })
}

/// On-device adaptation: one local DSSM update from `theta` on the user's own
/// training interactions, returning the adapted parameters.
pub fn personalize(
    theta: &ParamSet,
    user_features: &[FieldValues],
    local_train: &[Interaction],
    catalog: &ItemCatalog,
    cfg: &FederationConfig,
    rng: &mut RngStream,
) -> Result<ParamSet> {
    if local_train.is_empty() {
        return Err(Error::Empty("local training set"));
    }
    let examples = local_examples(user_features, local_train, catalog, cfg.negatives_per_positive, rng)?;
    let local = LocalData {
        examples,
        views: SslViews::default(),
    };
    local_sgd(theta, &local, catalog, cfg, LocalObjective::Dssm, rng).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ParamLayout, Session};
    use std::sync::Arc;

    fn toy_catalog() -> ItemCatalog {
        ItemCatalog {
            field_vocab: vec![2],
            features: (0..6).map(|i| vec![vec![(i % 2) as u32]]).collect(),
        }
    }

    fn toy_theta(seed: u64) -> ParamSet {
        let layout = ParamLayout::new(ModelDims {
            user_fields: vec![2],
            item_count: 6,
            item_fields: vec![2],
            embed_dim: 2,
            hidden: vec![3],
        })
        .unwrap();
        ParamSet::init(Arc::new(layout), &mut RngStream::new(seed, "init"))
    }

    fn toy_client(id: u32) -> ClientDataset {
        let interactions: Vec<Interaction> = (0..4)
            .map(|i| Interaction {
                item: (id + i) % 6,
                label: (i % 2) as u8,
                timestamp: i as i64,
            })
            .collect();
        ClientDataset {
            client_id: id,
            user_features: vec![vec![id % 2]],
            interactions,
            sessions: vec![Session::new(vec![(id + 1) % 6, (id + 3) % 6])],
        }
    }

    #[test]
    fn sampling_is_a_permutation_when_exhaustive() {
        let mut ids = sample_clients(&mut RngStream::new(3, "s"), 5, 5).unwrap();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!(sample_clients(&mut RngStream::new(3, "s"), 5, 6).is_err());
        assert!(sample_clients(&mut RngStream::new(3, "s"), 5, 0).is_err());
        let a = sample_clients(&mut RngStream::new(9, "s"), 100, 10).unwrap();
        let b = sample_clients(&mut RngStream::new(9, "s"), 100, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn meta_update_arithmetic() {
        let theta = toy_theta(1);
        let n = theta.len();
        let zero = Delta::new(vec![0.0; n]).unwrap();
        assert_eq!(meta_update(&theta, &[zero.clone(), zero], 0.7).unwrap(), theta);

        let origin = theta.zeros_like();
        let d2 = Delta::new(vec![2.0; n]).unwrap();
        let d4 = Delta::new(vec![4.0; n]).unwrap();
        let out = meta_update(&origin, &[d2, d4], 0.5).unwrap();
        assert!(out.flatten().iter().all(|&v| v == 1.5));

        let short = Delta::new(vec![1.0; n - 1]).unwrap();
        assert!(meta_update(&theta, &[Delta::new(vec![1.0; n]).unwrap(), short], 1.0).is_err());
        assert!(meta_update(&theta, &[], 1.0).is_err());
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let cfg = FederationConfig {
            alpha1: 0.0,
            local_epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        let (d, _) = client_update(
            &toy_theta(2),
            &toy_client(1),
            &toy_catalog(),
            &cfg,
            LocalObjective::Joint,
            &mut RngStream::new(0, "c"),
        )
        .unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
        assert_eq!(d.norm(), 0.0);
    }

    #[test]
    fn full_batch_single_epoch_is_one_gradient_step() {
        let cfg = FederationConfig {
            alpha1: 0.05,
            local_epochs: 1,
            batch_size: 1000,
            ..Default::default()
        };
        let theta = toy_theta(4);
        let catalog = toy_catalog();
        let client = toy_client(2);
        let mut rng = RngStream::new(5, "c");
        let (d, _) = client_update(&theta, &client, &catalog, &cfg, LocalObjective::Dssm, &mut rng).unwrap();

        let mut rng = RngStream::new(5, "c");
        let local = local_data(&client, &catalog, &cfg, LocalObjective::Dssm, &mut rng).unwrap();
        let g = crate::model::grad_dssm(&theta, &local.examples).unwrap();
        for (dv, gv) in d.values().iter().zip(g.flatten()) {
            assert!((dv + cfg.alpha1 * gv).abs() <= 1e-15 * (1.0 + gv.abs()));
        }
    }

    #[test]
    fn single_step_cap() {
        let cfg = FederationConfig {
            alpha1: 0.05,
            local_epochs: 4,
            batch_size: 2,
            max_local_steps: Some(1),
            ..Default::default()
        };
        let many = FederationConfig {
            max_local_steps: None,
            ..cfg.clone()
        };
        let theta = toy_theta(6);
        let c = toy_client(3);
        let run = |cfg: &FederationConfig| {
            client_update(&theta, &c, &toy_catalog(), cfg, LocalObjective::Dssm, &mut RngStream::new(1, "c"))
                .unwrap()
                .0
        };
        assert!(run(&cfg).norm() < run(&many).norm());
    }

    #[test]
    fn training_reduces_loss_and_is_thread_independent() {
        let clients: Vec<ClientDataset> = (0..8).map(toy_client).collect();
        let cfg = FederationConfig {
            rounds: 15,
            local_epochs: 3,
            clients_per_round: 4,
            alpha1: 0.1,
            batch_size: 4,
            ..Default::default()
        };
        let catalog = toy_catalog();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train(toy_theta(7), &clients, &catalog, &cfg, LocalObjective::Joint).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.last().unwrap().mean_local_loss < a.trace[0].mean_local_loss);

        let zero = FederationConfig { rounds: 0, ..cfg.clone() };
        assert_eq!(train(toy_theta(7), &clients, &catalog, &zero, LocalObjective::Dssm).unwrap().theta, toy_theta(7));
    }

    #[test]
    fn personalization_depends_on_data() {
        let theta = toy_theta(8);
        let cfg = FederationConfig {
            alpha1: 0.1,
            ..Default::default()
        };
        let catalog = toy_catalog();
        let a = toy_client(0);
        let b = toy_client(3);
        let pa = personalize(&theta, &a.user_features, &a.interactions, &catalog, &cfg, &mut RngStream::new(1, "p")).unwrap();
        let pb = personalize(&theta, &b.user_features, &b.interactions, &catalog, &cfg, &mut RngStream::new(1, "p")).unwrap();
        assert_ne!(pa, pb);
        assert!(personalize(&theta, &a.user_features, &[], &catalog, &cfg, &mut RngStream::new(1, "p")).is_err());
        let frozen = FederationConfig { alpha1: 0.0, ..cfg };
        let p0 = personalize(&theta, &a.user_features, &a.interactions, &catalog, &frozen, &mut RngStream::new(1, "p")).unwrap();
        assert_eq!(p0, theta);
    }
}

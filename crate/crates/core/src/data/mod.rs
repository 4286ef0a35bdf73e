//! Dataset ingestion, per-user partitioning, sessions, self-supervised views
//! and the user-level train/test split.

mod frappe;
mod movielens;
pub mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::RngStream;
use crate::model::{
    Example, FieldValues, ItemCatalog, ItemMaskedView, ModelDims, SegmentMaskedView, Session, SslViews,
};

pub use frappe::FRAPPE_COLUMNS;
pub use movielens::{MOVIELENS_AGES, MOVIELENS_GENRES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Movielens,
    Frappe,
}

impl DatasetKind {
    /// (users, items, interactions) of the full public releases.
    pub fn expected_counts(self) -> (usize, usize, usize) {
        match self {
            DatasetKind::Movielens => (6040, 3706, 1_000_209),
            DatasetKind::Frappe => (957, 4082, 288_609),
        }
    }

    pub fn default_sessions(self) -> SessionPolicy {
        match self {
            DatasetKind::Movielens => SessionPolicy {
                gap_seconds: Some(3600),
                max_len: 10,
            },
            DatasetKind::Frappe => SessionPolicy {
                gap_seconds: None,
                max_len: 10,
            },
        }
    }
}

/// One rated item in a user's history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: u32,
    pub label: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: u32,
    pub user_features: Vec<FieldValues>,
    /// Time-ordered.
    pub interactions: Vec<Interaction>,
    pub sessions: Vec<Session>,
}

impl ClientDataset {
    pub fn examples(&self, catalog: &ItemCatalog) -> Result<Vec<Example>> {
        examples_for(&self.user_features, &self.interactions, catalog)
    }

    pub fn positive_items(&self) -> HashSet<u32> {
        self.interactions
            .iter()
            .filter(|i| i.label == 1)
            .map(|i| i.item)
            .collect()
    }

    pub fn seen_items(&self) -> HashSet<u32> {
        self.interactions.iter().map(|i| i.item).collect()
    }
}

pub fn examples_for(
    user_features: &[FieldValues],
    interactions: &[Interaction],
    catalog: &ItemCatalog,
) -> Result<Vec<Example>> {
    interactions
        .iter()
        .map(|i| catalog.example(user_features, i.item, i.label))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub kind: DatasetKind,
    pub clients: Vec<ClientDataset>,
    pub catalog: ItemCatalog,
    pub user_field_names: Vec<String>,
    pub user_field_vocab: Vec<usize>,
    pub item_field_names: Vec<String>,
    /// Original identifiers, indexed by client id / item id.
    pub raw_user_ids: Vec<String>,
    pub raw_item_ids: Vec<String>,
}

impl Corpus {
    pub fn n_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.clients.iter().map(|c| c.interactions.len()).sum()
    }

    pub fn model_dims(&self, embed_dim: usize, hidden: &[usize]) -> ModelDims {
        ModelDims {
            user_fields: self.user_field_vocab.clone(),
            item_count: self.n_items(),
            item_fields: self.catalog.field_vocab.clone(),
            embed_dim,
            hidden: hidden.to_vec(),
        }
    }

    /// Checks every index against the vocabularies and the per-client invariants.
    pub fn validate(&self) -> Result<()> {
        let n_items = self.n_items();
        for (i, feats) in self.catalog.features.iter().enumerate() {
            check_bags("item feature", feats, &self.catalog.field_vocab).map_err(|e| {
                Error::InvalidArgument(format!("item {i}: {e}"))
            })?;
        }
        for (idx, c) in self.clients.iter().enumerate() {
            if c.client_id as usize != idx {
                return Err(Error::InvalidArgument(format!(
                    "client at position {idx} has id {}",
                    c.client_id
                )));
            }
            check_bags("user feature", &c.user_features, &self.user_field_vocab)?;
            let mut last = i64::MIN;
            for it in &c.interactions {
                if it.item as usize >= n_items {
                    return Err(Error::OutOfVocabulary {
                        what: "item id",
                        index: it.item as usize,
                        size: n_items,
                    });
                }
                if it.label > 1 {
                    return Err(Error::InvalidArgument(format!("label {} is not binary", it.label)));
                }
                if it.timestamp < last {
                    return Err(Error::InvalidArgument(format!(
                        "client {idx} interactions are not time-ordered"
                    )));
                }
                last = it.timestamp;
            }
            let positives = c.positive_items();
            if c.sessions.iter().flat_map(|s| &s.items).any(|i| !positives.contains(i)) {
                return Err(Error::InvalidArgument(format!(
                    "client {idx} has a session item outside its positives"
                )));
            }
        }
        Ok(())
    }

    /// Restrict to the given clients (in the given order), renumbering them.
    /// Items keep their ids so checkpoints stay compatible with the full catalog.
    pub fn subset(&self, clients: &[u32]) -> Corpus {
        let mut out = self.clone();
        out.clients = clients
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let mut c = self.clients[old as usize].clone();
                c.client_id = new_id as u32;
                c
            })
            .collect();
        out.raw_user_ids = clients
            .iter()
            .map(|&c| self.raw_user_ids[c as usize].clone())
            .collect();
        out
    }
}

fn check_bags(what: &'static str, bags: &[FieldValues], vocab: &[usize]) -> Result<()> {
    if bags.len() != vocab.len() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {} fields but vocabulary has {}",
            bags.len(),
            vocab.len()
        )));
    }
    for (bag, &size) in bags.iter().zip(vocab) {
        if let Some(&bad) = bag.iter().find(|&&i| i as usize >= size) {
            return Err(Error::OutOfVocabulary {
                what,
                index: bad as usize,
                size,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPolicy {
    /// Maximum gap between consecutive positives of one session; `None`
    /// chunks the time-ordered positives into runs of `max_len`.
    pub gap_seconds: Option<i64>,
    pub max_len: usize,
}

/// Groups positive interactions into maximal runs with gaps `<= gap`, then
/// chunks each run into pieces of at most `max_len`.
pub fn build_sessions(interactions: &[Interaction], gap: Option<i64>, max_len: usize) -> Vec<Session> {
    let max_len = max_len.max(1);
    let mut runs: Vec<Vec<u32>> = Vec::new();
    let mut last_ts: Option<i64> = None;
    for it in interactions.iter().filter(|i| i.label == 1) {
        let new_run = match (gap, last_ts) {
            (Some(g), Some(prev)) => it.timestamp - prev > g,
            (_, None) => true,
            (None, Some(_)) => false,
        };
        if new_run {
            runs.push(Vec::new());
        }
        runs.last_mut().unwrap().push(it.item);
        last_ts = Some(it.timestamp);
    }
    runs.into_iter()
        .flat_map(|run| {
            run.chunks(max_len)
                .map(|c| Session::new(c.to_vec()))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Reads a dataset directory (or file, for Frappe) in its distributed format.
pub fn ingest(path: &Path, kind: DatasetKind) -> Result<Corpus> {
    let corpus = match kind {
        DatasetKind::Movielens => movielens::ingest(path)?,
        DatasetKind::Frappe => frappe::ingest(path)?,
    };
    let (u, i, n) = kind.expected_counts();
    let got = (corpus.clients.len(), corpus.n_items(), corpus.n_interactions());
    if got != (u, i, n) {
        log::warn!(
            "{kind:?} ingest produced {} users / {} items / {} interactions; the full release has {u} / {i} / {n}",
            got.0,
            got.1,
            got.2
        );
    }
    corpus.validate()?;
    Ok(corpus)
}

/// The raw files an ingest of `path` reads, in a fixed order.
pub fn source_files(path: &Path, kind: DatasetKind) -> Vec<PathBuf> {
    match kind {
        DatasetKind::Movielens => movielens::FILES.iter().map(|f| path.join(f)).collect(),
        DatasetKind::Frappe => frappe::source_files(path),
    }
}

/// SHA-256 over the source files (length-prefixed, in [`source_files`] order).
pub fn source_checksum(path: &Path, kind: DatasetKind) -> Result<String> {
    let mut h = Sha256::new();
    for f in source_files(path, kind) {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    checksum: String,
    corpus: Corpus,
}

pub fn cache_path(cache_dir: &Path, kind: DatasetKind, checksum: &str) -> PathBuf {
    let kind = match kind {
        DatasetKind::Movielens => "movielens",
        DatasetKind::Frappe => "frappe",
    };
    cache_dir.join(format!("corpus-{kind}-{}.json", &checksum[..16]))
}

/// Ingests `path`, reusing a normalized cache in `cache_dir` keyed by the
/// sources' checksum when one exists.
pub fn load_or_ingest(path: &Path, kind: DatasetKind, cache_dir: Option<&Path>) -> Result<Corpus> {
    let Some(dir) = cache_dir else {
        return ingest(path, kind);
    };
    let checksum = source_checksum(path, kind)?;
    let file = cache_path(dir, kind, &checksum);
    if let Ok(bytes) = fs::read(&file) {
        match serde_json::from_slice::<CacheFile>(&bytes) {
            Ok(c) if c.version == CACHE_VERSION && c.checksum == checksum => return Ok(c.corpus),
            _ => log::warn!("ignoring stale corpus cache {}", file.display()),
        }
    }
    let corpus = ingest(path, kind)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let body = serde_json::to_vec(&CacheFile {
        version: CACHE_VERSION,
        checksum,
        corpus,
    })?;
    fs::write(&file, &body).map_err(|e| Error::io(&file, e))?;
    let cached: CacheFile = serde_json::from_slice(&body)?;
    Ok(cached.corpus)
}

// ---------------------------------------------------------------------------
// split

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestUser {
    pub client_id: u32,
    /// Earlier half of the history, used for on-device adaptation.
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Ascending client ids.
    pub train_users: Vec<u32>,
    /// Ascending by client id.
    pub test_users: Vec<TestUser>,
}

/// Earlier half to train; an odd count rounds up on the train side.
pub fn split_history(interactions: &[Interaction]) -> (Vec<Interaction>, Vec<Interaction>) {
    let n_train = interactions.len().div_ceil(2);
    (interactions[..n_train].to_vec(), interactions[n_train..].to_vec())
}

/// Random 80/20 user-level split; each test user's history is halved in time order.
pub fn split(corpus: &Corpus, rng: &mut RngStream) -> Result<SplitPlan> {
    let n = corpus.clients.len();
    if n < 5 {
        return Err(Error::InvalidArgument(format!("need at least 5 users to split, got {n}")));
    }
    let n_test = n / 5;
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(rng);
    let mut test: Vec<u32> = ids[..n_test].to_vec();
    let mut train: Vec<u32> = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    let test_users = test
        .into_iter()
        .map(|id| {
            let (tr, te) = split_history(&corpus.clients[id as usize].interactions);
            TestUser {
                client_id: id,
                train: tr,
                test: te,
            }
        })
        .collect();
    Ok(SplitPlan {
        train_users: train,
        test_users,
    })
}

// ---------------------------------------------------------------------------
// self-supervised views

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    /// Negative items added to each item-masked candidate set.
    pub item_negatives: usize,
    /// Negative segments per segment-masked view.
    pub segment_negatives: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            item_negatives: 10,
            segment_negatives: 3,
        }
    }
}

/// Uniform draw from `0..n_items` excluding `exclude`; `None` if nothing is left.
fn draw_excluding(rng: &mut RngStream, n_items: usize, exclude: &HashSet<u32>) -> Option<u32> {
    if exclude.len() >= n_items {
        let free = (0..n_items as u32).filter(|i| !exclude.contains(i)).count();
        if free == 0 {
            return None;
        }
    }
    loop {
        let c = rng.random_range(0..n_items as u32);
        if !exclude.contains(&c) {
            return Some(c);
        }
    }
}

/// Up to `k` distinct items outside `exclude`.
pub fn sample_negatives(rng: &mut RngStream, n_items: usize, exclude: &HashSet<u32>, k: usize) -> Vec<u32> {
    let available = (0..n_items as u32).filter(|i| !exclude.contains(i)).count();
    let k = k.min(available);
    let mut taken = exclude.clone();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let c = draw_excluding(rng, n_items, &taken).expect("counted above");
        taken.insert(c);
        out.push(c);
    }
    out
}

fn negative_segment(
    rng: &mut RngStream,
    len: usize,
    own: usize,
    sessions: &[Session],
    n_items: usize,
) -> Session {
    let eligible: Vec<&Session> = sessions
        .iter()
        .enumerate()
        .filter(|(i, s)| *i != own && s.len() >= len)
        .map(|(_, s)| s)
        .collect();
    if !eligible.is_empty() {
        let src = eligible[rng.random_range(0..eligible.len())];
        let start = rng.random_range(0..=src.len() - len);
        return Session::new(src.items[start..start + len].to_vec());
    }
    Session::new((0..len).map(|_| rng.random_range(0..n_items as u32)).collect())
}

/// Item- and segment-masked views of `sessions[index]`. Sessions shorter than
/// 2 (item) or 4 (segment) yield no view of that kind.
pub fn make_views(
    sessions: &[Session],
    index: usize,
    rng: &mut RngStream,
    n_items: usize,
    cfg: &ViewConfig,
) -> (Option<ItemMaskedView>, Option<SegmentMaskedView>) {
    let s = &sessions[index];
    let t = s.len();
    let in_session: HashSet<u32> = s.items.iter().copied().collect();

    let item_view = if t >= 2 {
        let pos = rng.random_range(0..t);
        draw_excluding(rng, n_items, &in_session).map(|replacement| {
            let mut masked = s.items.clone();
            let positive = masked[pos];
            masked[pos] = replacement;
            let mut candidates = vec![positive];
            candidates.extend(sample_negatives(rng, n_items, &in_session, cfg.item_negatives));
            ItemMaskedView {
                masked: Session::new(masked),
                positive,
                candidates,
            }
        })
    } else {
        None
    };

    let segment_view = if t >= 4 && cfg.segment_negatives >= 1 {
        let len = rng.random_range(2..=t / 2);
        let start = rng.random_range(0..=t - len);
        let positive = Session::new(s.items[start..start + len].to_vec());
        let mut negatives = Vec::with_capacity(cfg.segment_negatives);
        for _ in 0..cfg.segment_negatives {
            negatives.push(negative_segment(rng, len, index, sessions, n_items));
        }
        let mut masked = s.items.clone();
        masked[start..start + len].copy_from_slice(&negatives[0].items);
        Some(SegmentMaskedView {
            masked: Session::new(masked),
            positive,
            negatives,
        })
    } else {
        None
    };
    (item_view, segment_view)
}

/// All views for one client's sessions, in session order.
pub fn client_views(sessions: &[Session], rng: &mut RngStream, n_items: usize, cfg: &ViewConfig) -> SslViews {
    let mut views = SslViews::default();
    for i in 0..sessions.len() {
        let (iv, sv) = make_views(sessions, i, rng, n_items, cfg);
        views.item.extend(iv);
        views.segment.extend(sv);
    }
    views
}

/// Median and mean interaction counts across clients.
pub fn activity_stats(corpus: &Corpus) -> (f64, f64) {
    let mut counts: Vec<usize> = corpus.clients.iter().map(|c| c.interactions.len()).collect();
    if counts.is_empty() {
        return (0.0, 0.0);
    }
    counts.sort_unstable();
    let n = counts.len();
    let median = if n % 2 == 1 {
        counts[n / 2] as f64
    } else {
        (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0
    };
    let mean = counts.iter().sum::<usize>() as f64 / n as f64;
    (median, mean)
}

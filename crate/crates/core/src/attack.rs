//! Membership inference against recommendation outputs.
//!
//! The attacker holds a shadow population it trains its own model on, and
//! only ever sees `(user features, top-10 list)` pairs from the target.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::rank_by_scores;
use crate::linalg::RngStream;
use crate::model::{item_embedding, score, FieldValues, ItemCatalog, ParamSet};

pub const REC_LIST_LEN: usize = 10;

/// Attacker/private partition of a corpus's users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowSplit {
    /// Shadow users whose data trains the shadow model (label "in").
    pub used: Vec<u32>,
    /// Shadow users held out of the shadow model (label "out").
    pub unused: Vec<u32>,
    /// Users outside the shadow population.
    pub private: Vec<u32>,
}

/// Draws `shadow_size` users as the shadow population, 80% of them used.
pub fn build_shadow(corpus: &Corpus, shadow_size: usize, rng: &mut RngStream) -> Result<ShadowSplit> {
    let n = corpus.clients.len();
    if shadow_size < 5 || shadow_size + 4 > n {
        return Err(Error::InvalidArgument(format!(
            "need 5 <= shadow users <= total - 4, got {shadow_size} of {n}"
        )));
    }
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(rng);
    let n_used = shadow_size * 4 / 5;
    let mut used = ids[..n_used].to_vec();
    let mut unused = ids[n_used..shadow_size].to_vec();
    let mut private = ids[shadow_size..].to_vec();
    used.sort_unstable();
    unused.sort_unstable();
    private.sort_unstable();
    Ok(ShadowSplit { used, unused, private })
}

/// Highest-scoring `k` items of the whole catalog for these user features.
pub fn recommend(theta: &ParamSet, catalog: &ItemCatalog, user_features: &[FieldValues], k: usize) -> Result<Vec<u32>> {
    let items: Vec<u32> = (0..catalog.len() as u32).collect();
    let scores = items
        .iter()
        .map(|&i| score(theta, &catalog.example(user_features, i, 0)?))
        .collect::<Result<Vec<_>>>()?;
    let mut ranked = rank_by_scores(&items, &scores)?;
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackExample {
    pub user_features: Vec<FieldValues>,
    pub rec_list: Vec<u32>,
    /// `true` for members ("in").
    pub label: bool,
}

/// Attack examples for `users`, labeled by `member`, from `theta`'s top-10 lists.
pub fn attack_examples(
    theta: &ParamSet,
    corpus: &Corpus,
    users: &[u32],
    member: impl Fn(u32) -> bool + Sync,
) -> Result<Vec<AttackExample>> {
    users
        .par_iter()
        .map(|&u| {
            let feats = &corpus.clients[u as usize].user_features;
            Ok(AttackExample {
                user_features: feats.clone(),
                rec_list: recommend(theta, &corpus.catalog, feats, REC_LIST_LEN)?,
                label: member(u),
            })
        })
        .collect()
}

/// One example per shadow user; used users are "in".
pub fn build_attack_dataset(f_s: &ParamSet, corpus: &Corpus, split: &ShadowSplit) -> Result<Vec<AttackExample>> {
    let mut users: Vec<u32> = split.used.iter().chain(&split.unused).copied().collect();
    users.sort_unstable();
    attack_examples(f_s, corpus, &users, |u| split.used.binary_search(&u).is_ok())
}

/// Maps `(u, l_u)` to a dense vector: user one-hots, the mean item-tower
/// embedding of the list under the shadow model, each rank's item popularity
/// in the shadow data, and the list's mean popularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub user_field_vocab: Vec<usize>,
    pub item_embeddings: Vec<Vec<f64>>,
    /// `ln(1 + interactions)` per item within the shadow population.
    pub popularity: Vec<f64>,
}

impl Featurizer {
    pub fn new(f_s: &ParamSet, corpus: &Corpus, shadow_users: &[u32]) -> Result<Self> {
        let mut counts = vec![0usize; corpus.n_items()];
        for &u in shadow_users {
            for it in &corpus.clients[u as usize].interactions {
                counts[it.item as usize] += 1;
            }
        }
        let item_embeddings = (0..corpus.n_items() as u32)
            .map(|i| item_embedding(f_s, &corpus.catalog, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            user_field_vocab: corpus.user_field_vocab.clone(),
            item_embeddings,
            popularity: counts.iter().map(|&c| (1.0 + c as f64).ln()).collect(),
        })
    }

    pub fn width(&self) -> usize {
        let emb = self.item_embeddings.first().map_or(0, Vec::len);
        self.user_field_vocab.iter().sum::<usize>() + emb + REC_LIST_LEN + 1
    }

    pub fn features(&self, ex: &AttackExample) -> Result<Vec<f64>> {
        if ex.rec_list.len() != REC_LIST_LEN {
            return Err(Error::InvalidArgument(format!("rec list has {} items, expected {REC_LIST_LEN}", ex.rec_list.len())));
        }
        let mut out = Vec::with_capacity(self.width());
        for (bag, &size) in ex.user_features.iter().zip(&self.user_field_vocab) {
            let mut onehot = vec![0.0; size];
            for &v in bag {
                *onehot.get_mut(v as usize).ok_or(Error::OutOfVocabulary {
                    what: "user feature",
                    index: v as usize,
                    size,
                })? = 1.0;
            }
            out.extend(onehot);
        }
        let emb_dim = self.item_embeddings.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; emb_dim];
        for &i in &ex.rec_list {
            let e = self.item_embeddings.get(i as usize).ok_or(Error::OutOfVocabulary {
                what: "item id",
                index: i as usize,
                size: self.item_embeddings.len(),
            })?;
            mean.iter_mut().zip(e).for_each(|(m, v)| *m += v / REC_LIST_LEN as f64);
        }
        out.extend(mean);
        let pops: Vec<f64> = ex.rec_list.iter().map(|&i| self.popularity[i as usize]).collect();
        out.extend(&pops);
        out.push(pops.iter().sum::<f64>() / REC_LIST_LEN as f64);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// random forest

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
    /// Draw half of every bootstrap from each class instead of uniformly.
    pub balanced: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 50,
            max_depth: 6,
            min_leaf: 3,
            seed: 0,
            balanced: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf { p_in: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { p_in } => return *p_in,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

fn gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let p = pos / n;
    2.0 * p * (1.0 - p)
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    cfg: &'a ForestConfig,
    n_try: usize,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: &mut [usize], depth: usize, rng: &mut RngStream) -> usize {
        let n = rows.len() as f64;
        let pos = rows.iter().filter(|&&r| self.y[r]).count() as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { p_in: pos / n });
        if depth >= self.cfg.max_depth || rows.len() < 2 * self.cfg.min_leaf || pos == 0.0 || pos == n {
            return id;
        }
        let width = self.x[0].len();
        let mut features: Vec<usize> = (0..width).collect();
        features.shuffle(rng);
        features.truncate(self.n_try);
        features.sort_unstable();

        let parent = gini(pos, n);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, bool)> = Vec::with_capacity(rows.len());
        for &f in &features {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| (self.x[r][f], self.y[r])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0.0;
            for i in 0..sorted.len() - 1 {
                left_pos += f64::from(u8::from(sorted[i].1));
                let nl = (i + 1) as f64;
                if sorted[i].0 == sorted[i + 1].0 || (i + 1) < self.cfg.min_leaf || sorted.len() - i - 1 < self.cfg.min_leaf {
                    continue;
                }
                let nr = n - nl;
                let impurity = (nl * gini(left_pos, nl) + nr * gini(pos - left_pos, nr)) / n;
                let gain = parent - impurity;
                if gain > 1e-12 && best.is_none_or(|b| gain > b.0) {
                    let (lo, hi) = (sorted[i].0, sorted[i + 1].0);
                    let mid = lo + 0.5 * (hi - lo);
                    best = Some((gain, f, if mid < hi { mid } else { lo }));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return id };
        let split = partition(rows, |r| self.x[r][feature] <= threshold);
        let (l, r) = rows.split_at_mut(split);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }
}

fn partition(rows: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut k = 0;
    for i in 0..rows.len() {
        if pred(rows[i]) {
            rows.swap(i, k);
            k += 1;
        }
    }
    k
}

/// Bagged Gini trees with `sqrt(F)` features tried per split. With
/// `balanced` set, each tree's bootstrap draws equally from both classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<Tree>,
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &ForestConfig) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} rows vs {} labels", x.len(), y.len())));
        }
        let ins: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
        let outs: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
        if ins.is_empty() || outs.is_empty() {
            return Err(Error::InvalidArgument("attack training needs both member and non-member examples".into()));
        }
        let width = x[0].len();
        if width == 0 || x.iter().any(|r| r.len() != width) {
            return Err(Error::DimensionMismatch("feature rows must share a positive width".into()));
        }
        if cfg.trees == 0 {
            return Err(Error::InvalidArgument("forest needs at least one tree".into()));
        }
        let n_try = ((width as f64).sqrt().ceil() as usize).clamp(1, width);
        let half = y.len() / 2;
        let trees = (0..cfg.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = RngStream::derived(cfg.seed, "forest-tree", &[t as u64]);
                let mut rows: Vec<usize> = (0..y.len())
                    .map(|i| {
                        if !cfg.balanced {
                            return rng.random_range(0..y.len());
                        }
                        let pool = if i < half { &ins } else { &outs };
                        pool[rng.random_range(0..pool.len())]
                    })
                    .collect();
                let mut g = Grower {
                    x,
                    y,
                    cfg,
                    n_try,
                    nodes: Vec::new(),
                };
                g.grow(&mut rows, 0, &mut rng);
                Tree { nodes: g.nodes }
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn prob_in(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.prob_in(x) > 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub featurizer: Featurizer,
    pub forest: RandomForest,
    pub train_accuracy: f64,
}

impl AttackModel {
    pub fn predict(&self, ex: &AttackExample) -> Result<bool> {
        Ok(self.forest.predict(&self.featurizer.features(ex)?))
    }

    pub fn accuracy(&self, examples: &[AttackExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("attack examples"));
        }
        let mut correct = 0;
        for ex in examples {
            correct += usize::from(self.predict(ex)? == ex.label);
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

pub fn train_attack(examples: &[AttackExample], featurizer: Featurizer, cfg: &ForestConfig) -> Result<AttackModel> {
    let x = examples.iter().map(|e| featurizer.features(e)).collect::<Result<Vec<_>>>()?;
    let y: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let forest = RandomForest::fit(&x, &y, cfg)?;
    let mut model = AttackModel {
        featurizer,
        forest,
        train_accuracy: 0.0,
    };
    model.train_accuracy = model.accuracy(examples)?;
    Ok(model)
}

/// Attack accuracy on `probe_users` against the target's top-10 lists.
pub fn measure_attack(
    attack: &AttackModel,
    target: &ParamSet,
    corpus: &Corpus,
    probe_users: &[u32],
    truth: &[bool],
) -> Result<f64> {
    if probe_users.is_empty() {
        return Err(Error::Empty("probe users"));
    }
    if probe_users.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} probes vs {} labels", probe_users.len(), truth.len())));
    }
    let examples = attack_examples(target, corpus, probe_users, |u| {
        truth[probe_users.iter().position(|&p| p == u).expect("probe user")]
    })?;
    attack.accuracy(&examples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub target_model: String,
    pub epsilon: Option<f64>,
    pub mechanism: String,
    pub attack_accuracy: f64,
    pub seed: u64,
}

pub fn attack_csv(records: &[AttackRecord]) -> String {
    let mut out = String::from("target_model,epsilon,mechanism,attack_accuracy,seed\n");
    for r in records {
        let eps = r.epsilon.map_or_else(|| "inf".to_string(), |e| format!("{e}"));
        writeln!(out, "{},{eps},{},{:.6},{}", r.target_model, r.mechanism, r.attack_accuracy, r.seed).unwrap();
    }
    out
}

pub fn write_attack_csv(path: &Path, records: &[AttackRecord]) -> Result<()> {
    fs::write(path, attack_csv(records)).map_err(|e| Error::io(path, e))
}

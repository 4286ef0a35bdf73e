//! Leave-later-half-out ranking evaluation with sampled negatives, Hits@k and
//! nDCG@k, macro-averaged over test users.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_negatives, Corpus, SplitPlan, TestUser};
use crate::error::{Error, Result};
use crate::federation::{personalize, FederationConfig};
use crate::linalg::RngStream;
use crate::model::{score, ItemCatalog, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_values: Vec<usize>,
    /// Sampled negatives per positive test interaction.
    pub negatives: usize,
    /// Fine-tune on each test user's training half before scoring.
    pub personalize: bool,
    /// Keep only users with fewer than this many interactions in total.
    pub max_interactions: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_values: vec![5, 10, 20, 30],
            negatives: 99,
            personalize: true,
            max_interactions: None,
            seed: 0,
        }
    }
}

/// Sorts by score descending, ties by ascending item id.
pub fn rank_by_scores(items: &[u32], scores: &[f64]) -> Result<Vec<u32>> {
    if items.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if items.len() != scores.len() {
        return Err(Error::DimensionMismatch(format!("{} items vs {} scores", items.len(), scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("candidate score"));
    }
    let mut order: Vec<(u32, f64)> = items.iter().copied().zip(scores.iter().copied()).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(order.into_iter().map(|(i, _)| i).collect())
}

/// Ranks `positive` and `negatives` under the model's score for this user.
pub fn rank_candidates(
    theta: &ParamSet,
    catalog: &ItemCatalog,
    user_features: &[crate::model::FieldValues],
    positive: u32,
    negatives: &[u32],
) -> Result<Vec<u32>> {
    if negatives.contains(&positive) {
        return Err(Error::InvalidArgument(format!("positive item {positive} also listed as a negative")));
    }
    let mut items = Vec::with_capacity(negatives.len() + 1);
    items.push(positive);
    items.extend_from_slice(negatives);
    let scores = items
        .iter()
        .map(|&i| score(theta, &catalog.example(user_features, i, 0)?))
        .collect::<Result<Vec<_>>>()?;
    rank_by_scores(&items, &scores)
}

/// Fraction of cases whose positive landed at 1-based `rank <= k`.
pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::Empty("test cases"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Binary-relevance DCG of one case: `1/log2(rank+1)` on a hit, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if rank == 0 {
        return Err(Error::InvalidArgument("ranks are 1-based".into()));
    }
    Ok(if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub client_id: u32,
    pub interactions: usize,
    /// 1-based rank of the positive in each test case.
    pub ranks: Vec<usize>,
    pub hits: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub k_values: Vec<usize>,
    pub hits: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub per_user: Vec<UserMetrics>,
}

impl MetricsReport {
    /// Macro-average of per-user metrics. Users are `(client, interactions, ranks)`.
    pub fn from_ranks(model: &str, k_values: &[usize], users: Vec<(u32, usize, Vec<usize>)>) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::Empty("evaluated users"));
        }
        let per_user = users
            .into_iter()
            .map(|(client_id, interactions, ranks)| {
                let hits = k_values.iter().map(|&k| hits_at_k(&ranks, k)).collect::<Result<Vec<_>>>()?;
                let ndcg = k_values
                    .iter()
                    .map(|&k| {
                        let sum = ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<Result<f64>>()?;
                        Ok(sum / ranks.len() as f64)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(UserMetrics {
                    client_id,
                    interactions,
                    ranks,
                    hits,
                    ndcg,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_user.len() as f64;
        let mean = |f: fn(&UserMetrics) -> &Vec<f64>, j: usize| per_user.iter().map(|u| f(u)[j]).sum::<f64>() / n;
        Ok(Self {
            model: model.to_string(),
            k_values: k_values.to_vec(),
            hits: (0..k_values.len()).map(|j| mean(|u| &u.hits, j)).collect(),
            ndcg: (0..k_values.len()).map(|j| mean(|u| &u.ndcg, j)).collect(),
            per_user,
        })
    }

    pub fn hits_at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&x| x == k).map(|j| self.hits[j])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.k_values.iter().position(|&x| x == k).map(|j| self.ndcg[j])
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (j, k) in self.k_values.iter().enumerate() {
            writeln!(out, "{},{k},{:.6},{:.6}", self.model, self.hits[j], self.ndcg[j]).unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("model,k,hits,ndcg\n{}", self.csv_rows())
    }

    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("model,client_id,interactions,k,hits,ndcg\n");
        for u in &self.per_user {
            for (j, k) in self.k_values.iter().enumerate() {
                writeln!(out, "{},{},{},{k},{:.6},{:.6}", self.model, u.client_id, u.interactions, u.hits[j], u.ndcg[j])
                    .unwrap();
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{} ({} users)\n", self.model, self.per_user.len());
        for (j, k) in self.k_values.iter().enumerate() {
            writeln!(out, "  Hits@{k:<3} {:.4}   nDCG@{k:<3} {:.4}", self.hits[j], self.ndcg[j]).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Test users kept by `cfg.max_interactions`, with their total history length.
fn selected_users<'a>(corpus: &Corpus, plan: &'a SplitPlan, cfg: &EvalConfig) -> Vec<(&'a TestUser, usize)> {
    plan.test_users
        .iter()
        .map(|u| (u, corpus.clients[u.client_id as usize].interactions.len()))
        .filter(|(_, n)| cfg.max_interactions.is_none_or(|max| *n < max))
        .collect()
}

/// Ranks of each positive test interaction of `user` under `scorer`, which
/// maps candidate items to scores. Negatives come from a stream keyed by
/// `(user, case)`.
pub fn user_ranks<S>(corpus: &Corpus, user: &TestUser, cfg: &EvalConfig, scorer: S) -> Result<Vec<usize>>
where
    S: Fn(&[u32]) -> Result<Vec<f64>>,
{
    let client = &corpus.clients[user.client_id as usize];
    let seen: HashSet<u32> = client.seen_items();
    let mut ranks = Vec::new();
    for (case, it) in user.test.iter().filter(|i| i.label == 1).enumerate() {
        let mut rng = RngStream::derived(cfg.seed, "eval-negatives", &[u64::from(user.client_id), case as u64]);
        let mut items = vec![it.item];
        items.extend(sample_negatives(&mut rng, corpus.n_items(), &seen, cfg.negatives));
        let ranked = rank_by_scores(&items, &scorer(&items)?)?;
        ranks.push(ranked.iter().position(|&i| i == it.item).expect("positive is a candidate") + 1);
    }
    Ok(ranks)
}

/// Generic evaluation: `make_scorer` builds a per-user scoring function.
pub fn evaluate_with<F, S>(corpus: &Corpus, plan: &SplitPlan, cfg: &EvalConfig, model: &str, make_scorer: F) -> Result<MetricsReport>
where
    F: Fn(&TestUser) -> Result<S> + Sync,
    S: Fn(&[u32]) -> Result<Vec<f64>>,
{
    let users = selected_users(corpus, plan, cfg);
    let results: Vec<Option<(u32, usize, Vec<usize>)>> = users
        .par_iter()
        .map(|(u, n)| {
            if !u.test.iter().any(|i| i.label == 1) {
                return Ok(None);
            }
            let scorer = make_scorer(u)?;
            Ok(Some((u.client_id, *n, user_ranks(corpus, u, cfg, scorer)?)))
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} test users have no positive test interactions and were skipped");
    }
    MetricsReport::from_ranks(model, &cfg.k_values, results.into_iter().flatten().collect())
}

/// Personalizes `theta` on each test user's training half (when enabled) and
/// ranks their positive test interactions against sampled negatives.
pub fn evaluate(
    theta: &ParamSet,
    corpus: &Corpus,
    plan: &SplitPlan,
    cfg: &EvalConfig,
    fed: &FederationConfig,
    model: &str,
) -> Result<MetricsReport> {
    let catalog = &corpus.catalog;
    evaluate_with(corpus, plan, cfg, model, |u| {
        let feats = &corpus.clients[u.client_id as usize].user_features;
        let local = if cfg.personalize && !u.train.is_empty() {
            let mut rng = RngStream::derived(cfg.seed, "personalize", &[u64::from(u.client_id)]);
            personalize(theta, feats, &u.train, catalog, fed, &mut rng)?
        } else {
            theta.clone()
        };
        Ok(move |items: &[u32]| {
            items
                .iter()
                .map(|&i| score(&local, &catalog.example(feats, i, 0)?))
                .collect::<Result<Vec<_>>>()
        })
    })
}

/// Concatenates metric CSVs that share the `model,k,hits,ndcg` header.
pub fn merge_reports(reports: &[MetricsReport]) -> String {
    let mut out = String::from("model,k,hits,ndcg\n");
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    out
}

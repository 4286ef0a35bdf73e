#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use fedrec::config::ExperimentConfig;
use fedrec::data::synthetic::{self, SyntheticConfig};
use fedrec::data::{ingest, Corpus, DatasetKind};
use fedrec::linalg::RngStream;
use fedrec::model::{ParamLayout, ParamSet};
use tempfile::TempDir;

/// Writes a synthetic MovieLens-format corpus and ingests it.
pub fn synthetic_corpus(users: usize, items: usize, seed: u64) -> (TempDir, Corpus) {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), users, items, seed);
    let corpus = ingest(dir.path(), DatasetKind::Movielens).unwrap();
    (dir, corpus)
}

pub fn write_synthetic(dir: &Path, users: usize, items: usize, seed: u64) {
    let cfg = SyntheticConfig {
        users,
        items,
        seed,
        ..Default::default()
    };
    synthetic::write(dir, &cfg).unwrap();
}

pub fn init_theta(corpus: &Corpus, embed_dim: usize, hidden: &[usize], seed: u64) -> ParamSet {
    let layout = ParamLayout::new(corpus.model_dims(embed_dim, hidden)).unwrap();
    ParamSet::init(Arc::new(layout), &mut RngStream::new(seed, "init"))
}

/// Smaller network and larger cohorts used wherever private training runs.
pub fn desk_dp_config(data: &Path, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        data_path: data.to_path_buf(),
        seed,
        embed_dim: 4,
        hidden: vec![8],
        rounds: 20,
        clients_per_round: 40,
        pretrain_rounds: 40,
        ..ExperimentConfig::default()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

//! Synthetic MovieLens-format corpus generator.
//!
//! Writes `users.dat`, `movies.dat` and `ratings.dat` in the distribution's
//! `::` layout so the regular ingest path reads them. The generative process:
//!
//! * items carry 1 to 3 genres drawn from a skewed genre popularity, a quality
//!   term and a popularity bias;
//! * a user's genre taste is a demographic part (shared by users with the same
//!   gender, age code and occupation) plus a personal part;
//! * activity is long-tailed (shifted log-normal counts);
//! * histories come in bursts: each burst picks a mood genre from the taste,
//!   then items favouring that genre, minutes apart; bursts are hours to days
//!   apart;
//! * ratings grow with taste affinity and item quality.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::movielens::{MOVIELENS_AGES, MOVIELENS_GENRES};
use crate::error::{Error, Result};
use crate::linalg::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub seed: u64,
    /// Floor on per-user interaction counts.
    pub min_interactions: usize,
    /// Median of the log-normal part of the interaction count.
    pub activity_median: f64,
    pub activity_sigma: f64,
    /// Scale of the per-user taste component not explained by demographics.
    pub personal_taste: f64,
    pub demographic_taste: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 400,
            seed: 7,
            min_interactions: 6,
            activity_median: 16.0,
            activity_sigma: 0.9,
            personal_taste: 1.2,
            demographic_taste: 0.7,
        }
    }
}

const N_GENRES: usize = MOVIELENS_GENRES.len();
const N_OCCUPATIONS: usize = 21;
const AGE_WEIGHTS: [f64; 7] = [0.04, 0.18, 0.35, 0.2, 0.09, 0.08, 0.06];
const EPOCH_START: i64 = 956_703_932;

struct Item {
    genres: Vec<usize>,
    quality: f64,
    bias: f64,
}

fn weighted(rng: &mut RngStream, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        x -= w;
        if x <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// The three file bodies, in `users.dat`, `movies.dat`, `ratings.dat` order.
pub fn generate(cfg: &SyntheticConfig) -> Result<[String; 3]> {
    if cfg.users == 0 || cfg.items < 20 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs at least 1 user and 20 items (got {} / {})",
            cfg.users, cfg.items
        )));
    }
    let mut rng = RngStream::new(cfg.seed, "synthetic");
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let genre_pop: Vec<f64> = (0..N_GENRES).map(|g| 1.0 / (1.0 + g as f64).powf(0.7)).collect();
    let items: Vec<Item> = (0..cfg.items)
        .map(|_| {
            let k = weighted(&mut rng, &[0.5, 0.35, 0.15]) + 1;
            let mut genres = Vec::with_capacity(k);
            while genres.len() < k {
                let g = weighted(&mut rng, &genre_pop);
                if !genres.contains(&g) {
                    genres.push(g);
                }
            }
            genres.sort_unstable();
            Item {
                genres,
                quality: std.sample(&mut rng),
                bias: 1.2 * std.sample(&mut rng),
            }
        })
        .collect();

    let mut table = |rows: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..N_GENRES).map(|_| cfg.demographic_taste * std.sample(&mut rng)).collect())
            .collect()
    };
    let by_gender = table(2);
    let by_age = table(MOVIELENS_AGES.len());
    let by_occ = table(N_OCCUPATIONS);

    let activity = LogNormal::new(cfg.activity_median.ln(), cfg.activity_sigma)
        .map_err(|e| Error::InvalidArgument(format!("activity distribution: {e}")))?;
    let cap = (cfg.items / 2).max(cfg.min_interactions);

    let mut users_out = String::new();
    let mut ratings_out = String::new();
    for u in 0..cfg.users {
        let gender = (rng.random::<f64>() < 0.28) as usize;
        let age = weighted(&mut rng, &AGE_WEIGHTS);
        let occ = rng.random_range(0..N_OCCUPATIONS);
        writeln!(
            users_out,
            "{}::{}::{}::{}::{:05}",
            u + 1,
            if gender == 0 { "M" } else { "F" },
            MOVIELENS_AGES[age],
            occ,
            rng.random_range(0..100_000)
        )
        .expect("write to string");

        let taste: Vec<f64> = (0..N_GENRES)
            .map(|g| by_gender[gender][g] + by_age[age][g] + by_occ[occ][g] + cfg.personal_taste * std.sample(&mut rng))
            .collect();
        let affinity: Vec<f64> = items
            .iter()
            .map(|it| it.genres.iter().map(|&g| taste[g]).sum::<f64>() / it.genres.len() as f64)
            .collect();
        let mood_weights: Vec<f64> = taste.iter().zip(&genre_pop).map(|(t, p)| p * t.exp()).collect();

        let n = (cfg.min_interactions + activity.sample(&mut rng).floor() as usize).min(cap);
        let mut seen = vec![false; cfg.items];
        let mut ts = EPOCH_START + rng.random_range(0..90 * 86_400);
        let mut count = 0;
        while count < n {
            let mood = weighted(&mut rng, &mood_weights);
            let burst = rng.random_range(2..=8).min(n - count);
            for _ in 0..burst {
                let weights: Vec<f64> = items
                    .iter()
                    .enumerate()
                    .map(|(i, it)| {
                        if seen[i] {
                            0.0
                        } else {
                            let mood_bonus = if it.genres.contains(&mood) { 2.0 } else { 0.0 };
                            (it.bias + 1.5 * affinity[i] + mood_bonus).exp()
                        }
                    })
                    .collect();
                let i = weighted(&mut rng, &weights);
                seen[i] = true;
                let s = 3.2 + 1.1 * affinity[i] + 0.6 * items[i].quality + 0.8 * std.sample(&mut rng);
                let rating = s.round().clamp(1.0, 5.0) as u8;
                writeln!(ratings_out, "{}::{}::{}::{}", u + 1, i + 1, rating, ts).expect("write to string");
                ts += rng.random_range(60..900);
                count += 1;
            }
            ts += rng.random_range(2 * 3600..10 * 86_400);
        }
    }

    let mut movies_out = String::new();
    for (i, it) in items.iter().enumerate() {
        let genres: Vec<&str> = it.genres.iter().map(|&g| MOVIELENS_GENRES[g]).collect();
        writeln!(movies_out, "{}::Synthetic Title {} (1999)::{}", i + 1, i + 1, genres.join("|"))
            .expect("write to string");
    }
    Ok([users_out, movies_out, ratings_out])
}

/// Generates a corpus and writes the three `.dat` files into `dir`.
pub fn write(dir: &Path, cfg: &SyntheticConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bodies = generate(cfg)?;
    for (name, body) in super::movielens::FILES.iter().zip(bodies) {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{activity_stats, ingest, DatasetKind};

    #[test]
    fn round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            users: 60,
            items: 120,
            ..Default::default()
        };
        write(dir.path(), &cfg).unwrap();
        let corpus = ingest(dir.path(), DatasetKind::Movielens).unwrap();
        assert_eq!(corpus.clients.len(), 60);
        let (median, mean) = activity_stats(&corpus);
        assert!(median < mean, "median {median} mean {mean}");
        let pos: usize = corpus.clients.iter().map(|c| c.positive_items().len()).sum();
        let frac = pos as f64 / corpus.n_interactions() as f64;
        assert!((0.3..0.8).contains(&frac), "positive fraction {frac}");
        assert!(corpus.clients.iter().any(|c| c.sessions.iter().any(|s| s.len() >= 4)));
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SyntheticConfig {
            users: 10,
            items: 40,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SyntheticConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }
}

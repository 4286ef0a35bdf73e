//! MovieLens-1M `::`-separated files.
//!
//! * `users.dat`: `UserID::Gender::Age::Occupation::Zip-code`
//! * `movies.dat`: `MovieID::Title::Genre|Genre|...` (latin-1 titles)
//! * `ratings.dat`: `UserID::MovieID::Rating::Timestamp`
//!
//! Users and items are numbered by ascending original id. Only movies that
//! appear in `ratings.dat` enter the item vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::{build_sessions, ClientDataset, Corpus, DatasetKind, Interaction};
use crate::error::{Error, Result};
use crate::model::{FieldValues, ItemCatalog};

pub(super) const FILES: [&str; 3] = ["users.dat", "movies.dat", "ratings.dat"];

pub const MOVIELENS_GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

pub const MOVIELENS_AGES: [u32; 7] = [1, 18, 25, 35, 45, 50, 56];

const N_OCCUPATIONS: usize = 21;

struct Rows {
    path: std::path::PathBuf,
    text: String,
}

impl Rows {
    fn read(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        // latin-1 maps byte-for-byte onto the first 256 code points
        let text = bytes.iter().map(|&b| b as char).collect();
        Ok(Self { path, text })
    }

    fn iter(&self, arity: usize) -> impl Iterator<Item = Result<(usize, Vec<&str>)>> + '_ {
        self.text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(move |(i, l)| {
                let fields: Vec<&str> = l.trim_end_matches('\r').split("::").collect();
                if fields.len() != arity {
                    return Err(self.bad(i + 1, format!("expected {arity} '::' fields, found {}", fields.len())));
                }
                Ok((i + 1, fields))
            })
    }

    fn bad(&self, line: usize, reason: impl Into<String>) -> Error {
        Error::MalformedRow {
            path: self.path.clone(),
            line,
            reason: reason.into(),
        }
    }

    fn num<T: std::str::FromStr>(&self, line: usize, field: &str, what: &str) -> Result<T> {
        field
            .trim()
            .parse()
            .map_err(|_| self.bad(line, format!("{what} '{field}' is not a number")))
    }
}

pub(super) fn ingest(dir: &Path) -> Result<Corpus> {
    let users = Rows::read(dir, FILES[0])?;
    let movies = Rows::read(dir, FILES[1])?;
    let ratings = Rows::read(dir, FILES[2])?;

    let mut user_feats: BTreeMap<u32, Vec<FieldValues>> = BTreeMap::new();
    for row in users.iter(5) {
        let (line, f) = row?;
        let id: u32 = users.num(line, f[0], "UserID")?;
        let gender = match f[1] {
            "M" => 0,
            "F" => 1,
            g => return Err(users.bad(line, format!("unknown gender '{g}'"))),
        };
        let age: u32 = users.num(line, f[2], "Age")?;
        let age = MOVIELENS_AGES
            .iter()
            .position(|&a| a == age)
            .ok_or_else(|| users.bad(line, format!("unknown age code {age}")))? as u32;
        let occ: u32 = users.num(line, f[3], "Occupation")?;
        if occ as usize >= N_OCCUPATIONS {
            return Err(users.bad(line, format!("occupation {occ} outside 0..{N_OCCUPATIONS}")));
        }
        if user_feats.insert(id, vec![vec![gender], vec![age], vec![occ]]).is_some() {
            return Err(users.bad(line, format!("duplicate UserID {id}")));
        }
    }

    let mut genres: HashMap<u32, FieldValues> = HashMap::new();
    for row in movies.iter(3) {
        let (line, f) = row?;
        let id: u32 = movies.num(line, f[0], "MovieID")?;
        let mut bag = Vec::new();
        for g in f[2].split('|').filter(|g| !g.is_empty()) {
            let idx = MOVIELENS_GENRES
                .iter()
                .position(|&known| known == g)
                .ok_or_else(|| movies.bad(line, format!("unknown genre '{g}'")))?;
            bag.push(idx as u32);
        }
        genres.insert(id, bag);
    }

    let mut by_user: BTreeMap<u32, Vec<(i64, u32, u8)>> = BTreeMap::new();
    for row in ratings.iter(4) {
        let (line, f) = row?;
        let user: u32 = ratings.num(line, f[0], "UserID")?;
        let movie: u32 = ratings.num(line, f[1], "MovieID")?;
        let rating: u8 = ratings.num(line, f[2], "Rating")?;
        let ts: i64 = ratings.num(line, f[3], "Timestamp")?;
        if !(1..=5).contains(&rating) {
            return Err(ratings.bad(line, format!("rating {rating} outside 1..5")));
        }
        if !user_feats.contains_key(&user) {
            return Err(ratings.bad(line, format!("UserID {user} missing from users.dat")));
        }
        if !genres.contains_key(&movie) {
            return Err(ratings.bad(line, format!("MovieID {movie} missing from movies.dat")));
        }
        by_user.entry(user).or_default().push((ts, movie, (rating > 3) as u8));
    }

    let mut rated: Vec<u32> = by_user.values().flatten().map(|r| r.1).collect();
    rated.sort_unstable();
    rated.dedup();
    let item_index: HashMap<u32, u32> = rated.iter().enumerate().map(|(i, &m)| (m, i as u32)).collect();
    let catalog = ItemCatalog {
        field_vocab: vec![MOVIELENS_GENRES.len()],
        features: rated.iter().map(|m| vec![genres[m].clone()]).collect(),
    };

    let policy = DatasetKind::Movielens.default_sessions();
    let mut clients = Vec::with_capacity(by_user.len());
    let mut raw_user_ids = Vec::with_capacity(by_user.len());
    for (user, mut rows) in by_user {
        rows.sort_by_key(|&(ts, movie, _)| (ts, movie));
        let interactions: Vec<Interaction> = rows
            .into_iter()
            .map(|(ts, movie, label)| Interaction {
                item: item_index[&movie],
                label,
                timestamp: ts,
            })
            .collect();
        let sessions = build_sessions(&interactions, policy.gap_seconds, policy.max_len);
        clients.push(ClientDataset {
            client_id: clients.len() as u32,
            user_features: user_feats[&user].clone(),
            interactions,
            sessions,
        });
        raw_user_ids.push(user.to_string());
    }

    Ok(Corpus {
        kind: DatasetKind::Movielens,
        clients,
        catalog,
        user_field_names: vec!["gender".into(), "age".into(), "occupation".into()],
        user_field_vocab: vec![2, MOVIELENS_AGES.len(), N_OCCUPATIONS],
        item_field_names: vec!["genre".into()],
        raw_user_ids,
        raw_item_ids: rated.iter().map(u32::to_string).collect(),
    })
}

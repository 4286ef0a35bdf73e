//! Frappe context-aware app usage logs: a tab-separated file with a header
//! naming at least [`FRAPPE_COLUMNS`]. The label comes from a `rating`
//! column when the log has one, otherwise from the `rating` column of a
//! tab-separated `meta.csv` next to it, joined on `item`. Non-numeric ratings
//! count as negative.
//!
//! Rows have no timestamps; file order is the time order. Each user's context
//! fields are summarized by their most frequent value (ties to the smallest
//! vocabulary index).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use super::{build_sessions, ClientDataset, Corpus, DatasetKind, Interaction};
use crate::error::{Error, Result};
use crate::model::ItemCatalog;

pub const FRAPPE_COLUMNS: [&str; 11] = [
    "user", "item", "cnt", "daytime", "weekday", "isweekend", "homework", "cost", "weather", "country", "city",
];

const USER_FIELDS: [&str; 7] = ["daytime", "weekday", "isweekend", "homework", "weather", "country", "city"];
const COUNT_BUCKETS: usize = 16;

fn log_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("frappe.csv")
    } else {
        path.to_path_buf()
    }
}

fn meta_path(path: &Path) -> PathBuf {
    log_path(path).with_file_name("meta.csv")
}

pub(super) fn source_files(path: &Path) -> Vec<PathBuf> {
    let mut out = vec![log_path(path)];
    let meta = meta_path(path);
    if meta.exists() {
        out.push(meta);
    }
    out
}

struct Table {
    path: PathBuf,
    header: HashMap<String, usize>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8_lossy(&bytes);
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or(Error::Empty("frappe header"))?;
        let header: HashMap<String, usize> = head
            .trim_end_matches('\r')
            .split('\t')
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        let width = header.len();
        let mut rows = Vec::new();
        for (i, l) in lines {
            let fields: Vec<String> = l.trim_end_matches('\r').split('\t').map(|s| s.trim().to_string()).collect();
            if fields.len() != width {
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("expected {width} tab-separated fields, found {}", fields.len()),
                });
            }
            rows.push((i + 1, fields));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header.get(name).copied().ok_or_else(|| Error::MalformedRow {
            path: self.path.clone(),
            line: 1,
            reason: format!("missing column '{name}'"),
        })
    }
}

fn rating_label(raw: &str) -> u8 {
    raw.parse::<f64>().map(|r| (r > 3.0) as u8).unwrap_or(0)
}

fn vocab(values: impl Iterator<Item = String>) -> HashMap<String, u32> {
    let set: BTreeSet<String> = values.collect();
    set.into_iter().enumerate().map(|(i, v)| (v, i as u32)).collect()
}

pub(super) fn ingest(path: &Path) -> Result<Corpus> {
    let log = Table::read(&log_path(path))?;
    let cols: HashMap<&str, usize> = FRAPPE_COLUMNS
        .iter()
        .map(|&c| log.col(c).map(|i| (c, i)))
        .collect::<Result<_>>()?;

    let labels_from_meta: Option<HashMap<String, u8>> = if log.header.contains_key("rating") {
        None
    } else {
        let meta = Table::read(&meta_path(path))?;
        let (item, rating) = (meta.col("item")?, meta.col("rating")?);
        Some(
            meta.rows
                .iter()
                .map(|(_, r)| (r[item].clone(), rating_label(&r[rating])))
                .collect(),
        )
    };
    let rating_col = log.header.get("rating").copied();

    let field_vocab: Vec<HashMap<String, u32>> = USER_FIELDS
        .iter()
        .map(|f| vocab(log.rows.iter().map(|(_, r)| r[cols[f]].clone())))
        .collect();
    let cost_vocab = vocab(log.rows.iter().map(|(_, r)| r[cols["cost"]].clone()));

    struct ItemAgg {
        count: u64,
        cost: u32,
    }
    let mut items: BTreeMap<String, ItemAgg> = BTreeMap::new();
    // user -> (rows in file order, per-field value histograms)
    let mut users: BTreeMap<String, (Vec<(usize, String, u8)>, Vec<BTreeMap<u32, usize>>)> = BTreeMap::new();

    for (order, (line, r)) in log.rows.iter().enumerate() {
        let cnt: u64 = r[cols["cnt"]].parse().map_err(|_| Error::MalformedRow {
            path: log.path.clone(),
            line: *line,
            reason: format!("cnt '{}' is not a count", r[cols["cnt"]]),
        })?;
        let item = r[cols["item"]].clone();
        let label = match (&labels_from_meta, rating_col) {
            (_, Some(c)) => rating_label(&r[c]),
            (Some(meta), None) => *meta.get(&item).ok_or_else(|| Error::MalformedRow {
                path: log.path.clone(),
                line: *line,
                reason: format!("item '{item}' has no entry in meta.csv"),
            })?,
            (None, None) => unreachable!("labels come from one of the two sources"),
        };
        let agg = items.entry(item.clone()).or_insert(ItemAgg {
            count: 0,
            cost: cost_vocab[&r[cols["cost"]]],
        });
        agg.count += cnt;

        let entry = users
            .entry(r[cols["user"]].clone())
            .or_insert_with(|| (Vec::new(), vec![BTreeMap::new(); USER_FIELDS.len()]));
        entry.0.push((order, item, label));
        for (k, f) in USER_FIELDS.iter().enumerate() {
            *entry.1[k].entry(field_vocab[k][&r[cols[f]]]).or_default() += 1;
        }
    }

    let item_ids: Vec<String> = items.keys().cloned().collect();
    let item_index: HashMap<&str, u32> = item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
    let catalog = ItemCatalog {
        field_vocab: vec![COUNT_BUCKETS, cost_vocab.len()],
        features: items
            .values()
            .map(|a| {
                let bucket = ((a.count + 1) as f64).log2().floor() as usize;
                vec![vec![bucket.min(COUNT_BUCKETS - 1) as u32], vec![a.cost]]
            })
            .collect(),
    };

    let policy = DatasetKind::Frappe.default_sessions();
    let mut clients = Vec::with_capacity(users.len());
    let mut raw_user_ids = Vec::with_capacity(users.len());
    for (user, (rows, hist)) in users {
        let interactions: Vec<Interaction> = rows
            .iter()
            .map(|(order, item, label)| Interaction {
                item: item_index[item.as_str()],
                label: *label,
                timestamp: *order as i64,
            })
            .collect();
        let user_features = hist
            .iter()
            .map(|h| {
                let best = h.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(v, _)| *v);
                vec![best.unwrap_or(0)]
            })
            .collect();
        let sessions = build_sessions(&interactions, policy.gap_seconds, policy.max_len);
        clients.push(ClientDataset {
            client_id: clients.len() as u32,
            user_features,
            interactions,
            sessions,
        });
        raw_user_ids.push(user);
    }

    Ok(Corpus {
        kind: DatasetKind::Frappe,
        clients,
        catalog,
        user_field_names: USER_FIELDS.iter().map(|s| s.to_string()).collect(),
        user_field_vocab: field_vocab.iter().map(HashMap::len).collect(),
        item_field_names: vec!["count".into(), "cost".into()],
        raw_user_ids,
        raw_item_ids: item_ids,
    })
}

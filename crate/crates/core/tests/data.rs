mod common;

use std::fs;
use std::path::Path;

use fedrec::data::{
    build_sessions, ingest, load_or_ingest, make_views, split, DatasetKind, Interaction, ViewConfig,
};
use fedrec::linalg::RngStream;
use fedrec::model::Session;
use fedrec::Error;

fn write_movielens(dir: &Path, users: &str, movies: &str, ratings: &str) {
    fs::write(dir.join("users.dat"), users).unwrap();
    fs::write(dir.join("movies.dat"), movies).unwrap();
    fs::write(dir.join("ratings.dat"), ratings).unwrap();
}

const MOVIES: &str = "1::Toy Story (1995)::Animation|Children's|Comedy\n\
                      2::Jumanji (1995)::Adventure|Children's|Fantasy\n\
                      3::Heat (1995)::Action|Crime|Thriller\n\
                      4::Casino (1995)::Drama|Thriller\n\
                      5::Sabrina (1995)::Comedy|Romance\n";

#[test]
fn five_ratings_binarize_above_three() {
    let dir = tempfile::tempdir().unwrap();
    write_movielens(
        dir.path(),
        "1::F::1::10::48067\n",
        MOVIES,
        "1::1::1::100\n1::2::2::200\n1::3::3::300\n1::4::4::400\n1::5::5::500\n",
    );
    let corpus = ingest(dir.path(), DatasetKind::Movielens).unwrap();
    assert_eq!(corpus.clients.len(), 1);
    let labels: Vec<u8> = corpus.clients[0].interactions.iter().map(|i| i.label).collect();
    assert_eq!(labels, vec![0, 0, 0, 1, 1]);
    assert_eq!(corpus.clients[0].user_features, vec![vec![1], vec![0], vec![10]]);
    // sessions hold positives only and the two are 100 s apart
    assert_eq!(corpus.clients[0].sessions, vec![Session::new(vec![3, 4])]);
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    write_movielens(
        dir.path(),
        "1::F::1::10::48067\n2::M::25::3::55117\n",
        MOVIES,
        "1::1::5::100\n2::2::4::200\n2::3::nine::300\n",
    );
    match ingest(dir.path(), DatasetKind::Movielens) {
        Err(Error::MalformedRow { path, line, reason }) => {
            assert!(path.ends_with("ratings.dat"));
            assert_eq!(line, 3);
            assert!(reason.contains("nine"), "{reason}");
        }
        other => panic!("expected a malformed row, got {other:?}"),
    }

    write_movielens(dir.path(), "1::X::1::10::48067\n", MOVIES, "1::1::5::100\n");
    assert!(matches!(
        ingest(dir.path(), DatasetKind::Movielens),
        Err(Error::MalformedRow { line: 1, .. })
    ));
    write_movielens(dir.path(), "1::F::1::10::48067\n", MOVIES, "1::1::5\n");
    assert!(matches!(
        ingest(dir.path(), DatasetKind::Movielens),
        Err(Error::MalformedRow { line: 1, .. })
    ));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(ingest(dir.path(), DatasetKind::Movielens), Err(Error::Io { .. })));
}

#[test]
fn frappe_fixture_with_meta_labels() {
    let dir = tempfile::tempdir().unwrap();
    let log = "user\titem\tcnt\tdaytime\tweekday\tisweekend\thomework\tcost\tweather\tcountry\tcity\n\
               0\t7\t3\tmorning\tmonday\tworkday\tunknown\tfree\tsunny\tSpain\t12\n\
               0\t8\t1\tmorning\tmonday\tworkday\tunknown\tpaid\tsunny\tSpain\t12\n\
               0\t7\t40\tevening\tsunday\tweekend\thome\tfree\tcloudy\tSpain\t12\n\
               1\t9\t2\tnight\tfriday\tworkday\twork\tfree\tsunny\tUnited States\t0\n";
    let meta = "item\tcategory\trating\n7\tTools\t4.5\n8\tGames\t2.0\n9\tNews\tunknown\n";
    fs::write(dir.path().join("frappe.csv"), log).unwrap();
    fs::write(dir.path().join("meta.csv"), meta).unwrap();
    let corpus = ingest(dir.path(), DatasetKind::Frappe).unwrap();

    assert_eq!(corpus.clients.len(), 2);
    assert_eq!(corpus.n_items(), 3);
    let u0: Vec<(u32, u8)> = corpus.clients[0].interactions.iter().map(|i| (i.item, i.label)).collect();
    assert_eq!(u0, vec![(0, 1), (1, 0), (0, 1)]);
    assert_eq!(corpus.clients[1].interactions[0].label, 0);
    // item 7 has cnt 43 → bucket floor(log2 44) = 5
    assert_eq!(corpus.catalog.features[0][0], vec![5]);
    // user 0's modal daytime is "morning"; vocabulary is sorted: evening, morning, night
    assert_eq!(corpus.clients[0].user_features[0], vec![1]);
    assert_eq!(corpus.clients[0].sessions, vec![Session::new(vec![0, 0])]);
    corpus.validate().unwrap();
}

#[test]
fn frappe_without_labels_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let log = "user\titem\tcnt\tdaytime\tweekday\tisweekend\thomework\tcost\tweather\tcountry\tcity\n\
               0\t7\t3\tmorning\tmonday\tworkday\tunknown\tfree\tsunny\tSpain\t12\n";
    fs::write(dir.path().join("frappe.csv"), log).unwrap();
    fs::write(dir.path().join("meta.csv"), "item\trating\n8\t5\n").unwrap();
    assert!(matches!(
        ingest(dir.path(), DatasetKind::Frappe),
        Err(Error::MalformedRow { line: 2, .. })
    ));
}

#[test]
fn ten_users_split_eight_two_and_seven_interactions_split_four_three() {
    let (_dir, corpus) = common::synthetic_corpus(10, 60, 3);
    let plan = split(&corpus, &mut RngStream::new(5, "split")).unwrap();
    assert_eq!(plan.train_users.len(), 8);
    assert_eq!(plan.test_users.len(), 2);
    let again = split(&corpus, &mut RngStream::new(5, "split")).unwrap();
    assert_eq!(plan, again);
    for t in &plan.test_users {
        assert!(!plan.train_users.contains(&t.client_id));
        let n = corpus.clients[t.client_id as usize].interactions.len();
        assert_eq!(t.train.len(), n.div_ceil(2));
        assert_eq!(t.train.len() + t.test.len(), n);
    }

    let seven: Vec<Interaction> = (0..7)
        .map(|i| Interaction {
            item: i,
            label: 1,
            timestamp: i64::from(i),
        })
        .collect();
    let (train, test) = fedrec::data::split_history(&seven);
    assert_eq!(train.len(), 4);
    assert_eq!(test.len(), 3);
    assert!(train.iter().all(|a| test.iter().all(|b| a.timestamp < b.timestamp)));
}

#[test]
fn session_gap_fixture() {
    assert!(build_sessions(&[], Some(100), 10).is_empty());
    let at = |item, timestamp| Interaction {
        item,
        label: 1,
        timestamp,
    };
    let s = build_sessions(&[at(1, 0), at(2, 10), at(3, 10_000)], Some(100), 10);
    assert_eq!(s, vec![Session::new(vec![1, 2]), Session::new(vec![3])]);
    let s = build_sessions(&[at(1, 0), at(2, 5), at(3, 9)], Some(100), 10);
    assert_eq!(s, vec![Session::new(vec![1, 2, 3])]);
}

#[test]
fn views_are_reproducible_and_record_the_masked_item() {
    let sessions = vec![Session::new(vec![3, 8, 1, 6]), Session::new(vec![2])];
    let cfg = ViewConfig::default();
    let a = make_views(&sessions, 0, &mut RngStream::new(1, "views"), 20, &cfg);
    let b = make_views(&sessions, 0, &mut RngStream::new(1, "views"), 20, &cfg);
    assert_eq!(a, b);
    let item = a.0.unwrap();
    let pos = (0..4).find(|&i| item.masked.items[i] != sessions[0].items[i]).unwrap();
    assert_eq!(item.positive, sessions[0].items[pos]);
    assert_eq!(item.candidates[0], item.positive);
    assert!(a.1.is_some());
    assert_eq!(make_views(&sessions, 1, &mut RngStream::new(1, "views"), 20, &cfg), (None, None));
}

#[test]
fn synthetic_corpus_invariants_and_cache() {
    let (dir, corpus) = common::synthetic_corpus(200, 400, 0);
    corpus.validate().unwrap();
    let (median, mean) = fedrec::data::activity_stats(&corpus);
    assert!(median < mean, "long tail: median {median} mean {mean}");
    for c in &corpus.clients {
        let positives = c.positive_items();
        assert!(c.sessions.iter().flat_map(|s| &s.items).all(|i| positives.contains(i)));
        assert!(c.interactions.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }
    assert_eq!(ingest(dir.path(), DatasetKind::Movielens).unwrap(), corpus);

    let cache = tempfile::tempdir().unwrap();
    let first = load_or_ingest(dir.path(), DatasetKind::Movielens, Some(cache.path())).unwrap();
    assert_eq!(fs::read_dir(cache.path()).unwrap().count(), 1);
    let second = load_or_ingest(dir.path(), DatasetKind::Movielens, Some(cache.path())).unwrap();
    assert_eq!(first, corpus);
    assert_eq!(second, corpus);
}

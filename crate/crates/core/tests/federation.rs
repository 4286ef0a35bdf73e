mod common;

use fedrec::data::{split, ClientDataset, Corpus, TestUser};
use fedrec::federation::{
    client_update, local_data, local_examples, personalize, sample_clients, train, FederationConfig, LocalObjective,
};
use fedrec::linalg::RngStream;
use fedrec::model::{grad_dssm, loss_dssm, ParamSet};

#[test]
fn client_sampling_frequency_is_binomial() {
    let (n, m, rounds) = (20usize, 2usize, 100_000usize);
    let mut counts = vec![0usize; n];
    let mut rng = RngStream::new(17, "sample-clients");
    for _ in 0..rounds {
        let ids = sample_clients(&mut rng, n, m).unwrap();
        assert_eq!(ids.len(), m);
        assert_ne!(ids[0], ids[1]);
        for id in ids {
            counts[id as usize] += 1;
        }
    }
    let q = m as f64 / n as f64;
    let se = (q * (1.0 - q) / rounds as f64).sqrt();
    for (id, c) in counts.iter().enumerate() {
        let freq = *c as f64 / rounds as f64;
        assert!((freq - q).abs() <= 3.0 * se, "client {id}: frequency {freq}");
    }
}

#[test]
fn three_epoch_update_replays_bit_for_bit() {
    let (_dir, corpus) = common::synthetic_corpus(30, 80, 2);
    let theta = common::init_theta(&corpus, 3, &[4], 1);
    let client = &corpus.clients[4];
    let cfg = FederationConfig {
        local_epochs: 3,
        batch_size: 10_000,
        alpha1: 0.02,
        ..Default::default()
    };
    let (delta, _) = client_update(
        &theta,
        client,
        &corpus.catalog,
        &cfg,
        LocalObjective::Dssm,
        &mut RngStream::new(8, "c"),
    )
    .unwrap();

    use rand::seq::SliceRandom;
    let mut rng = RngStream::new(8, "c");
    let local = local_data(client, &corpus.catalog, &cfg, LocalObjective::Dssm, &mut rng).unwrap();
    let mut order: Vec<usize> = (0..local.examples.len()).collect();
    let mut manual = theta.clone();
    for _ in 0..3 {
        order.shuffle(&mut rng);
        let batch: Vec<_> = order.iter().map(|&i| local.examples[i].clone()).collect();
        let g = grad_dssm(&manual, &batch).unwrap();
        manual.axpy(-cfg.alpha1, g.flatten());
    }
    let expected: Vec<f64> = manual.flatten().iter().zip(theta.flatten()).map(|(a, b)| a - b).collect();
    assert_eq!(delta.values(), expected.as_slice());
}

#[test]
fn one_client_full_batch_training_is_sequential_sgd() {
    let (_dir, corpus) = common::synthetic_corpus(12, 60, 4);
    let theta0 = common::init_theta(&corpus, 3, &[4], 2);
    let cfg = FederationConfig {
        rounds: 6,
        local_epochs: 1,
        clients_per_round: 1,
        alpha1: 0.03,
        alpha2: 1.0,
        batch_size: 10_000,
        seed: 11,
        ..Default::default()
    };
    let out = train(theta0.clone(), &corpus.clients, &corpus.catalog, &cfg, LocalObjective::Dssm).unwrap();

    let mut theta = theta0;
    for round in 0..cfg.rounds as u64 {
        let mut sampler = RngStream::derived(cfg.seed, "sample-clients", &[round]);
        let id = sample_clients(&mut sampler, corpus.clients.len(), 1).unwrap()[0];
        let mut rng = RngStream::derived(cfg.seed, "client-update", &[round, u64::from(id)]);
        let local = local_data(&corpus.clients[id as usize], &corpus.catalog, &cfg, LocalObjective::Dssm, &mut rng).unwrap();
        let g = grad_dssm(&theta, &local.examples).unwrap();
        theta.axpy(-cfg.alpha1, g.flatten());
    }
    for (a, b) in out.theta.flatten().iter().zip(theta.flatten()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn training_is_independent_of_thread_count() {
    let (_dir, corpus) = common::synthetic_corpus(40, 80, 5);
    let cfg = FederationConfig {
        rounds: 4,
        local_epochs: 2,
        clients_per_round: 8,
        ..Default::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                train(common::init_theta(&corpus, 4, &[8], 3), &corpus.clients, &corpus.catalog, &cfg, LocalObjective::Joint)
                    .unwrap()
            })
    };
    let (a, b) = (run(1), run(6));
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.trace, b.trace);
}

/// Mean recommendation loss on the held-out half, with the same kind of
/// sampled unobserved negatives the objective trains on.
fn held_out_loss(theta: &ParamSet, user: &ClientDataset, t: &TestUser, corpus: &Corpus, cfg: &FederationConfig) -> f64 {
    let seed = u64::from(t.client_id);
    let adapted = personalize(theta, &user.user_features, &t.train, &corpus.catalog, cfg, &mut RngStream::new(seed, "adapt")).unwrap();
    let mut rng = RngStream::new(seed, "held-out");
    let mut test = local_examples(&user.user_features, &t.test, &corpus.catalog, cfg.negatives_per_positive, &mut rng).unwrap();
    // negatives must also avoid the items seen during adaptation
    let seen: std::collections::HashSet<u32> = t.train.iter().map(|i| i.item).collect();
    test.retain(|ex| ex.label == 1 || !seen.contains(&ex.item_id));
    loss_dssm(&adapted, &test).unwrap() / test.len() as f64
}

#[test]
fn meta_trained_initialization_adapts_better_than_random() {
    let (_dir, corpus) = common::synthetic_corpus(200, 400, 0);
    let plan = split(&corpus, &mut RngStream::new(0, "split")).unwrap();
    let train_clients: Vec<ClientDataset> = plan.train_users.iter().map(|&i| corpus.clients[i as usize].clone()).collect();
    let cfg = FederationConfig::default();
    let random = common::init_theta(&corpus, 8, &[32, 16], 0);
    let meta = train(random.clone(), &train_clients, &corpus.catalog, &cfg, LocalObjective::Dssm).unwrap().theta;

    let held_out: Vec<_> = plan.test_users.iter().filter(|t| !t.test.is_empty()).take(20).collect();
    assert_eq!(held_out.len(), 20);
    let (mut from_meta, mut from_random) = (0.0, 0.0);
    for t in &held_out {
        let user = &corpus.clients[t.client_id as usize];
        from_meta += held_out_loss(&meta, user, t, &corpus, &cfg);
        from_random += held_out_loss(&random, user, t, &corpus, &cfg);
    }
    assert!(from_meta < from_random, "meta {from_meta} vs random {from_random}");
}

#[test]
fn adaptation_lowers_the_users_own_training_loss() {
    let (_dir, corpus) = common::synthetic_corpus(30, 80, 6);
    let theta = common::init_theta(&corpus, 4, &[8], 4);
    let cfg = FederationConfig {
        alpha1: 0.05,
        ..Default::default()
    };
    let user = &corpus.clients[2];
    // personalize draws its negatives first, so this stream reproduces its training set
    let examples = local_examples(&user.user_features, &user.interactions, &corpus.catalog, cfg.negatives_per_positive, &mut RngStream::new(1, "p")).unwrap();
    let adapted = personalize(&theta, &user.user_features, &user.interactions, &corpus.catalog, &cfg, &mut RngStream::new(1, "p")).unwrap();
    assert!(loss_dssm(&adapted, &examples).unwrap() < loss_dssm(&theta, &examples).unwrap());
}

#[test]
fn invalid_configs_are_rejected() {
    let (_dir, corpus) = common::synthetic_corpus(10, 40, 1);
    let theta = common::init_theta(&corpus, 2, &[2], 0);
    let too_many = FederationConfig {
        clients_per_round: 11,
        ..Default::default()
    };
    assert!(matches!(
        train(theta.clone(), &corpus.clients, &corpus.catalog, &too_many, LocalObjective::Dssm),
        Err(fedrec::Error::Config(_))
    ));
    let frozen_server = FederationConfig {
        alpha2: 0.0,
        clients_per_round: 2,
        ..Default::default()
    };
    assert!(train(theta, &corpus.clients, &corpus.catalog, &frozen_server, LocalObjective::Dssm).is_err());
}

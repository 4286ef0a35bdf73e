mod common;

use fedrec::federation::{mean_delta, train, Checkpointing, Delta, FederationConfig, LocalObjective};
use fedrec::linalg::{l2_norm, RngStream};
use fedrec::privacy::{
    accountant_step, clip, federated_epsilon, perturb, sensitivity_bound, train_dp, DpConfig, DpStage, Mechanism,
    PrivacyAccountant,
};
use rand::Rng;

fn random_delta(rng: &mut RngStream, dim: usize) -> Delta {
    let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
    Delta::new((0..dim).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Every single-user replacement of every batch moves the clipped mean by at most 2S/M.
#[test]
fn brute_force_adjacent_batches_respect_sensitivity() {
    let mut rng = RngStream::new(3, "adjacency");
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..200 {
        let m = rng.random_range(1..=4);
        let dim = rng.random_range(1..=3);
        let s = rng.random_range(0.1..5.0);
        let batch: Vec<Delta> = (0..m).map(|_| clip(&random_delta(&mut rng, dim), s).unwrap()).collect();
        let replacements: Vec<Delta> = (0..8).map(|_| clip(&random_delta(&mut rng, dim), s).unwrap()).collect();
        let f = mean_delta(&batch).unwrap();
        let bound = sensitivity_bound(s, m).unwrap();
        for slot in 0..m {
            for r in &replacements {
                let mut adjacent = batch.clone();
                adjacent[slot] = r.clone();
                let g = mean_delta(&adjacent).unwrap();
                let diff: Vec<f64> = f.iter().zip(&g).map(|(a, b)| a - b).collect();
                let dist = l2_norm(&diff).unwrap();
                assert!(dist <= bound * (1.0 + 1e-12), "moved {dist} > {bound}");
                worst_ratio = worst_ratio.max(dist / bound);
            }
        }
    }
    // antipodal replacements come close to the bound, so it is not loose
    assert!(worst_ratio > 0.9, "worst ratio {worst_ratio}");
}

#[test]
fn gaussian_noise_std_matches_sigma() {
    let dp = DpConfig {
        clip_bound: 40.0,
        noise_multiplier: 1.0,
        ..DpConfig::default()
    };
    let n = 100_000;
    let noisy = perturb(&vec![0.0; n], &dp, 30, &mut RngStream::new(9, "server-noise")).unwrap();
    let mean = noisy.iter().sum::<f64>() / n as f64;
    let std = (noisy.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((2.64..=2.70).contains(&std), "std {std}");
    let again = perturb(&vec![0.0; n], &dp, 30, &mut RngStream::new(9, "server-noise")).unwrap();
    assert_eq!(noisy, again);
}

#[test]
fn laplace_noise_scale_follows_the_budget_split() {
    let mech = Mechanism::laplace_for_budget(10.0, 100).unwrap();
    let dp = DpConfig {
        clip_bound: 1.0,
        mechanism: mech,
        ..DpConfig::default()
    };
    let n = 100_000;
    let noisy = perturb(&vec![0.0; n], &dp, 20, &mut RngStream::new(2, "server-noise")).unwrap();
    // b = (2S/M) / (ε/E1) = 0.1 / 0.1 = 1, std = √2·b
    let std = (noisy.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    assert!((std - 2f64.sqrt()).abs() < 0.02, "std {std}");
    assert!(Mechanism::laplace_for_budget(0.0, 10).is_err());
    assert!(Mechanism::laplace_for_budget(1.0, 0).is_err());
}

#[test]
fn accountant_limits_and_composition() {
    let quiet = PrivacyAccountant::new(0.01, 1e6).unwrap();
    assert!(quiet.step_rdp().iter().all(|&r| r < 1e-9));

    let mut one = PrivacyAccountant::new(5.0 / 4800.0, 1.0).unwrap();
    let per_step = one.step_rdp();
    one.steps(1000);
    assert_eq!(one.compositions, 1000);
    let single = PrivacyAccountant::new(5.0 / 4800.0, 1.0).unwrap();
    for alpha in [2.0, 8.0, 32.0, 256.0] {
        let expected = 1000.0 * accountant_step(&single).rdp(alpha);
        assert!((one.rdp(alpha) - expected).abs() <= 1e-9 * expected.max(1e-12));
    }
    assert_eq!(per_step, one.step_rdp());
    assert_eq!(one.epsilon(0.0).unwrap(), f64::INFINITY);

    let stepped = accountant_step(&PrivacyAccountant::new(1.0, 2.0).unwrap());
    assert_eq!(stepped.compositions, 1);
    assert!((stepped.rdp(3.0) - 3.0 / 8.0).abs() < 1e-12);
}

#[test]
fn epsilon_orderings() {
    let eps = |n, m, rounds, delta| federated_epsilon(n, m, 1.0, rounds, delta).unwrap();
    assert!(eps(4800, 5, 1000, 1e-8) > eps(4800, 5, 1000, 1e-6));
    assert!(eps(4800, 5, 1000, 1e-6) > eps(4800, 5, 1000, 1e-4));
    assert!(eps(4800, 10, 1000, 1e-6) > eps(4800, 5, 1000, 1e-6));
    assert!(eps(4800, 5, 2000, 1e-6) > eps(4800, 5, 1000, 1e-6));
    assert!(eps(760, 5, 1000, 1e-6) > eps(4800, 5, 1000, 1e-6));
}

fn small_fed(rounds: usize) -> FederationConfig {
    FederationConfig {
        rounds,
        local_epochs: 2,
        clients_per_round: 8,
        alpha1: 0.02,
        seed: 4,
        ..FederationConfig::default()
    }
}

#[test]
fn zero_noise_and_loose_bound_reproduce_plain_training() {
    let (_dir, corpus) = common::synthetic_corpus(40, 80, 8);
    let theta0 = common::init_theta(&corpus, 4, &[8], 1);
    let cfg = small_fed(5);
    let plain = train(theta0.clone(), &corpus.clients, &corpus.catalog, &cfg, LocalObjective::Dssm).unwrap();
    let dp = DpConfig {
        clip_bound: 1e300,
        noise_multiplier: 0.0,
        ..DpConfig::default()
    };
    let private = train_dp(theta0, &corpus.clients, &corpus.catalog, &cfg, &dp, DpStage::OneStage, &Checkpointing::default()).unwrap();
    assert_eq!(private.theta, plain.theta);
    assert_eq!(private.trace, plain.trace);
    assert_eq!(private.accountant.compositions, 5);
}

#[test]
fn private_runs_clip_every_upload_and_count_only_private_rounds() {
    let (_dir, corpus) = common::synthetic_corpus(40, 80, 9);
    let theta0 = common::init_theta(&corpus, 4, &[8], 2);
    let cfg = small_fed(4);
    let dp = DpConfig {
        clip_bound: 0.05,
        noise_multiplier: 0.5,
        ..DpConfig::default()
    };
    let two = train_dp(
        theta0.clone(),
        &corpus.clients,
        &corpus.catalog,
        &cfg,
        &dp,
        DpStage::TwoStage { pretrain_rounds: 3 },
        &Checkpointing::default(),
    )
    .unwrap();
    assert_eq!(two.accountant.compositions, 4);
    assert_eq!(two.trace.len(), 7);
    assert!(two.max_upload_norm <= 0.05);
    assert!(two.max_upload_norm > 0.049, "uploads should hit the bound, max {}", two.max_upload_norm);

    let one = train_dp(theta0, &corpus.clients, &corpus.catalog, &cfg, &dp, DpStage::OneStage, &Checkpointing::default()).unwrap();
    assert_eq!(one.accountant.compositions, 4);
    assert_eq!(one.trace.len(), 4);
    let eps = one.accountant.epsilon(1e-4).unwrap();
    assert_eq!(eps, federated_epsilon(40, 8, 0.5, 4, 1e-4).unwrap());
}

#[test]
fn private_training_is_deterministic_across_threads() {
    let (_dir, corpus) = common::synthetic_corpus(40, 80, 10);
    let cfg = small_fed(3);
    let dp = DpConfig::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                train_dp(
                    common::init_theta(&corpus, 4, &[8], 3),
                    &corpus.clients,
                    &corpus.catalog,
                    &cfg,
                    &dp,
                    DpStage::TwoStage { pretrain_rounds: 2 },
                    &Checkpointing::default(),
                )
                .unwrap()
            })
    };
    let (a, b) = (run(1), run(5));
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.trace, b.trace);
}

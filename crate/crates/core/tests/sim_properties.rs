use adaptive_compute::dataset::{self, PreferencePair, LOSS};
use adaptive_compute::experiment::{
    metrics_csv, run_grid, ExecConfig, RunOptions, Strategy, WorkloadConfig,
};
use adaptive_compute::generator::sim::{sim_true_score, Calibration, SimGenerator, SimWorld};
use adaptive_compute::pruner::{run_pruned, PruneConfig};
use adaptive_compute::sampler::{run_adaptive, run_fixed, AdaptivePolicy, DEFAULT_MAX_NEW_TOKENS};
use adaptive_compute::scoring::normalize;
use adaptive_compute::{GenerationRequest, Generator, Prompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_workload(n: usize) -> (SimGenerator, Vec<Prompt>) {
    let w = WorkloadConfig {
        n_prompts: n,
        seed: 9,
        ..Default::default()
    }
    .build()
    .unwrap();
    (w.generator().unwrap(), w.prompts())
}

#[test]
fn score_is_monotone_in_reward() {
    let mut w = SimWorld::new(0.1, 0.02, 0.1, 454, 0.01);
    w.mid_noise_sigma0 = 0.03;
    for t in [0, 64, 128, 454] {
        let scores: Vec<f64> = (0..100)
            .map(|i| sim_true_score(&w, 0.0 + 0.002 * i as f64, t))
            .collect();
        assert!(scores.windows(2).all(|p| p[0] < p[1]), "t={t}");
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }
}

#[test]
fn mean_mid_generation_score_matches_brute_force() {
    let (mu, sigma, eps, s0, t) = (0.1, 0.02, 0.01, 0.03, 128u32);
    let mut w = SimWorld::new(mu, sigma, mu, 454, eps);
    w.mid_noise_sigma0 = s0;
    let gen = SimGenerator::new(vec![w]).unwrap();
    let p = Prompt::new(0, "p");
    let n = 40_000;
    let mean_score = (0..n)
        .map(|i| {
            let s = gen
                .start_generation(&GenerationRequest::new(&p, i, 1.0, t, 5))
                .unwrap();
            assert!(!s.finished && s.tokens_generated == t);
            normalize(&gen.self_evaluate(&p, &s).unwrap()).unwrap()
        })
        .sum::<f64>()
        / n as f64;

    // Oracle: observed reward plus eps beats a draw from the widened
    // comparison distribution.
    let mid = s0 * (1.0 - f64::from(t) / 454.0).sqrt();
    let spread = (sigma * sigma + mid * mid).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let m = 2_000_000;
    let hits = (0..m)
        .filter(|_| {
            let r = mu + sigma * rng.sample::<f64, _>(StandardNormal);
            let seen = r + mid * rng.sample::<f64, _>(StandardNormal);
            seen + eps >= mu + spread * rng.sample::<f64, _>(StandardNormal)
        })
        .count();
    let oracle = hits as f64 / m as f64;
    // Frozen from the oracle: Phi(eps / (spread * sqrt 2)).
    assert!((oracle - 0.586_52).abs() < 1.5e-3, "oracle {oracle}");
    // Per-sample scores spread over roughly [0, 1]; 4 standard errors.
    let se = 0.3 / (n as f64).sqrt();
    assert!(
        (mean_score - oracle).abs() < 4.0 * se,
        "mean {mean_score} vs {oracle}"
    );
}

#[test]
fn continuing_a_prefix_matches_a_straight_generation() {
    let (gen, prompts) = small_workload(20);
    for p in &prompts {
        for i in 0..4 {
            let full = gen
                .start_generation(&GenerationRequest::new(
                    p,
                    i,
                    1.0,
                    DEFAULT_MAX_NEW_TOKENS,
                    3,
                ))
                .unwrap();
            let prefix = gen
                .start_generation(&GenerationRequest::new(p, i, 1.0, 100, 3))
                .unwrap();
            let done = gen
                .continue_generation(&prefix, DEFAULT_MAX_NEW_TOKENS - 100)
                .unwrap();
            assert_eq!(done.latent_reward, full.latent_reward);
            assert_eq!(done.tokens_generated, full.tokens_generated);
            assert_eq!(
                gen.self_evaluate(p, &done).unwrap(),
                gen.self_evaluate(p, &full).unwrap()
            );
        }
    }
}

#[test]
fn grid_is_identical_across_thread_counts() {
    let (gen, prompts) = small_workload(200);
    let strategies = [
        Strategy::adaptive(0.96, 16, true),
        Strategy::prune(16, 64, 0.5),
        Strategy::reward_threshold(0.14, 16, false),
    ];
    let csv = |jobs| {
        let opts = RunOptions {
            seed: 4,
            exec: ExecConfig { jobs: Some(jobs) },
            ..Default::default()
        };
        metrics_csv(
            &run_grid(&gen, &prompts, &strategies, &opts, None)
                .unwrap()
                .rows,
        )
        .unwrap()
    };
    let one = csv(1);
    assert_eq!(one, csv(3));
    assert_eq!(one, csv(8));
}

#[test]
fn tau_one_without_annealing_is_best_of_n_max() {
    let (gen, prompts) = small_workload(100);
    let policy = AdaptivePolicy {
        tau: 1.0,
        annealing: false,
        ..Default::default()
    };
    for p in &prompts {
        let a = run_adaptive(p, &gen, &policy, 8).unwrap();
        let f = run_fixed(p, &gen, 16, DEFAULT_MAX_NEW_TOKENS, 8).unwrap();
        assert_eq!(a.best.sample_ref, f.best.sample_ref);
        assert_eq!(a.selected_reward, f.selected_reward);
        assert_eq!(a.tokens_generated, f.tokens_generated);
        assert!(!a.stopped_early);
    }
}

#[test]
fn samples_used_is_monotone_in_tau_per_prompt() {
    let (gen, prompts) = small_workload(200);
    for annealing in [true, false] {
        for p in &prompts {
            let used: Vec<usize> = [0.5, 0.9, 0.95, 0.98, 0.995, 1.0]
                .iter()
                .map(|&tau| {
                    let policy = AdaptivePolicy {
                        tau,
                        annealing,
                        ..Default::default()
                    };
                    run_adaptive(p, &gen, &policy, 1).unwrap().samples_used
                })
                .collect();
            assert!(used.windows(2).all(|w| w[0] <= w[1]), "{used:?}");
        }
    }
}

#[test]
fn stop_rule_invariants() {
    let (gen, prompts) = small_workload(200);
    for n_max in [1, 5, 16, 20] {
        let policy = AdaptivePolicy {
            tau: 0.97,
            n_max,
            ..Default::default()
        };
        for p in &prompts {
            let r = run_adaptive(p, &gen, &policy, 2).unwrap();
            assert!(r.samples_used <= n_max && r.batches_used <= policy.max_batches());
            let last = r.batches_used;
            let fired = |b: usize| {
                r.scores
                    .iter()
                    .any(|s| s.batch == b && s.score > policy.tau)
            };
            assert!(
                (1..last).all(|b| !fired(b)),
                "kept going after a confident batch"
            );
            if r.stopped_early {
                assert!(fired(last));
            } else {
                assert_eq!(r.samples_used, n_max);
            }
            assert!(r.scores.iter().all(|s| s.score <= r.best.score));
        }
    }
}

#[test]
fn pruning_never_beats_the_full_pool() {
    let (gen, prompts) = small_workload(200);
    let gen = gen.with_calibration(Calibration::Exact);
    for at in [0, 32, 128, 300] {
        let cfg = PruneConfig {
            prune_at_tokens: at,
            prune_fraction: 0.5,
            ..Default::default()
        };
        for p in &prompts {
            let pr = run_pruned(p, &gen, &cfg, 6).unwrap();
            let full = run_fixed(p, &gen, 16, DEFAULT_MAX_NEW_TOKENS, 6).unwrap();
            assert!(pr.best.score <= full.best.score);
            assert_eq!(pr.samples_used, 8);
            assert_eq!(pr.pruned, 8);
            assert!(pr.tokens_generated <= full.tokens_generated);
        }
    }
}

#[test]
fn dataset_targets_truncations_and_determinism() {
    let (gen, _) = small_workload(50);
    let inputs = dataset::simulate_pairs(&gen, 500, 12).unwrap();
    let pairs: Vec<PreferencePair> = inputs
        .iter()
        .map(|p| PreferencePair::from_input(p, 0.01).unwrap())
        .collect();
    let (records, stats) = dataset::build_dataset(&pairs, 1, true).unwrap();
    assert_eq!(records.len(), 4 * pairs.len());
    assert_eq!(stats.ties, pairs.iter().filter(|p| p.label == 0).count());
    for (pair, recs) in pairs.iter().zip(records.chunks(4)) {
        let want = |label: i8| if label == LOSS { "Yes" } else { "No" };
        assert_eq!(recs[0].target, want(pair.label));
        assert_eq!(recs[1].target, want(-pair.label));
        assert_eq!(recs[2].target, recs[0].target);
        assert_eq!(recs[3].target, recs[1].target);
        let t = recs[2].truncation_point.unwrap();
        assert!(t >= 1 && t < pair.response_1_tokens.unwrap());
    }
    let again = adaptive_compute::par::Exec::with_jobs(1)
        .install(|| dataset::build_dataset(&pairs, 1, true))
        .unwrap();
    assert_eq!(again.0, records);
    let other = dataset::build_dataset(&pairs, 2, true).unwrap().0;
    assert_ne!(other, records);
}

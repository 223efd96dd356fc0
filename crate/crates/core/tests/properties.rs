use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqexit::encoder::{forward_full, token_uncertainty, EncoderWeights, ModelConfig};
use seqexit::exit_policy::{simulate_exits, window_uncertainty, ExitPolicy, WindowSize};
use seqexit::flops::layer_flops;
use seqexit::halt_copy::{forward_early_exit, forward_token_ee, WordGroups};

fn small_model(seed: u64) -> EncoderWeights {
    let cfg = ModelConfig {
        num_layers: 4,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        num_labels: 5,
        vocab_size: 20,
        max_len: 24,
    };
    EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn window() -> impl Strategy<Value = WindowSize> {
    prop_oneof![(0usize..6).prop_map(WindowSize::Radius), Just(WindowSize::Infinite)]
}

fn policy() -> impl Strategy<Value = ExitPolicy> {
    prop_oneof![
        (0.0f64..1.2).prop_map(ExitPolicy::sentee),
        (window(), 0.0f64..1.2).prop_map(|(k, d)| ExitPolicy::tokee(k, d)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn uncertainty_is_normalized(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let total: f64 = raw.iter().sum::<f64>() + 1e-9;
        let p: Vec<f64> = raw.iter().map(|x| (x + 1e-9 / raw.len() as f64) / total).collect();
        let u = token_uncertainty(&p, p.len()).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&u));
    }

    #[test]
    fn window_dominates_and_grows_with_radius(u in prop::collection::vec(0.0f64..1.0, 1..30), k in 0usize..8) {
        let small = window_uncertainty(&u, WindowSize::Radius(k));
        let large = window_uncertainty(&u, WindowSize::Radius(k + 1));
        let all = window_uncertainty(&u, WindowSize::Infinite);
        for i in 0..u.len() {
            prop_assert!(small[i] >= u[i]);
            prop_assert!(large[i] >= small[i]);
            prop_assert!(all[i] >= large[i]);
        }
        prop_assert_eq!(window_uncertainty(&u, WindowSize::Radius(0)), u);
    }

    #[test]
    fn sentence_exit_layer_falls_with_threshold(
        table in (1usize..8, 1usize..15).prop_flat_map(|(l, n)| prop::collection::vec(prop::collection::vec(0.0f64..1.0, n), l)),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let strict = simulate_exits(&table, &ExitPolicy::sentee(lo)).unwrap();
        let loose = simulate_exits(&table, &ExitPolicy::sentee(hi)).unwrap();
        prop_assert!(loose[0] <= strict[0]);
        prop_assert!(strict.iter().all(|&e| e == strict[0] && (1..=table.len()).contains(&e)));
    }

    #[test]
    fn unbounded_window_matches_sentence_exit(
        table in (1usize..8, 1usize..15).prop_flat_map(|(l, n)| prop::collection::vec(prop::collection::vec(0.0f64..1.0, n), l)),
        delta in 0.0f64..1.2,
    ) {
        let n = table[0].len();
        let sentee = simulate_exits(&table, &ExitPolicy::sentee(delta)).unwrap();
        for k in [WindowSize::Infinite, WindowSize::Radius(n.saturating_sub(1))] {
            prop_assert_eq!(&simulate_exits(&table, &ExitPolicy::tokee(k, delta)).unwrap(), &sentee);
        }
    }

    #[test]
    fn layer_cost_grows_with_active_tokens(n in 1usize..64, m in 0usize..64) {
        let cfg = ModelConfig::toy(10, 5);
        let m = m.min(n);
        let c = layer_flops(n, m, &cfg).unwrap();
        if m == 0 {
            prop_assert_eq!(c.backbone(), 0);
        } else {
            let next = layer_flops(n, (m + 1).min(n), &cfg).unwrap();
            prop_assert!(next.backbone() >= c.backbone());
            let (n, m, d, f) = (n as u64, m as u64, 64u64, 256u64);
            prop_assert_eq!(c.backbone(), 2 * m * d * d + 2 * n * d * d + 2 * m * n * d + 2 * m * d * f);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn early_exit_invariants(
        seed in 0u64..1000,
        ids in prop::collection::vec(0usize..20, 1..24),
        policy in policy(),
    ) {
        let w = small_model(seed);
        let layers = w.config().num_layers;
        let out = forward_early_exit(&w, &ids, &policy, None).unwrap();
        let t = &out.trace;
        prop_assert_eq!(t.hidden.len(), layers);
        prop_assert!(out.ledger.speedup() >= 1.0 - 1e-12);
        prop_assert!(out.ledger.speedup() <= layers as f64 + 1e-12);
        for (tok, &e) in t.exit_layer.iter().enumerate() {
            prop_assert!((1..=layers).contains(&e));
            // the exited state is copied unchanged to every later layer
            for l in e..layers {
                prop_assert_eq!(t.hidden[l].row(tok), t.hidden[e - 1].row(tok));
                prop_assert!(!t.active[l][tok]);
            }
            prop_assert_eq!(out.labels[tok], seqexit::math::argmax(t.probs[e - 1].row(tok)));
        }
        if policy.threshold() > 1.0 {
            prop_assert!(t.exit_layer.iter().all(|&e| e == 1));
        }
    }

    #[test]
    fn zero_threshold_is_the_full_model(seed in 0u64..1000, ids in prop::collection::vec(0usize..20, 1..24), k in window()) {
        let w = small_model(seed);
        let full = forward_full(&w, &ids).unwrap();
        let out = forward_token_ee(&w, &ids, &ExitPolicy::tokee(k, 0.0), None).unwrap();
        prop_assert_eq!(out.labels, full.labels());
        prop_assert_eq!(out.trace.hidden, full.hidden);
        prop_assert_eq!(out.ledger.speedup(), 1.0);
    }

    #[test]
    fn word_pieces_exit_together(
        seed in 0u64..1000,
        ids in prop::collection::vec(0usize..20, 2..20),
        continuation in prop::collection::vec(any::<bool>(), 20),
        k in window(),
        delta in 0.0f64..1.0,
    ) {
        let mut cont = continuation[..ids.len()].to_vec();
        cont[0] = false;
        let groups = WordGroups::from_continuations(&cont);
        let w = small_model(seed);
        let out = forward_token_ee(&w, &ids, &ExitPolicy::tokee(k, delta), Some(&groups)).unwrap();
        for r in groups.ranges() {
            let first = out.trace.exit_layer[r.start];
            prop_assert!(out.trace.exit_layer[r.clone()].iter().all(|&e| e == first));
        }
    }
}

//! Property tests over randomized programs, observations and sequences.

use proptest::prelude::*;

use cct_core::algos::{StrategyConfig, StrategyKind};
use cct_core::bench::random_paired_program;
use cct_core::fuzz::{concurrency_mutate, generate_seq, mutate_seq};
use cct_core::model::{parse_program, parse_target_spec, validate_sequence};
use cct_core::sched::{replay, run_controlled, SchedParams, Trace};
use cct_core::stats::{chi_square_uniform, km_curve, logrank, TtbObservation};
use cct_core::util::rng_from_seed;

fn algo_strategy() -> impl Strategy<Value = StrategyKind> {
    prop_oneof![
        Just(StrategyKind::Rw),
        Just(StrategyKind::Rp),
        Just(StrategyKind::Pos),
        Just(StrategyKind::Pct),
        Just(StrategyKind::OsLike),
    ]
}

fn observations() -> impl Strategy<Value = Vec<TtbObservation>> {
    prop::collection::vec(
        (1u64..200, any::<bool>()).prop_map(|(value, censored)| TtbObservation { value, censored }),
        1..40,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Rendering a program and parsing it back is the identity on the
    /// rendered form (and preserves the content hash).
    #[test]
    fn render_parse_roundtrip(seed in 0u64..10_000) {
        let program = random_paired_program(seed);
        let rendered = program.render();
        let reparsed = parse_program(&rendered).unwrap();
        prop_assert_eq!(reparsed.render(), rendered);
        prop_assert_eq!(reparsed.sha256(), program.sha256());
    }

    /// Trace JSONL round-trips byte-identically, and replay of a fresh run
    /// reproduces the same outcome class.
    #[test]
    fn trace_roundtrip_and_replay(seed in 0u64..10_000, algo in algo_strategy()) {
        let program = random_paired_program(seed);
        let cfg = StrategyConfig::new(algo, seed);
        let (trace, outcome) = run_controlled(&program, &cfg, &SchedParams::default());
        let jsonl = trace.to_jsonl();
        let parsed = Trace::from_jsonl(&jsonl).unwrap();
        prop_assert_eq!(parsed.to_jsonl(), jsonl);
        let replayed = replay(&program, &parsed).unwrap();
        prop_assert_eq!(replayed.label(), outcome.label());
    }

    /// KM survival is in [0,1] and non-increasing over event times.
    #[test]
    fn km_monotone(obs in observations()) {
        let curve = km_curve(&obs);
        let mut last = 1.0f64;
        for p in &curve {
            prop_assert!(p.survival >= -1e-12 && p.survival <= 1.0 + 1e-12);
            prop_assert!(p.survival <= last + 1e-12);
            last = p.survival;
        }
    }

    /// Log-rank is symmetric in its arguments and p stays in [0,1].
    #[test]
    fn logrank_symmetric(a in observations(), b in observations()) {
        let ab = logrank(&a, &b);
        let ba = logrank(&b, &a);
        prop_assert!((ab.statistic - ba.statistic).abs() < 1e-9);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    /// Chi-square p-values stay in [0,1]; equal counts give statistic 0.
    #[test]
    fn chisq_bounds(counts in prop::collection::vec(0u64..5000, 2..10)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let r = chi_square_uniform(&counts);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
        prop_assert!(r.statistic >= 0.0);
        prop_assert_eq!(r.dof, counts.len() as u64 - 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Sequence mutation keeps sequences valid and non-empty; concurrency
    /// mutation preserves order and duplicates in place.
    #[test]
    fn mutations_preserve_validity(seed in any::<u64>(), n in 1usize..4, rounds in 1usize..8) {
        let spec = parse_target_spec(cct_core::bench::JFS_TOY_SPEC).unwrap();
        let mut rng = rng_from_seed(seed);
        let mut seq = generate_seq(&spec, &mut rng, 5);
        for _ in 0..rounds {
            seq = mutate_seq(&seq, &spec, &mut rng);
            prop_assert!(!seq.calls.is_empty());
            validate_sequence(&spec, &seq).unwrap();
        }
        let out = concurrency_mutate(&seq, n, &mut rng);
        validate_sequence(&spec, &out).unwrap();
        let sync: Vec<_> = out.calls.iter().filter(|c| !c.is_async).cloned().collect();
        prop_assert_eq!(sync, seq.calls.clone());
        let asyncs = out.calls.iter().filter(|c| c.is_async).count();
        prop_assert!(asyncs >= 1 && asyncs <= n.min(seq.calls.len()));
    }
}

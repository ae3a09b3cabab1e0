//! Property-based checks of invariants that hold for every model and run.

use std::path::PathBuf;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scjani::expr::Value;
use scjani::jani::{emit_jani, load_jani};
use scjani::smc::{estimate_probability, required_samples, sample_trace, Compiled, SmcConfig};
use scjani::system::load_model;

fn models() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn compiled(rel: &str) -> Compiled {
    let model = load_model(&models().join(rel)).unwrap();
    Compiled::new(&model.network).unwrap()
}

const MANIFESTS: &[&str] = &[
    "fig1/fig1.toml",
    "case_study/sequence.toml",
    "case_study/reactive.toml",
    "small/coin/coin.toml",
    "small/die/die.toml",
    "small/race/race.toml",
    "small/gambler/gambler.toml",
    "small/lossy_channel/lossy_channel.toml",
    "small/service_retry/service_retry.toml",
];

#[test]
fn jani_round_trip_is_stable() {
    for rel in MANIFESTS {
        let net = load_model(&models().join(rel)).unwrap().network;
        let text = emit_jani(&net).unwrap();
        let back = load_jani(&text).unwrap_or_else(|e| panic!("{rel}: {e}"));
        assert_eq!(emit_jani(&back).unwrap(), text, "{rel}");
    }
}

proptest! {
    #[test]
    fn sample_count_meets_the_bound(c in 0.5f64..0.999, eps in 0.005f64..0.3) {
        let n = required_samples(c, eps);
        // two-sided Hoeffding bound at n samples, and n - 1 would not suffice
        prop_assert!(2.0 * (-2.0 * n as f64 * eps * eps).exp() <= (1.0 - c) * (1.0 + 1e-9));
        if n > 1 {
            prop_assert!(2.0 * (-2.0 * (n - 1) as f64 * eps * eps).exp() > (1.0 - c) * (1.0 - 1e-9));
        }
    }

    #[test]
    fn sample_count_is_monotone(c1 in 0.5f64..0.999, c2 in 0.5f64..0.999, e1 in 0.005f64..0.3, e2 in 0.005f64..0.3) {
        let (clo, chi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        let (elo, ehi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(required_samples(clo, e1) <= required_samples(chi, e1));
        prop_assert!(required_samples(c1, ehi) <= required_samples(c1, elo));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn verdict_is_consistent_and_reproducible(seed in any::<u64>(), jobs in 1usize..4) {
        let model = load_model(&models().join("small/race/race.toml")).unwrap();
        let c = Compiled::new(&model.network).unwrap();
        let prop = &model.network.properties[0];
        let cfg = SmcConfig { confidence: 0.9, max_error: 0.1, seed, jobs: 1, ..SmcConfig::default() };
        let a = estimate_probability(&c, prop, &cfg).unwrap();
        let b = estimate_probability(&c, prop, &SmcConfig { jobs, ..cfg.clone() }).unwrap();
        prop_assert_eq!(a.satisfied + a.violated + a.undecided, a.samples);
        prop_assert_eq!(a.samples, required_samples(0.9, 0.1));
        prop_assert!((0.0..=1.0).contains(&a.estimate));
        prop_assert_eq!((a.satisfied, a.violated, &a.violating), (b.satisfied, b.violated, &b.violating));
    }

    #[test]
    fn traces_follow_the_transition_relation(seed in any::<u64>()) {
        let c = compiled("small/lossy_channel/lossy_channel.toml");
        let trace = sample_trace(&c, &mut ChaCha8Rng::seed_from_u64(seed), 200).unwrap();
        prop_assert_eq!(&trace.steps[0].state, c.initial_state());
        for w in trace.steps.windows(2) {
            let next = c.successors(&w[0].state).unwrap();
            prop_assert!(next.iter().any(|(p, label, s)| *p > 0.0 && *label == w[1].action && *s == w[1].state));
        }
    }

    #[test]
    fn clock_never_goes_back(seed in any::<u64>()) {
        let c = compiled("case_study/reactive.toml");
        let trace = sample_trace(&c, &mut ChaCha8Rng::seed_from_u64(seed), 400).unwrap();
        let mut last = 0;
        for step in &trace.steps {
            let Some(Value::Int(t)) = c.global_value(&step.state, "t_curr") else {
                panic!("t_curr missing");
            };
            prop_assert!(*t >= last);
            last = *t;
        }
    }
}

mod common;

use common::random_grid;
use gridsight_core::contingency::{
    analyze, candidates, derive_probabilities, enumerate, outageable, screen, AssetProbability,
    ScreeningPolicy,
};
use gridsight_core::fixtures::seven_bus;
use gridsight_core::grid::GridSpec;
use gridsight_core::powerflow::{Controls, SolveOptions};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn random_probs(spec: &GridSpec, seed: u64) -> AssetProbability {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut probs = derive_probabilities([], spec, 0.0);
    let assets: Vec<_> = probs.probs.keys().copied().collect();
    for a in assets {
        probs.set(a, rng.gen_range(0.0..0.2));
    }
    probs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumeration_sizes_are_binomial(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let spec = random_grid(&mut rng, 2 + (seed % 9) as usize);
        let n = outageable(&spec).len();
        prop_assert_eq!(enumerate(&spec, 1).len(), n);
        prop_assert_eq!(enumerate(&spec, 2).len(), binomial(n, 2));
        let pairs = enumerate(&spec, 2);
        prop_assert!(pairs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn raising_the_threshold_only_removes(seed in any::<u64>(), lo in 0.0f64..0.01, extra in 0.0f64..0.01) {
        let spec = seven_bus();
        let probs = random_probs(&spec, seed);
        let all = candidates(&spec, 2);
        let policy = |threshold| ScreeningPolicy { threshold, budget: usize::MAX, ..Default::default() };
        let loose = screen(&all, &probs, &policy(lo));
        let strict = screen(&all, &probs, &policy(lo + extra));
        prop_assert!(strict.len() <= loose.len());
        for (c, _) in &strict {
            prop_assert!(loose.iter().any(|(d, _)| d == c));
        }
        // the kept list is a probability-ordered prefix
        prop_assert!(strict.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn budget_keeps_the_most_probable(seed in any::<u64>(), budget in 1usize..40) {
        let spec = seven_bus();
        let probs = random_probs(&spec, seed);
        let all = candidates(&spec, 2);
        let unlimited = screen(&all, &probs, &ScreeningPolicy { threshold: 0.0, budget: usize::MAX, ..Default::default() });
        let capped = screen(&all, &probs, &ScreeningPolicy { threshold: 0.0, budget, ..Default::default() });
        prop_assert_eq!(&capped[..], &unlimited[..budget.min(unlimited.len())]);
    }
}

#[test]
fn zero_threshold_screening_equals_exhaustive() {
    let spec = seven_bus();
    let probs = random_probs(&spec, 3);
    let u = Controls::from_spec(&spec);
    let opts = SolveOptions::default();
    let screened = analyze(
        &spec,
        &probs,
        &ScreeningPolicy::exhaustive(2),
        &u,
        &opts,
        false,
    )
    .unwrap();
    let full = analyze(
        &spec,
        &probs,
        &ScreeningPolicy::exhaustive(2),
        &u,
        &opts,
        true,
    )
    .unwrap();
    assert_eq!(screened.ranked_by_severity(), full.ranked_by_severity());
    assert_eq!(screened.bus_risk, full.bus_risk);
}

#[test]
fn analysis_is_deterministic() {
    let spec = seven_bus();
    let probs = random_probs(&spec, 9);
    let u = Controls::from_spec(&spec);
    let opts = SolveOptions::default();
    let policy = ScreeningPolicy {
        threshold: 1e-3,
        budget: 25,
        ..Default::default()
    };
    let a = analyze(&spec, &probs, &policy, &u, &opts, false).unwrap();
    let b = analyze(&spec, &probs, &policy, &u, &opts, false).unwrap();
    assert_eq!(a, b);
}

mod common;

use common::scenario::run_case;

#[test]
fn engine_matches_reference_monitor() {
    for seed in 0..40 {
        let r = run_case(seed, 1000, false);
        assert!(r.clean(), "seed {seed}: {r:?}");
        assert!(r.objects <= 50);
    }
}

#[test]
fn denied_events_only_add_a_violation() {
    let mut denied = 0;
    for seed in 1000..1010 {
        let r = run_case(seed, 300, true);
        assert_eq!(r.deny_side_effects, 0, "seed {seed}");
        denied += r.denied;
    }
    assert!(denied > 0, "scenarios never exercised a deny");
}

#[test]
fn scenarios_exercise_both_verdicts() {
    let (mut allowed, mut denied) = (0, 0);
    for seed in 0..20 {
        let r = run_case(seed, 500, false);
        allowed += r.events - r.denied;
        denied += r.denied;
    }
    assert!(
        allowed > 1000 && denied > 1000,
        "allowed {allowed} denied {denied}"
    );
}

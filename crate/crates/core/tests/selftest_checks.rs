use metacoop_core::selftest::{self, CheckOutcome};

fn assert_passes(c: CheckOutcome) {
    println!("{}: {}", c.name, c.detail);
    assert!(c.passed, "{}: {}", c.name, c.detail);
}

#[test]
fn meta_gradient_matches_finite_differences() {
    assert_passes(selftest::meta_gradient_oracle(0));
    assert_passes(selftest::meta_gradient_oracle(7));
}

#[test]
fn autodiff_rules_match_finite_differences() {
    assert_passes(selftest::autodiff_oracle(1, 20));
}

#[test]
fn co_learner_frozen_in_inner_loop() {
    assert_passes(selftest::freeze_invariant(2, 40));
}

#[test]
fn zero_gamma_follows_maml() {
    assert_passes(selftest::gamma_collapse(3, 30));
}

#[test]
fn augmented_gradient_identity() {
    assert_passes(selftest::descent_identity(4, 10));
}

#[test]
fn diagnostics_properties_hold() {
    assert_passes(selftest::diagnostics_properties(5));
}

//! Finite-difference verification of every differentiable operation and of
//! the full model through every attention variant.

use apn_core::gradcheck::suite::{verification_suite, END_TO_END_TOLERANCE, OP_TOLERANCE};

#[test]
fn every_operation_and_variant_passes_the_oracle() {
    let entries = verification_suite(None).expect("suite runs");
    assert!(
        entries.len() > 25,
        "suite unexpectedly small: {}",
        entries.len()
    );
    let mut failures = Vec::new();
    for entry in &entries {
        println!(
            "{:<32} max rel err {:>12.3e}  (tolerance {:.0e})  {}",
            entry.name,
            entry.max_rel_err,
            entry.tolerance,
            if entry.passed() { "ok" } else { "FAIL" }
        );
        if !entry.passed() {
            failures.push(entry.name.clone());
        }
    }
    assert!(failures.is_empty(), "failing checks: {failures:?}");
}

#[test]
fn injected_fault_is_caught_and_named() {
    let entries = verification_suite(Some("sigmoid")).expect("suite runs");
    let sigmoid = entries.iter().find(|e| e.name == "sigmoid").unwrap();
    assert!(!sigmoid.passed());
    // everything else still passes
    assert!(entries
        .iter()
        .filter(|e| e.name != "sigmoid")
        .all(|e| e.passed()));
}

#[test]
fn tolerances_are_the_pinned_gates() {
    assert_eq!(OP_TOLERANCE, 1e-6);
    assert_eq!(END_TO_END_TOLERANCE, 1e-4);
}

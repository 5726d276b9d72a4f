//! Acceptance suite: runs every criterion at its pinned tolerance and prints
//! one pass/fail line per criterion. Heavy Monte Carlo inside; run with
//! `cargo test --test acceptance -- --nocapture` to watch progress.

use hamflow::selfcheck::{self, ALL_IDS, DEFAULT_SEED};

#[test]
fn acceptance_criteria() {
    let mut shared = selfcheck::SharedChains::default();
    let mut failures = Vec::new();
    println!();
    for &id in &ALL_IDS {
        let r = selfcheck::run_criterion(id, DEFAULT_SEED, &mut shared);
        println!("{}", r.line());
        if !r.passed {
            failures.push(r.line());
        }
    }
    assert!(
        failures.is_empty(),
        "{} acceptance criteria failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}

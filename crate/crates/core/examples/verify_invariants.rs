//! Runs the invariant suites behind `threephase verify`, once as is and
//! once with the horn perturbed.
//!
//! cargo run --release --example verify_invariants

use threephase::cli::{verify, VerifyOptions};

fn main() -> threephase::Result<()> {
    for fault in [None, Some(1e-3)] {
        let report = verify(
            None,
            &VerifyOptions {
                inject_fault: fault,
                ..Default::default()
            },
        )?;
        println!("horn perturbation {fault:?}:");
        for s in &report.suites {
            println!("  {} {}", if s.passed { "PASS" } else { "FAIL" }, s.name);
        }
    }
    Ok(())
}

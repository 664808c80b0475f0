//! Acceptance criteria 1 to 9, one PASS/FAIL line each.

use std::process::ExitCode;
use std::time::Instant;

use nvf_core::validation::CRITERIA;

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        for i in 1..=CRITERIA.len() {
            println!("criterion_{i}: test");
        }
        return ExitCode::SUCCESS;
    }
    let started = Instant::now();
    let mut failed = 0;
    for check in CRITERIA {
        let t = Instant::now();
        let outcome = check();
        println!("{outcome} [{:.1} s]", t.elapsed().as_secs_f64());
        if !outcome.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed in {:.1} s", CRITERIA.len() - failed, started.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

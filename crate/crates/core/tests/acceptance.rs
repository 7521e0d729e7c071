//! Acceptance criteria 1-9, one line each. Runs sequentially so that the
//! time budgets measure each check alone.

use std::process::ExitCode;

use drsi::selftest;

fn main() -> ExitCode {
    let seed = std::env::var("DRSI_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    println!("acceptance criteria (seed {seed})");
    let mut failed = 0;
    for id in selftest::criterion_ids() {
        let out = selftest::run_criterion(id, seed).expect("known criterion");
        println!("{out}");
        failed += usize::from(!out.passed);
    }
    println!("acceptance: {} passed, {failed} failed", selftest::criterion_ids().len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Runs the finite-difference gradient suite and prints one line per check.

use fcbm::gradcheck::{run_gradcheck, DEFAULT_INSTANCES};

fn main() -> fcbm::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let report = run_gradcheck(seed, DEFAULT_INSTANCES)?;
    for c in &report.checks {
        println!(
            "{:<18} {} instances ({} redrawn near kinks)  max rel err {:.2e}  {}",
            c.name,
            c.instances,
            c.redrawn,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    std::process::exit(if report.passed() { 0 } else { 1 });
}

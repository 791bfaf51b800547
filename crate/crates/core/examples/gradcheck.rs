//! Finite-difference check of the joint loss, migration term and full local
//! objective.
//!
//! `cargo run --release --example gradcheck -- [cases]`

fn main() -> pfdl::Result<()> {
    let cases = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    for r in pfdl::gradcheck::run_all(cases, 0)? {
        println!(
            "{:<16} cases {:>4} entries {:>6} max rel err {:.2e} {}",
            r.suite,
            r.cases,
            r.entries,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}

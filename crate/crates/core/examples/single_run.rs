//! One pFedDIL run on the benchmark, printing the accuracy matrix.
//!
//! `cargo run --release --example single_run -- [seed]`

use pfdl::federation::{run_experiment, Event, FederationConfig, RunOptions};

fn main() -> pfdl::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = FederationConfig::benchmark().with_seed(seed);
    let out = run_experiment(&cfg, RunOptions::default())?;
    for e in &out.events {
        if let Event::Matching { client: 0, task, rho, decision, .. } = e {
            println!("client 0, task {task}: rho {rho:.3?} -> {decision:?}");
        }
    }
    println!("accuracy after each task (rows) on each task seen so far (columns):");
    for row in &out.metrics.a {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  {}", cells.join("  "));
    }
    println!(
        "avg_final {:.4}, forgetting {:.4}, mean pool size {:.2}",
        out.metrics.avg_final,
        out.metrics.mean_forgetting(),
        out.pool_size_mean
    );
    Ok(())
}

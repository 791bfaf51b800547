//! Runs every mode on the desk-scale benchmark and prints final accuracies.
//!
//! `cargo run --release --example compare_modes -- [seeds]`

use std::time::Instant;

use pfdl::federation::{run_experiment, FederationConfig, Mode, RunOptions};

fn main() -> pfdl::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    for seed in 0..seeds {
        for mode in Mode::ALL {
            let cfg = FederationConfig::benchmark().with_mode(mode).with_seed(seed);
            let t = Instant::now();
            let out = run_experiment(&cfg, RunOptions::default())?;
            let m = &out.metrics;
            println!(
                "seed {seed} {:<12} avg_final {:.4} forgetting {:.4} pool {:.2} diag {:?} ({:.1}s)",
                mode.as_str(),
                m.avg_final,
                m.mean_forgetting(),
                out.pool_size_mean,
                m.diag.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

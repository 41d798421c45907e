//! End-to-end library walkthrough: generate the benchmark, train the
//! per-modality models, run both attack layers, and print the report.
//!
//! ```sh
//! cargo run --release -p xmodal --example full_run -- 7
//! ```

use xmodal::config::ExperimentConfig;
use xmodal::experiment::{cmd_attack, cmd_gen_data, cmd_train, AttackMode};
use xmodal::report::render_summary;

fn main() -> Result<(), xmodal::Error> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);
    let cfg = ExperimentConfig {
        seed,
        // Exercise the sparse layer at the full budget scale.
        step_scale: 8.0,
        ..Default::default()
    };
    let dir = std::env::temp_dir().join(format!("xmodal-demo-{seed}"));

    cmd_gen_data(&cfg, &dir)?;
    let trained = cmd_train(&cfg, &dir)?;
    for (m, rank1) in &trained.clean_rank1 {
        println!("modality {m}: clean rank-1 {rank1:.4}");
    }

    let report = cmd_attack(&cfg, &dir, AttackMode::DualLayer)?;
    print!("{}", render_summary(&report));
    println!("artifacts in {}", dir.display());
    Ok(())
}

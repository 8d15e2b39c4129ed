//! Cross-validates the default model on a default-sized synthetic cohort and
//! prints per-fold metrics next to the baselines.
//!
//! `cargo run --release --example recovery -- [seed] [epochs]`

use magnet_core::objectives::render_table;
use magnet_core::pipeline::{run_cv, TrainConfig};
use magnet_core::synth::{generate_cohort, SynthConfig};

fn main() -> magnet_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);

    let cohort = generate_cohort(&SynthConfig { seed, ..Default::default() })?;
    let config = TrainConfig { epochs, ..Default::default() };
    let report = run_cv(&cohort.records, &config)?;
    for f in &report.folds {
        println!(
            "fold {}: mse {:.2} (constant {:.2}, ridge {:.2}), r {:?}",
            f.fold, f.metrics.mse, f.baselines.constant.mse, f.baselines.ridge.mse, f.metrics.correlation
        );
    }
    print!(
        "{}",
        render_table(&[report.metrics, report.constant_baseline, report.ridge_baseline])
    );
    Ok(())
}

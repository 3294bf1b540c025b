//! Leave-one-family-out comparison of meta-learning against plain
//! fine-tuning on one held-out family.
//!
//! cargo run --release --example few_shot_benchmark -- spleen

use metaseg::bench::{run_matrix, BenchConfig, RunSpec};
use metaseg::metaopt::Variant;
use metaseg::TrainMode;

fn main() -> anyhow::Result<()> {
    let held_out = std::env::args().nth(1).unwrap_or_else(|| "spleen".into());
    let bench = BenchConfig::default();
    let variants = [Variant::FULL, Variant::FULL.with_training(TrainMode::FineTune)];
    let specs: Vec<RunSpec> = variants
        .iter()
        .map(|&variant| RunSpec {
            variant,
            held_out: held_out.clone(),
            seed: 0,
        })
        .collect();
    for r in run_matrix(&bench, &specs)? {
        let curve: Vec<String> = r.curve.iter().map(|d| format!("{d:.3}")).collect();
        println!(
            "{:<18} {held_out}: before {:.3}  sweeps [{}]  ({:.0}s)",
            r.variant,
            r.dsc_before,
            curve.join(", "),
            r.seconds
        );
    }
    Ok(())
}

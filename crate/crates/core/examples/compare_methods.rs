//! Ranks every calibration method on both synthetic tasks at 8 and 4 bits.
//!
//! `cargo run --release --example compare_methods [seed]`

use quantcal::esc::EscConfig;
use quantcal::report::{all_methods, compare, RunManifest};
use quantcal::synth::{synthesize, SynthTask};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(17);
    for task in [SynthTask::RegressionHeavytail, SynthTask::ClassificationToy] {
        let a = synthesize(task, seed)?;
        for bits in [8, 4] {
            let cfg = EscConfig {
                seed,
                metric: task.metric(),
                ..EscConfig::with_bits(bits)
            };
            let manifest = RunManifest::new("compare", vec![], cfg);
            let report = compare(
                manifest,
                &a.model,
                &a.calibration,
                &a.evaluation,
                &all_methods(None),
            )?;
            println!(
                "\n{task}, {bits}-bit, fp32 eval error {:.5}",
                report.fp_eval_error
            );
            for row in &report.rows {
                match (row.rank, row.eval_error, row.relative_to_fp) {
                    (Some(rank), Some(e), rel) => println!(
                        "  {rank}. {:<20} {e:.5}{}",
                        row.method,
                        rel.map(|r| format!("  ({r:.3}x fp32)")).unwrap_or_default()
                    ),
                    _ => println!("  -  {:<20} failed: {}", row.method, row.message),
                }
            }
        }
    }
    Ok(())
}

//! Two-stage scale search on the heavy-tailed synthetic task at 4 bits.

use quantcal::esc::{esc_calibrate, EscConfig};
use quantcal::report::EvalHarness;
use quantcal::synth::{synthesize, SynthTask};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = synthesize(SynthTask::RegressionHeavytail, 17)?;
    let cfg = EscConfig {
        seed: 17,
        ..EscConfig::with_bits(4)
    };
    let result = esc_calibrate(&a.model, &a.calibration, &cfg)?;
    let eval = EvalHarness::new(&a.model, &a.evaluation, &cfg)?;

    println!("layer  stage-1 beta  final beta  multiplier");
    for ((name, init), (fin, z)) in result.layers.iter().zip(result.init_scales.betas()).zip(
        result
            .final_scales
            .betas()
            .into_iter()
            .zip(&result.multipliers),
    ) {
        println!("{name:<6} {init:>12.4} {fin:>11.4} {z:>11.4}");
    }
    println!(
        "calibration error: fp32 {:.5}, stage 1 {:.5}, final {:.5}",
        result.fp_error, result.init_error, result.final_error
    );
    println!(
        "eval error:        fp32 {:.5}, stage 1 {:.5}, final {:.5}",
        eval.fp_error(),
        eval.evaluate(&result.init_scales)?,
        eval.evaluate(&result.final_scales)?
    );
    println!("{} generations", result.trace.len());
    Ok(())
}

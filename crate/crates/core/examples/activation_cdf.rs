//! Normalized activation CDFs of the heavy-tailed synthetic model. A curve
//! that reaches 0.99 close to zero means max calibration wastes most of the
//! integer grid on a few outliers.

use quantcal::synth::{synthesize, SynthTask};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = SynthTask::RegressionHeavytail;
    let a = synthesize(task, 17)?;
    println!("{task}: layer, |x|/max where the CDF reaches 0.5 / 0.99 / 0.999");
    for name in a.model.quantized_names() {
        let cdf = a.model.activation_cdf(&a.calibration, &name)?;
        let at = |q: f64| cdf.iter().find(|(_, f)| *f >= q).map_or(1.0, |p| p.0);
        println!(
            "  {name:<5} {:.4} / {:.4} / {:.4}",
            at(0.5),
            at(0.99),
            at(0.999)
        );
    }
    Ok(())
}

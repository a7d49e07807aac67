//! Every baseline calibrator on a Gaussian sample with a few large outliers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use quantcal::calib::{reconstruction_error, Calibrator, Histogram, DEFAULT_NUM_BINS};
use quantcal::quant::QuantParams;
use quantcal::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut values: Vec<f64> = (0..50_000)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    values.extend([60.0, -75.0, 90.0]);
    let acts = [Tensor::from_vec(values)?];

    let hist = Histogram::from_tensors(&acts, DEFAULT_NUM_BINS);
    println!(
        "{} values, max |x| = {:.2}, histogram bin width {:.4}",
        hist.total(),
        hist.observed_abs_max(),
        hist.bin_width()
    );

    let methods = [
        Calibrator::Max,
        Calibrator::Percentile { percentile: 99.99 },
        Calibrator::Percentile { percentile: 99.999 },
        Calibrator::Entropy,
        Calibrator::Mse,
    ];
    for bits in [8, 4] {
        println!("\n{bits}-bit");
        for m in methods {
            let beta = m.calibrate(&acts, bits)?;
            let err = reconstruction_error(&acts, &QuantParams::from_range(beta, bits)?);
            println!(
                "  {:<20} beta {beta:>8.4}  squared error {err:>12.3}",
                m.to_string()
            );
        }
    }
    Ok(())
}

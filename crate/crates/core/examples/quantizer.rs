//! Symmetric uniform quantization of a small tensor.

use quantcal::quant::{dequantize, fake_quantize, quantize, QuantParams};
use quantcal::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::from_vec(vec![-1.5, -0.26, 0.0, 0.004, 0.5, 1.27, 3.0])?;

    for bits in [8, 4] {
        let p = QuantParams::from_range(1.27, bits)?;
        let q = quantize(&x, &p);
        let back = dequantize(&q, &p)?;
        println!(
            "{bits}-bit: scale {:.6}, levels [{}, {}]",
            p.scale(),
            p.qmin(),
            p.qmax()
        );
        println!("  ints     {:?}", q.data());
        println!("  dequant  {:?}", back.data());
        println!("  mse      {:.3e}", x.mse(&fake_quantize(&x, &p))?);
    }

    // a scale maps back to the clipping bound it came from
    let p = QuantParams::from_scale(2.54 / 255.0, 8)?;
    println!("beta from scale: {}", p.beta());
    Ok(())
}

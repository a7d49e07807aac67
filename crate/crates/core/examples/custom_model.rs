//! Build a small network by hand, save it, reload it and run it with and
//! without fake quantization.

use quantcal::model::{Layer, ModelGraph, Op, QuantConfig, ScaleVector};
use quantcal::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let graph = ModelGraph::new(
        vec![2, 8],
        vec![
            Layer::new(
                "conv",
                Op::Conv1d {
                    weight: Tensor::new(
                        vec![3, 2, 3],
                        (0..18).map(|i| (i as f64 - 9.0) / 10.0).collect(),
                    )?,
                    bias: Some(Tensor::from_vec(vec![0.1, 0.0, -0.1])?),
                    stride: 1,
                    padding: 1,
                },
            ),
            Layer::new("act", Op::Gelu),
            Layer::new(
                "norm",
                Op::LayerNorm {
                    gamma: Tensor::from_vec(vec![1.0; 8])?,
                    beta: Tensor::zeros(vec![8])?,
                    eps: 1e-5,
                },
            ),
            Layer::new(
                "head",
                Op::Linear {
                    weight: Tensor::new(
                        vec![2, 8],
                        (0..16).map(|i| ((i * 7) % 5) as f64 / 4.0 - 0.5).collect(),
                    )?,
                    bias: None,
                },
            ),
        ],
    )?;

    let dir = tempfile_dir()?;
    let path = graph.save(dir.join("model.json"))?;
    let loaded = ModelGraph::load(&path)?;
    println!(
        "saved to {}, quantized layers {:?}",
        path.display(),
        loaded.quantized_names()
    );

    let x = Tensor::new(
        vec![2, 8],
        (0..16).map(|i| ((i as f64) * 0.7).sin()).collect(),
    )?;
    let (y, acts) = loaded.forward_fp(&x)?;
    println!("fp32 output shape {:?}: {:?}", y.shape(), y.data());

    let betas: Vec<f64> = acts.iter().map(Tensor::abs_max).collect();
    for bits in [8, 4] {
        let config = QuantConfig::new(&loaded, bits, bits)?;
        let scales = ScaleVector::from_betas(&betas, bits)?;
        let yq = loaded.forward_quant(&x, &scales, &config)?;
        println!(
            "{bits}-bit output: {:?} (mse {:.3e})",
            yq.data(),
            y.mse(&yq)?
        );
    }
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join("quantcal-custom-model");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

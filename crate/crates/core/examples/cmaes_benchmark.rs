//! CMA-ES on the sphere and Rosenbrock functions.

use quantcal::cmaes::{optimize, Budget, CmaOptions};

fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let runs: [(&str, fn(&[f64]) -> f64, Vec<f64>, f64, usize); 2] = [
        ("sphere 4D", sphere, vec![3.0, -2.0, 1.0, 4.0], 1.0, 4000),
        ("rosenbrock 2D", rosenbrock, vec![-1.2, 1.0], 0.5, 20_000),
    ];
    for (name, f, m0, sigma0, evals) in runs {
        let out = optimize(
            f,
            &m0,
            CmaOptions {
                sigma0,
                budget: Budget::new(evals),
                seed: 3,
                lambda: None,
            },
        )?;
        println!(
            "{name}: f(mean) = {:.3e} after {} evals, sigma {:.3e}",
            f(&out.mean),
            out.state.evals(),
            out.state.sigma()
        );
        for r in out.trace.iter().step_by((out.trace.len() / 5).max(1)) {
            println!(
                "  gen {:>4}  evals {:>6}  best {:.3e}",
                r.t, r.evals, r.best_f
            );
        }
    }
    Ok(())
}

//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quantcal::calib::{calibrate_entropy, calibrate_mse_range, calibrate_percentile, Histogram};
use quantcal::cmaes::{optimize, Budget, CmaOptions, CmaState};
use quantcal::esc::{esc_calibrate, evaluate, EscConfig, MULTIPLIER_FLOOR};
use quantcal::model::QuantConfig;
use quantcal::quant::{scale_from_range, QuantParams};
use quantcal::report::{self, all_methods, RunManifest};
use quantcal::synth::{synthesize, SynthTask};
use quantcal::Tensor;

use common::{entropy_oracle, mse_oracle, random_values, sort_percentile};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> QuantParams {
    let beta = 10f64.powf(rng.gen_range(-4.0..4.0));
    QuantParams::from_range(beta, rng.gen_range(2..=16)).unwrap()
}

fn quantizer_invariants() -> Outcome {
    const CASES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..CASES {
        let p = random_params(&mut rng);
        let span = 2.0 * p.beta();
        let r = rng.gen_range(-span..span);
        let once = p.fake_quantize_value(r);
        check(
            p.fake_quantize_value(once) == once,
            format!("idempotence case {i}"),
        )?;

        let (a, b) = (rng.gen_range(-span..span), rng.gen_range(-span..span));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        check(
            p.fake_quantize_value(lo) <= p.fake_quantize_value(hi),
            format!("monotonicity case {i}"),
        )?;

        let (qlo, qhi) = (p.qmin() as f64 * p.scale(), p.qmax() as f64 * p.scale());
        let inside = qlo + rng.gen::<f64>() * (qhi - qlo);
        let err = (p.fake_quantize_value(inside) - inside).abs();
        check(
            err <= p.scale() / 2.0 * (1.0 + 1e-12),
            format!("in-range error case {i}: {err}"),
        )?;

        check(p.fake_quantize_value(0.0) == 0.0, format!("zero case {i}"))?;
    }
    Ok(format!("{CASES} cases per property"))
}

fn scale_exactness() -> Outcome {
    let s = scale_from_range(1.27, 8).unwrap().scale();
    check(
        s.to_bits() == (2.54f64 / 255.0).to_bits(),
        format!("scale(1.27, 8) = {s:e}"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut exact = 0;
    for i in 0..1000 {
        let beta = 10f64.powf(rng.gen_range(-6.0..6.0));
        let bits = rng.gen_range(2u32..=16);
        let levels = ((1u64 << bits) - 1) as f64;
        let s = scale_from_range(beta, bits).unwrap().scale();
        let target = 2.0 * beta;
        if s * levels == target {
            exact += 1;
            continue;
        }
        let ulp = target.next_up() - target;
        check(
            (s * levels - target).abs() <= ulp,
            format!("case {i}: product off by more than one ulp"),
        )?;
        // the mismatch is a rounding artefact: no nearby f64 scale does better
        let mut other = s;
        for _ in 0..4 {
            other = other.next_down();
        }
        for _ in 0..9 {
            check(
                other * levels != target,
                format!("case {i}: scale {other:e} is exact, {s:e} is not"),
            )?;
            other = other.next_up();
        }
    }
    Ok(format!(
        "bit-exact reference scale; {exact}/1000 products exact, the rest within 1 ulp with no exact f64 scale nearby"
    ))
}

fn calibrator_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let n = rng.gen_range(1000..20_000);
        let values = random_values(&mut rng, n);
        let p = [99.0, 99.9, 99.99, 99.999][rng.gen_range(0..4)];
        let mut h = Histogram::new(2048);
        h.observe(&values);
        let oracle = sort_percentile(&values, p);
        let got = h.percentile(p).unwrap();
        check(
            (got - oracle).abs() <= h.bin_width() * (1.0 + 1e-9),
            format!("percentile case {i}"),
        )?;
        let exact = calibrate_percentile(&[Tensor::from_vec(values).unwrap()], p).unwrap();
        check(exact == oracle, format!("exact percentile case {i}"))?;
    }
    let mut entropy_cases = 0;
    while entropy_cases < 50 {
        let bins = rng.gen_range(8..=64);
        let bits = rng.gen_range(2..=4);
        let counts: Vec<u64> = (0..bins)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    0
                } else {
                    rng.gen_range(0..500)
                }
            })
            .collect();
        if counts.iter().all(|&c| c == 0) {
            continue;
        }
        let h = Histogram::from_counts(counts.clone(), 0.5);
        let beta = calibrate_entropy(&h, bits).unwrap();
        let clip = entropy_oracle(&counts, bits);
        check(
            beta == clip as f64 * 0.5,
            format!("entropy case {entropy_cases}: {counts:?}"),
        )?;
        entropy_cases += 1;
    }
    for i in 0..50 {
        let n = rng.gen_range(10..2000);
        let mut values = random_values(&mut rng, n);
        values.push(rng.gen_range(-100.0..100.0));
        let bits = rng.gen_range(2..=8);
        let got = calibrate_mse_range(&[Tensor::from_vec(values.clone()).unwrap()], bits).unwrap();
        check(got == mse_oracle(&values, bits), format!("mse case {i}"))?;
    }
    Ok("100 percentile, 50 entropy and 50 mse cases agree".into())
}

fn cma_benchmarks() -> Outcome {
    let opts = |sigma0, evals, seed| CmaOptions {
        sigma0,
        budget: Budget::new(evals),
        seed,
        lambda: None,
    };
    let sphere = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let rosen = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
    let mut worst_sphere = 0.0f64;
    for seed in 3..=6 {
        let out = optimize(sphere, &[3.0, -2.0, 1.0, 4.0], opts(1.0, 4000, seed))
            .map_err(|e| e.to_string())?;
        worst_sphere = worst_sphere.max(sphere(&out.mean));
    }
    check(worst_sphere < 1e-5, format!("sphere f = {worst_sphere:e}"))?;
    let mut worst_rosen = 0.0f64;
    for seed in 11..=13 {
        let out =
            optimize(rosen, &[-1.2, 1.0], opts(0.5, 20_000, seed)).map_err(|e| e.to_string())?;
        worst_rosen = worst_rosen.max(rosen(&out.mean));
    }
    check(
        worst_rosen < 1e-3,
        format!("rosenbrock f = {worst_rosen:e}"),
    )?;

    let c = DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.7]);
    let sigma = 0.5;
    let state = CmaState::new(&[0.3, -1.0], sigma, Some(100_000), 5)
        .and_then(|s| s.with_covariance(c.clone()))
        .map_err(|e| e.to_string())?;
    let xs = state.ask();
    let n = xs.len() as f64;
    let mean = [0, 1].map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n);
    let cov = DMatrix::from_fn(2, 2, |i, j| {
        xs.iter()
            .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
            .sum::<f64>()
            / (n - 1.0)
            / (sigma * sigma)
    });
    let mean_err = (mean[0] - 0.3).abs().max((mean[1] + 1.0).abs());
    let cov_err = (cov - c).abs().max();
    check(
        mean_err < 0.02 && cov_err < 0.05,
        format!("sampling mean err {mean_err:.4}, cov err {cov_err:.4}"),
    )?;
    Ok(format!(
        "sphere {worst_sphere:.1e}, rosenbrock {worst_rosen:.1e}, sampling mean err {mean_err:.4}, cov err {cov_err:.4}"
    ))
}

fn compare_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    synthesize(SynthTask::RegressionHeavytail, 17)
        .and_then(|a| a.write(&data))
        .map_err(|e| e.to_string())?;
    let run = |out: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let out_dir = tmp.path().join(out);
        let status = Command::new(env!("CARGO_BIN_EXE_quantcal"))
            .args(["compare", "--seed", "17", "--out", "out"])
            .arg("--model")
            .arg(data.join("model.json"))
            .arg("--calib")
            .arg(data.join("calib.json"))
            .arg("--eval")
            .arg(data.join("eval.json"))
            .current_dir(tmp.path())
            .output()
            .map_err(|e| e.to_string())?;
        check(
            status.status.success(),
            String::from_utf8_lossy(&status.stderr).into_owned(),
        )?;
        fs::rename(tmp.path().join("out"), &out_dir).map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for e in fs::read_dir(&out_dir).map_err(|e| e.to_string())? {
            let path = e.map_err(|e| e.to_string())?.path();
            files.push((
                path.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            ));
        }
        files.sort();
        Ok(files)
    };
    let (a, b) = (run("first")?, run("second")?);
    check(
        !a.is_empty() && a == b,
        "reports differ between runs".into(),
    )?;
    Ok(format!("{} report files byte-identical", a.len()))
}

fn heavy_tail_reproduction() -> Outcome {
    let art = synthesize(SynthTask::RegressionHeavytail, 17).map_err(|e| e.to_string())?;
    let run = |bits| {
        let cfg = EscConfig {
            seed: 17,
            ..EscConfig::with_bits(bits)
        };
        report::compare(
            RunManifest::new("compare", vec![], cfg),
            &art.model,
            &art.calibration,
            &art.evaluation,
            &all_methods(None),
        )
        .map_err(|e| e.to_string())
    };
    let err = |r: &report::CompareReport, m: &str| {
        r.rows
            .iter()
            .find(|row| row.method == m)
            .and_then(|row| row.eval_error)
            .unwrap_or(f64::NAN)
    };

    let r8 = run(8)?;
    for row in &r8.rows {
        if row.method == "entropy" {
            continue;
        }
        let rel = row.relative_to_fp.unwrap_or(f64::NAN);
        check(rel <= 1.05, format!("8-bit {} is {rel:.3}x FP", row.method))?;
    }
    let worst8 = r8
        .rows
        .iter()
        .filter(|r| r.method != "entropy")
        .filter_map(|r| r.relative_to_fp)
        .fold(0.0f64, f64::max);

    let r4 = run(4)?;
    let (max4, mse4, esc4) = (err(&r4, "max"), err(&r4, "mse"), err(&r4, "esc"));
    check(
        max4 >= 5.0 * mse4,
        format!("4-bit max {max4:.4} < 5x mse {mse4:.4}"),
    )?;
    check(esc4 <= mse4, format!("4-bit esc {esc4:.4} > mse {mse4:.4}"))?;
    Ok(format!(
        "8-bit worst {worst8:.3}x FP; 4-bit max/mse {:.2}, esc {esc4:.4} <= mse {mse4:.4}",
        max4 / mse4
    ))
}

fn esc_contract() -> Outcome {
    let art = synthesize(SynthTask::RegressionHeavytail, 17).map_err(|e| e.to_string())?;
    let cfg = EscConfig {
        seed: 17,
        ..EscConfig::with_bits(4)
    };
    let r = esc_calibrate(&art.model, &art.calibration, &cfg).map_err(|e| e.to_string())?;
    let cal = art.calibration.take(cfg.n).map_err(|e| e.to_string())?;
    let qc =
        QuantConfig::new(&art.model, cfg.weight_bits, cfg.act_bits).map_err(|e| e.to_string())?;
    let again =
        evaluate(&art.model, &r.final_scales, &cal, cfg.metric, &qc).map_err(|e| e.to_string())?;
    check(
        r.final_error.to_bits() == again.to_bits(),
        format!("{} != {again}", r.final_error),
    )?;
    let floor_ok = r
        .final_scales
        .scales()
        .iter()
        .zip(r.init_scales.scales())
        .all(|(s, s0)| *s >= s0 * MULTIPLIER_FLOOR && *s > 0.0);
    check(floor_ok, "a final scale is below the floor".into())?;

    let small = EscConfig { budget: 7, ..cfg };
    let skipped = esc_calibrate(&art.model, &art.calibration, &small).map_err(|e| e.to_string())?;
    check(
        !skipped.stage2_ran
            && skipped.final_scales == skipped.init_scales
            && !skipped.warnings.is_empty(),
        "stage 2 was not skipped at budget 7".into(),
    )?;
    Ok(format!(
        "final error {:.4} reproduced exactly; skip at budget 7 warns",
        r.final_error
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        (
            "quantizer invariants",
            Duration::from_secs(10),
            quantizer_invariants,
        ),
        ("scale exactness", Duration::from_secs(1), scale_exactness),
        (
            "calibrator oracles",
            Duration::from_secs(60),
            calibrator_oracles,
        ),
        ("CMA-ES benchmarks", Duration::from_secs(30), cma_benchmarks),
        (
            "compare determinism",
            Duration::from_secs(60),
            compare_determinism,
        ),
        (
            "heavy-tail reproduction",
            Duration::from_secs(300),
            heavy_tail_reproduction,
        ),
        ("ESC contract", Duration::from_secs(60), esc_contract),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|msg| {
            if elapsed <= *limit {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {elapsed:.1?}, limit {limit:?}"))
            }
        });
        match outcome {
            Ok(msg) => println!("PASS criterion {}: {name} ({elapsed:.2?}): {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({elapsed:.2?}): {msg}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

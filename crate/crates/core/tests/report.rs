use quantcal::report::{all_methods, compare, CompareReport, RunManifest};
use quantcal::synth::{synthesize, SynthTask};
use quantcal::EscConfig;

fn run(bits: u32) -> CompareReport {
    let art = synthesize(SynthTask::RegressionHeavytail, 17).unwrap();
    let cfg = EscConfig {
        seed: 17,
        ..EscConfig::with_bits(bits)
    };
    compare(
        RunManifest::new("compare", vec![], cfg),
        &art.model,
        &art.calibration,
        &art.evaluation,
        &all_methods(None),
    )
    .unwrap()
}

fn eval(r: &CompareReport, method: &str) -> f64 {
    r.rows
        .iter()
        .find(|row| row.method == method)
        .unwrap()
        .eval_error
        .unwrap()
}

#[test]
fn heavy_tail_method_ranking() {
    let r8 = run(8);
    assert_eq!(r8.rows.len(), 7);
    for row in r8.rows.iter().filter(|r| r.method != "entropy") {
        assert!(row.relative_to_fp.unwrap() <= 1.05, "{row:?}");
    }

    let r4 = run(4);
    let best_percentile = [
        "percentile_99.99",
        "percentile_99.999",
        "percentile_99.9999",
    ]
    .iter()
    .map(|m| eval(&r4, m))
    .fold(f64::INFINITY, f64::min);
    let (esc, mse, max) = (eval(&r4, "esc"), eval(&r4, "mse"), eval(&r4, "max"));
    assert!(
        esc <= mse && mse < best_percentile && best_percentile < max,
        "{:?}",
        r4.rows
    );
    assert_eq!(r4.rows[0].rank, Some(1));
    assert!(r4
        .rows
        .windows(2)
        .all(|w| w[0].eval_error <= w[1].eval_error));
}

use proptest::prelude::*;

use quantcal::quant::{dequantize, fake_quantize, quantize, scale_from_range, QuantParams};
use quantcal::Tensor;

fn params() -> impl Strategy<Value = QuantParams> {
    (1e-4f64..1e4, 2u32..=16).prop_map(|(beta, bits)| QuantParams::from_range(beta, bits).unwrap())
}

fn one(v: f64) -> Tensor {
    Tensor::from_vec(vec![v]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn fake_quantize_is_idempotent(p in params(), r in -2e4f64..2e4) {
        let once = p.fake_quantize_value(r);
        prop_assert_eq!(p.fake_quantize_value(once), once);
    }

    #[test]
    fn fake_quantize_is_monotone(p in params(), a in -2e4f64..2e4, b in -2e4f64..2e4) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(p.fake_quantize_value(lo) <= p.fake_quantize_value(hi));
    }

    #[test]
    fn in_range_error_is_at_most_half_a_step(p in params(), u in 0.0f64..=1.0) {
        let lo = p.qmin() as f64 * p.scale();
        let hi = p.qmax() as f64 * p.scale();
        let r = lo + u * (hi - lo);
        let err = (p.fake_quantize_value(r) - r).abs();
        prop_assert!(err <= p.scale() / 2.0 * (1.0 + 1e-12), "err {} step {}", err, p.scale());
    }

    #[test]
    fn integers_stay_in_range(p in params(), data in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
        let t = Tensor::from_vec(data).unwrap();
        let q = quantize(&t, &p);
        prop_assert!(q.data().iter().all(|&v| v >= p.qmin() && v <= p.qmax()));
        prop_assert_eq!(dequantize(&q, &p).unwrap(), fake_quantize(&t, &p));
    }

    #[test]
    fn scale_times_levels_recovers_range(beta in 1e-6f64..1e6, bits in 2u32..=16) {
        let p = scale_from_range(beta, bits).unwrap();
        let levels = ((1u64 << bits) - 1) as f64;
        // the scale is the correctly rounded quotient 2*beta / levels
        let residual = p.scale().mul_add(levels, -2.0 * beta);
        prop_assert!(residual.abs() <= 0.5 * levels * (p.scale().next_up() - p.scale()));
        let back = p.scale() * levels;
        prop_assert!((back - 2.0 * beta).abs() <= (2.0 * beta).next_up() - 2.0 * beta);
    }
}

#[test]
fn zero_is_a_fixed_point() {
    for bits in 2..=16 {
        let p = QuantParams::from_range(3.7, bits).unwrap();
        assert_eq!(p.fake_quantize_value(0.0), 0.0);
        assert_eq!(quantize(&one(0.0), &p).data(), &[0]);
    }
}

#[test]
fn reference_scale_is_bit_exact() {
    assert_eq!(
        scale_from_range(1.27, 8).unwrap().scale().to_bits(),
        (2.54f64 / 255.0).to_bits()
    );
}

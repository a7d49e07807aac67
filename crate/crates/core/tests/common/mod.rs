//! Brute-force oracles shared by the calibrator tests and the acceptance run.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

pub fn sorted_magnitudes(values: &[f64]) -> Vec<f64> {
    let mut m: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    m.sort_by(|a, b| a.partial_cmp(b).unwrap());
    m
}

/// k-th order statistic with k the smallest integer where k >= p/100 * n.
pub fn sort_percentile(values: &[f64], p: f64) -> f64 {
    let m = sorted_magnitudes(values);
    let n = m.len();
    let mut k = 1;
    while (k as f64) < p / 100.0 * n as f64 * (1.0 - 1e-12) {
        k += 1;
    }
    m[k.min(n) - 1]
}

/// KL(P || Q) for one clip, following the textbook construction.
pub fn kl_oracle(counts: &[u64], clip: usize, levels: usize) -> f64 {
    let mut p: Vec<f64> = counts[..clip].iter().map(|&c| c as f64).collect();
    let outliers: f64 = counts[clip..].iter().map(|&c| c as f64).sum();
    p[clip - 1] += outliers;

    let mut q = vec![0.0; clip];
    for g in 0..levels {
        let members: Vec<usize> = (0..clip).filter(|&j| j * levels / clip == g).collect();
        let mass: f64 = members.iter().map(|&j| counts[j] as f64).sum();
        let nonzero: Vec<usize> = members.iter().copied().filter(|&j| counts[j] > 0).collect();
        for &j in &nonzero {
            q[j] = mass / nonzero.len() as f64;
        }
    }
    let ps: f64 = p.iter().sum();
    let qs: f64 = q.iter().sum();
    let mut kl = 0.0;
    for j in 0..clip {
        if p[j] == 0.0 {
            continue;
        }
        if q[j] == 0.0 {
            return f64::INFINITY;
        }
        let (pj, qj) = (p[j] / ps, q[j] / qs);
        kl += pj * (pj / qj).ln();
    }
    kl
}

pub fn entropy_oracle(counts: &[u64], bits: u32) -> usize {
    let levels = 1usize << (bits - 1);
    let mut best = (levels, f64::INFINITY);
    for clip in levels..=counts.len() {
        let kl = kl_oracle(counts, clip, levels);
        if kl < best.1 {
            best = (clip, kl);
        }
    }
    best.0
}

pub fn fq(v: f64, beta: f64, bits: u32) -> f64 {
    let s = 2.0 * beta / ((1u64 << bits) - 1) as f64;
    let lo = -((1i64 << (bits - 1)) as f64);
    let hi = ((1i64 << (bits - 1)) - 1) as f64;
    (v / s).round_ties_even().clamp(lo, hi) * s
}

pub fn mse_oracle(values: &[f64], bits: u32) -> f64 {
    let absmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut best = (absmax, f64::INFINITY);
    for k in 1..=100 {
        let beta = k as f64 / 100.0 * absmax;
        let err: f64 = values
            .iter()
            .map(|&v| (v - fq(v, beta, bits)).powi(2))
            .sum();
        if err < best.1 {
            best = (beta, err);
        }
    }
    best.0
}

pub fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    match rng.gen_range(0..3) {
        0 => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        1 => {
            let t = StudentT::new(2.0).unwrap();
            (0..n).map(|_| t.sample(rng)).collect()
        }
        _ => (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
    }
}

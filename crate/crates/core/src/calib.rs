//! Baseline activation-range calibrators: Max, Percentile, Entropy (KL) and
//! MSE. Each consumes observed values and returns a clipping bound `beta`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{check_bits, QuantError, QuantParams};
use crate::tensor::Tensor;

/// Default number of histogram bins.
pub const DEFAULT_NUM_BINS: usize = 2048;

/// Above this many observed values the percentile is read from the
/// histogram instead of an exact sort.
pub const EXACT_PERCENTILE_LIMIT: usize = 1_000_000;

/// Number of candidates in the MSE range search.
pub const MSE_GRID_SIZE: usize = 100;

/// Percentiles evaluated when none is requested explicitly.
pub const DEFAULT_PERCENTILES: [f64; 3] = [99.99, 99.999, 99.9999];

/// Clipping bound assigned to layers whose observations are all zero.
pub const DEGENERATE_BETA: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("no observations")]
    Empty,
    #[error("all observations are zero; no positive range exists")]
    Degenerate,
    #[error("percentile must lie in (0, 100], got {0}")]
    InvalidPercentile(f64),
    #[error("candidate grid must have at least one point")]
    EmptyGrid,
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Histogram of absolute values with equal-width bins starting at zero.
///
/// The bin width is fixed by the first non-zero observation so that the
/// range exactly covers it; larger values later double the width (merging
/// bins pairwise) until they fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    bin_width: f64,
    counts: Vec<u64>,
    observed_abs_max: f64,
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new(DEFAULT_NUM_BINS)
    }
}

impl Histogram {
    pub fn new(num_bins: usize) -> Self {
        assert!(num_bins > 0, "histogram needs at least one bin");
        Self {
            bin_width: 0.0,
            counts: vec![0; num_bins],
            observed_abs_max: 0.0,
        }
    }

    /// Histogram with a preset bin width.
    pub fn with_bin_width(num_bins: usize, bin_width: f64) -> Self {
        assert!(bin_width > 0.0 && bin_width.is_finite());
        let mut h = Self::new(num_bins);
        h.bin_width = bin_width;
        h
    }

    /// Histogram from raw counts, for constructing known distributions.
    pub fn from_counts(counts: Vec<u64>, bin_width: f64) -> Self {
        assert!(!counts.is_empty());
        assert!(bin_width > 0.0 && bin_width.is_finite());
        let observed_abs_max = match counts.iter().rposition(|&c| c > 0) {
            Some(i) => (i + 1) as f64 * bin_width,
            None => 0.0,
        };
        Self {
            bin_width,
            counts,
            observed_abs_max,
        }
    }

    pub fn from_tensors(tensors: &[Tensor], num_bins: usize) -> Self {
        let mut h = Self::new(num_bins);
        for t in tensors {
            h.observe(t.data());
        }
        h
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn observed_abs_max(&self) -> f64 {
        self.observed_abs_max
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Upper edge of the last bin.
    pub fn range(&self) -> f64 {
        self.bin_width * self.num_bins() as f64
    }

    pub fn observe(&mut self, values: &[f64]) {
        let Some(max) = crate::tensor::abs_max(values) else {
            return;
        };
        let n = self.num_bins();
        if self.bin_width == 0.0 && max > 0.0 {
            let mut w = max / n as f64;
            if w * (n as f64) < max {
                w = w.next_up();
            }
            self.bin_width = w;
        }
        while max > self.range() {
            self.double_width();
        }
        self.observed_abs_max = self.observed_abs_max.max(max);
        for v in values {
            let idx = if self.bin_width == 0.0 {
                0
            } else {
                ((v.abs() / self.bin_width) as usize).min(n - 1)
            };
            self.counts[idx] += 1;
        }
    }

    fn double_width(&mut self) {
        let n = self.num_bins();
        let mut merged = vec![0u64; n];
        for (i, &c) in self.counts.iter().enumerate() {
            merged[i / 2] += c;
        }
        self.counts = merged;
        self.bin_width *= 2.0;
    }

    /// Upper edge of the first bin at which the cumulative count reaches
    /// `percentile / 100` of the total.
    pub fn percentile(&self, percentile: f64) -> Result<f64, CalibError> {
        check_percentile(percentile)?;
        let total = self.total();
        if total == 0 {
            return Err(CalibError::Empty);
        }
        if self.observed_abs_max == 0.0 {
            return Err(CalibError::Degenerate);
        }
        let rank = percentile_rank(percentile, total as usize) as u64;
        let mut cum = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            cum += c;
            if cum >= rank {
                return Ok((i + 1) as f64 * self.bin_width);
            }
        }
        Ok(self.range())
    }
}

fn check_percentile(p: f64) -> Result<(), CalibError> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(CalibError::InvalidPercentile(p))
    }
}

/// One-based rank of the `p`-th percentile among `n` sorted values:
/// the smallest `k` with `k >= p / 100 * n`. A relative slack of 1e-12
/// absorbs the representation error of decimal percentiles.
pub fn percentile_rank(p: f64, n: usize) -> usize {
    let target = p / 100.0 * n as f64;
    let k = (target - 1e-12 * target).ceil() as usize;
    k.clamp(1, n)
}

fn total_len(tensors: &[Tensor]) -> usize {
    tensors.iter().map(Tensor::len).sum()
}

fn observed_abs_max(tensors: &[Tensor]) -> Result<f64, CalibError> {
    if tensors.is_empty() {
        return Err(CalibError::Empty);
    }
    Ok(tensors.iter().map(Tensor::abs_max).fold(0.0, f64::max))
}

/// Max calibration: `beta` is the largest observed magnitude.
pub fn calibrate_max(tensors: &[Tensor]) -> Result<f64, CalibError> {
    let beta = observed_abs_max(tensors)?;
    if beta == 0.0 {
        return Err(CalibError::Degenerate);
    }
    Ok(beta)
}

/// Percentile calibration over raw observations.
///
/// Up to [`EXACT_PERCENTILE_LIMIT`] values the magnitudes are sorted and the
/// exact order statistic is returned; above it a default histogram is used.
pub fn calibrate_percentile(tensors: &[Tensor], percentile: f64) -> Result<f64, CalibError> {
    check_percentile(percentile)?;
    let n = total_len(tensors);
    if n == 0 {
        return Err(CalibError::Empty);
    }
    if n > EXACT_PERCENTILE_LIMIT {
        return Histogram::from_tensors(tensors, DEFAULT_NUM_BINS).percentile(percentile);
    }
    let mut mags: Vec<f64> = tensors
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.abs()))
        .collect();
    let k = percentile_rank(percentile, n);
    let (_, kth, _) = mags.select_nth_unstable_by(k - 1, f64::total_cmp);
    let beta = *kth;
    if beta == 0.0 {
        return Err(CalibError::Degenerate);
    }
    Ok(beta)
}

/// KL divergence of clipping the histogram after its first `clip` bins.
///
/// The reference distribution folds every count beyond the clip into the
/// last kept bin. The candidate distribution requantizes the kept bins
/// (without the folded outliers) into `levels` equal groups and spreads each
/// group's mass uniformly over its non-empty bins. Returns `+inf` when the
/// reference has mass where the candidate has none.
pub fn clip_divergence(counts: &[u64], clip: usize, levels: usize) -> f64 {
    debug_assert!(clip >= levels && clip <= counts.len());
    let kept = &counts[..clip];
    let outliers: u64 = counts[clip..].iter().sum();

    let mut group_sum = vec![0.0f64; levels];
    let mut group_nonzero = vec![0u64; levels];
    for (j, &c) in kept.iter().enumerate() {
        if c > 0 {
            let g = j * levels / clip;
            group_sum[g] += c as f64;
            group_nonzero[g] += 1;
        }
    }
    let q_total: f64 = kept.iter().map(|&c| c as f64).sum();
    let p_total = q_total + outliers as f64;
    if q_total == 0.0 {
        return f64::INFINITY;
    }

    let mut kl = 0.0;
    for (j, &c) in kept.iter().enumerate() {
        let p_count = if j == clip - 1 { c + outliers } else { c };
        if p_count == 0 {
            continue;
        }
        if c == 0 {
            return f64::INFINITY;
        }
        let g = j * levels / clip;
        let p = p_count as f64 / p_total;
        let q = group_sum[g] / group_nonzero[g] as f64 / q_total;
        kl += p * (p / q).ln();
    }
    kl
}

/// Entropy calibration: the clip bin count `c` in
/// `2^(bits-1) ..= num_bins` that minimizes [`clip_divergence`]; the first
/// minimum wins. Returns `c * bin_width`.
///
/// Histograms with fewer bins than quantization levels fall back to the
/// observed maximum.
pub fn calibrate_entropy(h: &Histogram, bits: u32) -> Result<f64, CalibError> {
    let bits = check_bits(bits)?;
    if h.total() == 0 {
        return Err(CalibError::Empty);
    }
    if h.observed_abs_max() == 0.0 {
        return Err(CalibError::Degenerate);
    }
    let levels = 1usize << (bits - 1);
    let n = h.num_bins();
    if n < levels {
        return Ok(h.observed_abs_max());
    }
    let mut best = (levels, f64::INFINITY);
    for clip in levels..=n {
        let kl = clip_divergence(h.counts(), clip, levels);
        if kl < best.1 {
            best = (clip, kl);
        }
    }
    Ok(best.0 as f64 * h.bin_width())
}

/// Scans `beta = k / grid * abs_max` for `k = 1..=grid` and returns the
/// first candidate with the smallest loss, along with that loss.
pub fn grid_search(
    abs_max: f64,
    grid: usize,
    mut loss: impl FnMut(f64) -> f64,
) -> Result<(f64, f64), CalibError> {
    if grid == 0 {
        return Err(CalibError::EmptyGrid);
    }
    if abs_max == 0.0 {
        return Err(CalibError::Degenerate);
    }
    let mut best = (abs_max, f64::INFINITY);
    for k in 1..=grid {
        let beta = k as f64 / grid as f64 * abs_max;
        let l = loss(beta);
        if l < best.1 {
            best = (beta, l);
        }
    }
    Ok(best)
}

/// Summed squared fake-quantization error of `tensors` at clip `beta`.
pub fn reconstruction_error(tensors: &[Tensor], params: &QuantParams) -> f64 {
    tensors
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| {
            let d = v - params.fake_quantize_value(v);
            d * d
        })
        .sum()
}

/// MSE calibration with the default 100-point grid.
pub fn calibrate_mse_range(tensors: &[Tensor], bits: u32) -> Result<f64, CalibError> {
    calibrate_mse_range_with_grid(tensors, bits, MSE_GRID_SIZE)
}

pub fn calibrate_mse_range_with_grid(
    tensors: &[Tensor],
    bits: u32,
    grid: usize,
) -> Result<f64, CalibError> {
    check_bits(bits)?;
    let abs_max = observed_abs_max(tensors)?;
    let (beta, _) = grid_search(abs_max, grid, |beta| {
        let p = QuantParams::from_range(beta, bits).expect("grid candidates are positive");
        reconstruction_error(tensors, &p)
    })?;
    Ok(beta)
}

/// A baseline calibration strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Calibrator {
    Max,
    Percentile { percentile: f64 },
    Entropy,
    Mse,
}

impl Calibrator {
    pub fn calibrate(&self, tensors: &[Tensor], bits: u32) -> Result<f64, CalibError> {
        match *self {
            Calibrator::Max => calibrate_max(tensors),
            Calibrator::Percentile { percentile } => calibrate_percentile(tensors, percentile),
            Calibrator::Entropy => {
                if tensors.is_empty() {
                    return Err(CalibError::Empty);
                }
                calibrate_entropy(&Histogram::from_tensors(tensors, DEFAULT_NUM_BINS), bits)
            }
            Calibrator::Mse => calibrate_mse_range(tensors, bits),
        }
    }
}

impl fmt::Display for Calibrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Calibrator::Max => f.write_str("max"),
            Calibrator::Percentile { percentile } => write!(f, "percentile_{percentile}"),
            Calibrator::Entropy => f.write_str("entropy"),
            Calibrator::Mse => f.write_str("mse"),
        }
    }
}

impl FromStr for Calibrator {
    type Err = String;

    /// Accepts `max`, `entropy`, `mse` and `percentile_<p>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Calibrator::Max),
            "entropy" => Ok(Calibrator::Entropy),
            "mse" => Ok(Calibrator::Mse),
            _ => s
                .strip_prefix("percentile_")
                .and_then(|p| p.parse::<f64>().ok())
                .map(|percentile| Calibrator::Percentile { percentile })
                .ok_or_else(|| format!("unknown calibrator '{s}'")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn observe_first_values() {
        let mut h = Histogram::default();
        h.observe(&[1.0, -1.0]);
        assert_eq!(h.total(), 2);
        let idx = h.counts().iter().position(|&c| c > 0).unwrap();
        assert_eq!(h.counts()[idx], 2);
        let lo = idx as f64 * h.bin_width();
        assert!(lo <= 1.0 && 1.0 <= lo + h.bin_width());
    }

    #[test]
    fn rebinning_preserves_total() {
        let mut h = Histogram::new(64);
        h.observe(&[0.1, 0.5, 1.0, -0.3]);
        let before = h.total();
        let width = h.bin_width();
        h.observe(&[10.0]);
        assert_eq!(h.total(), before + 1);
        assert!(h.range() >= 10.0);
        assert!(h.bin_width() >= 8.0 * width);
        assert_eq!(h.bin_width() / width, (h.bin_width() / width).round());
    }

    #[test]
    fn observing_twice_doubles_counts() {
        let data = [0.3, -0.7, 0.2, 0.9, -0.05];
        let mut once = Histogram::new(32);
        once.observe(&data);
        let mut twice = once.clone();
        twice.observe(&data);
        for (a, b) in once.counts().iter().zip(twice.counts()) {
            assert_eq!(2 * a, *b);
        }
    }

    #[test]
    fn zeros_before_range_is_known() {
        let mut h = Histogram::new(16);
        h.observe(&[0.0, 0.0]);
        assert_eq!(h.bin_width(), 0.0);
        h.observe(&[4.0]);
        assert_eq!(h.counts()[0], 2);
        assert_eq!(h.total(), 3);
        assert!(h.percentile(50.0).unwrap() > 0.0);
    }

    #[test]
    fn max_examples() {
        assert_eq!(calibrate_max(&[t(&[1.0, -5.0]), t(&[2.0])]).unwrap(), 5.0);
        assert_eq!(calibrate_max(&[t(&[0.0])]), Err(CalibError::Degenerate));
        assert_eq!(calibrate_max(&[]), Err(CalibError::Empty));
        let mut v = vec![0.5; 999];
        v.push(1000.0);
        assert_eq!(calibrate_max(&[t(&v)]).unwrap(), 1000.0);
    }

    #[test]
    fn percentile_on_unit_bins() {
        let mut h = Histogram::with_bin_width(128, 1.0);
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        h.observe(&values);
        // value 99 sits in bin [99, 100)
        assert_eq!(h.percentile(99.0).unwrap(), 100.0);
        assert_eq!(calibrate_percentile(&[t(&values)], 99.0).unwrap(), 99.0);
        assert!(h.percentile(100.0).unwrap() >= h.observed_abs_max());
        assert_eq!(h.percentile(0.0), Err(CalibError::InvalidPercentile(0.0)));
        assert_eq!(Histogram::new(8).percentile(50.0), Err(CalibError::Empty));
    }

    #[test]
    fn percentile_rank_handles_decimal_percentiles() {
        assert_eq!(percentile_rank(99.99, 10_000), 9999);
        assert_eq!(percentile_rank(99.999, 100_000), 99_999);
        assert_eq!(percentile_rank(100.0, 7), 7);
        assert_eq!(percentile_rank(1e-9, 7), 1);
    }

    #[test]
    fn entropy_uniform_keeps_full_range() {
        let h = Histogram::from_counts(vec![10; 64], 0.5);
        assert_eq!(calibrate_entropy(&h, 4).unwrap(), 32.0);
    }

    #[test]
    fn entropy_point_mass_takes_smallest_clip() {
        let mut counts = vec![0; 64];
        counts[0] = 1000;
        let h = Histogram::from_counts(counts, 0.25);
        assert_eq!(calibrate_entropy(&h, 4).unwrap(), 8.0 * 0.25);
    }

    #[test]
    fn entropy_small_histogram_falls_back_to_max() {
        let h = Histogram::from_counts(vec![1, 2, 3, 4], 1.0);
        assert_eq!(calibrate_entropy(&h, 8).unwrap(), h.observed_abs_max());
    }

    #[test]
    fn clip_divergence_is_infinite_when_last_kept_bin_is_empty() {
        let counts = [5, 5, 5, 0, 9];
        assert!(clip_divergence(&counts, 4, 2).is_infinite());
        assert!(clip_divergence(&counts, 5, 2).is_finite());
    }

    #[test]
    fn mse_range_examples() {
        let small: Vec<f64> = (1..=10)
            .flat_map(|k| [k as f64 / 10.0, -(k as f64) / 10.0])
            .collect();
        // a negative outlier is reached by level -8 from a smaller beta
        let mut v = small.clone();
        v.push(-50.0);
        let beta = calibrate_mse_range(&[t(&v)], 4).unwrap();
        assert!(beta < 50.0);
        // a positive one is already clipped to 7 * s by beta = absmax
        let mut v = small.clone();
        v.push(50.0);
        assert_eq!(calibrate_mse_range(&[t(&v)], 4).unwrap(), 50.0);

        let mut v: Vec<f64> = (0..20_000)
            .map(|k| ((k % 19) as f64 - 9.0) / 10.0)
            .collect();
        v.push(50.0);
        assert!(calibrate_mse_range(&[t(&v)], 4).unwrap() < 5.0);

        let single = calibrate_mse_range_with_grid(&[t(&v)], 4, 1).unwrap();
        assert_eq!(single, calibrate_max(&[t(&v)]).unwrap());

        assert_eq!(
            calibrate_mse_range(&[t(&[0.0, 0.0])], 4),
            Err(CalibError::Degenerate)
        );
    }

    #[test]
    fn calibrator_names_round_trip() {
        for c in [
            Calibrator::Max,
            Calibrator::Entropy,
            Calibrator::Mse,
            Calibrator::Percentile { percentile: 99.999 },
        ] {
            assert_eq!(c.to_string().parse::<Calibrator>().unwrap(), c);
        }
        assert!("median".parse::<Calibrator>().is_err());
    }
}

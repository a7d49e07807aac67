//! CMA-ES with an ask/tell interface.
//!
//! Update rules and default strategy parameters follow Hansen's CMA-ES
//! tutorial (2016):
//!
//! * `mu = floor(lambda / 2)`, weights `w_i ∝ ln(mu + 1/2) - ln(i)`, summing to 1
//! * `mu_eff = 1 / sum(w_i^2)`
//! * `c_sigma = (mu_eff + 2) / (n + mu_eff + 5)`
//! * `d_sigma = 1 + 2 max(0, sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma`
//! * `c_c = (4 + mu_eff / n) / (n + 4 + 2 mu_eff / n)`
//! * `c_1 = 2 / ((n + 1.3)^2 + mu_eff)`
//! * `c_mu = min(1 - c_1, 2 (mu_eff - 2 + 1 / mu_eff) / ((n + 2)^2 + mu_eff))`
//!
//! Sampling is `x_k = m + sigma * B D z_k` with `C = B D^2 B^T`. The normal
//! draws of generation `t` come from a ChaCha stream keyed by `(seed, t)`, so
//! `ask` is a pure function of the state.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmaError {
    #[error("initial step size must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("search space dimension must be at least 1")]
    ZeroDimension,
    #[error("population size must be at least 2, got {0}")]
    InvalidPopulation(usize),
    #[error("expected {expected} {what}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("fitness of candidate {0} is not finite")]
    NonFiniteFitness(usize),
    #[error("objective returned no finite value in generation {0}")]
    NoFiniteFitness(u64),
    #[error("budget of {budget} evaluations is smaller than one generation ({lambda})")]
    BudgetTooSmall { budget: usize, lambda: usize },
    #[error("covariance matrix is not positive definite after repair")]
    Covariance,
    #[error("step size diverged to {0}")]
    SigmaDiverged(f64),
}

/// Default population size `4 + floor(3 ln n)`.
pub fn default_population(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

/// Strategy constants derived from dimension and population size.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyParams {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    /// Expected norm of an `n`-dimensional standard normal vector.
    pub chi_n: f64,
}

impl StrategyParams {
    pub fn new(dim: usize, lambda: usize) -> Self {
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu =
            (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Self {
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

/// Search-distribution state.
#[derive(Debug, Clone)]
pub struct CmaState {
    params: StrategyParams,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    sigma: f64,
    p_c: DVector<f64>,
    p_sigma: DVector<f64>,
    /// Eigenvectors of `cov`.
    basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `cov`.
    axis_lengths: DVector<f64>,
    generation: u64,
    evals: usize,
    seed: u64,
}

impl CmaState {
    /// Identity covariance, zeroed paths. `lambda = None` picks
    /// [`default_population`].
    pub fn new(
        mean: &[f64],
        sigma0: f64,
        lambda: Option<usize>,
        seed: u64,
    ) -> Result<Self, CmaError> {
        if mean.is_empty() {
            return Err(CmaError::ZeroDimension);
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(CmaError::InvalidSigma(sigma0));
        }
        let n = mean.len();
        let lambda = lambda.unwrap_or_else(|| default_population(n));
        if lambda < 2 {
            return Err(CmaError::InvalidPopulation(lambda));
        }
        Ok(Self {
            params: StrategyParams::new(n, lambda),
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::identity(n, n),
            sigma: sigma0,
            p_c: DVector::zeros(n),
            p_sigma: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
            axis_lengths: DVector::from_element(n, 1.0),
            generation: 0,
            evals: 0,
            seed,
        })
    }

    /// Replaces the covariance matrix, e.g. to start from a known shape.
    pub fn with_covariance(mut self, cov: DMatrix<f64>) -> Result<Self, CmaError> {
        let n = self.dim();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(CmaError::LengthMismatch {
                what: "covariance rows",
                expected: n,
                actual: cov.nrows(),
            });
        }
        self.cov = cov;
        self.refresh_decomposition()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn lambda(&self) -> usize {
        self.params.lambda
    }

    pub fn params(&self) -> &StrategyParams {
        &self.params
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn evals(&self) -> usize {
        self.evals
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// True once a step of `0.2 σ sqrt(C_ii)` no longer changes some
    /// coordinate of the mean in floating point; further updates would
    /// only feed rounding noise into the covariance.
    pub fn no_effect_coordinate(&self) -> bool {
        (0..self.dim()).any(|i| {
            let m = self.mean[i];
            m + 0.2 * self.sigma * self.cov[(i, i)].sqrt() == m
        })
    }

    /// Draws the population for the current generation.
    pub fn ask(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.generation);
        (0..self.params.lambda)
            .map(|_| {
                let z = DVector::from_fn(n, |i, _| {
                    let s: f64 = StandardNormal.sample(&mut rng);
                    s * self.axis_lengths[i]
                });
                let y = &self.basis * z;
                (&self.mean + y * self.sigma).as_slice().to_vec()
            })
            .collect()
    }

    /// Updates mean, paths, covariance and step size from evaluated
    /// candidates (lower fitness is better). Ties keep candidate order.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitness: &[f64]) -> Result<(), CmaError> {
        let p = &self.params;
        let n = self.dim();
        if candidates.len() != p.lambda {
            return Err(CmaError::LengthMismatch {
                what: "candidates",
                expected: p.lambda,
                actual: candidates.len(),
            });
        }
        if fitness.len() != p.lambda {
            return Err(CmaError::LengthMismatch {
                what: "fitness values",
                expected: p.lambda,
                actual: fitness.len(),
            });
        }
        if let Some(i) = fitness.iter().position(|f| !f.is_finite()) {
            return Err(CmaError::NonFiniteFitness(i));
        }
        if let Some(c) = candidates.iter().find(|c| c.len() != n) {
            return Err(CmaError::LengthMismatch {
                what: "candidate coordinates",
                expected: n,
                actual: c.len(),
            });
        }

        let mut order: Vec<usize> = (0..p.lambda).collect();
        order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));

        let steps: Vec<DVector<f64>> = order[..p.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &self.mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(n);
        for (w, y) in p.weights.iter().zip(&steps) {
            y_w += y * *w;
        }
        self.mean += &y_w * self.sigma;

        // C^{-1/2} y_w = B D^{-1} B^T y_w
        let whitened = {
            let mut coords = self.basis.transpose() * &y_w;
            coords.component_div_assign(&self.axis_lengths);
            &self.basis * coords
        };
        self.p_sigma = &self.p_sigma * (1.0 - p.c_sigma)
            + whitened * (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
        let ps_norm = self.p_sigma.norm();
        let gen = (self.generation + 1) as i32;
        let h_sigma = ps_norm / (1.0 - (1.0 - p.c_sigma).powi(2 * gen)).sqrt()
            < (1.4 + 2.0 / (n as f64 + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };

        self.p_c =
            &self.p_c * (1.0 - p.c_c) + &y_w * (h * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(n, n);
        for (w, y) in p.weights.iter().zip(&steps) {
            rank_mu += (y * y.transpose()) * *w;
        }
        let decay = 1.0 - p.c_1 - p.c_mu + (1.0 - h) * p.c_1 * p.c_c * (2.0 - p.c_c);
        self.cov =
            &self.cov * decay + (&self.p_c * self.p_c.transpose()) * p.c_1 + rank_mu * p.c_mu;

        self.sigma *= ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(CmaError::SigmaDiverged(self.sigma));
        }

        self.generation += 1;
        self.evals += p.lambda;
        self.refresh_decomposition()
    }

    /// Symmetrizes `cov` and recomputes its eigendecomposition. A failed
    /// decomposition is retried once after adding `1e-12 * trace / n` to
    /// the diagonal.
    fn refresh_decomposition(&mut self) -> Result<(), CmaError> {
        let n = self.dim();
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        for attempt in 0..2 {
            let eig = SymmetricEigen::new(self.cov.clone());
            let ok = eig.eigenvalues.iter().all(|&v| v > 0.0 && v.is_finite())
                && eig.eigenvectors.iter().all(|v| v.is_finite());
            if ok {
                self.basis = eig.eigenvectors;
                self.axis_lengths = eig.eigenvalues.map(f64::sqrt);
                return Ok(());
            }
            if attempt == 0 {
                let jitter = 1e-12 * self.cov.trace() / n as f64;
                if !(jitter > 0.0 && jitter.is_finite()) {
                    break;
                }
                for i in 0..n {
                    self.cov[(i, i)] += jitter;
                }
            }
        }
        Err(CmaError::Covariance)
    }
}

/// Maximum number of objective evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_evals: usize,
}

impl Budget {
    pub fn new(max_evals: usize) -> Self {
        Self { max_evals }
    }

    /// Number of generations run: `ceil(max_evals / lambda)`.
    pub fn generations(&self, lambda: usize) -> usize {
        self.max_evals.div_ceil(lambda)
    }
}

/// One line of the optimizer trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub evals: usize,
    pub sigma: f64,
    /// Best fitness seen so far.
    pub best_f: f64,
    /// Mean fitness of this generation's population.
    pub mean_f: f64,
}

#[derive(Debug, Clone)]
pub struct CmaOutcome {
    /// Mean of the final search distribution.
    pub mean: Vec<f64>,
    /// Best sampled candidate and its fitness.
    pub best: (Vec<f64>, f64),
    /// `(evals, best_f)` after every generation; `best_f` never increases.
    pub history: Vec<(usize, f64)>,
    pub trace: Vec<TraceRecord>,
    pub state: CmaState,
    /// The loop stopped before the budget because the distribution had
    /// collapsed below floating-point resolution of the mean.
    pub converged: bool,
}

/// Options for [`optimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmaOptions {
    pub sigma0: f64,
    pub budget: Budget,
    pub seed: u64,
    pub lambda: Option<usize>,
}

/// Replaces non-finite fitness values by the worst finite value of the
/// population plus ten times the population's finite spread.
fn sanitize(fitness: &mut [f64], generation: u64) -> Result<(), CmaError> {
    let finite = fitness.iter().copied().filter(|f| f.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
        (lo.min(f), hi.max(f))
    });
    if !hi.is_finite() {
        return Err(CmaError::NoFiniteFitness(generation));
    }
    let spread = hi - lo;
    let penalty = if spread > 0.0 {
        10.0 * spread
    } else {
        10.0 * hi.abs().max(1.0)
    };
    for f in fitness.iter_mut().filter(|f| !f.is_finite()) {
        *f = hi + penalty;
    }
    Ok(())
}

/// Minimizes `objective` until at least `budget.max_evals` evaluations have
/// been spent or the search distribution has collapsed, returning the final distribution mean rather than the best
/// sample. The population of each generation is evaluated in parallel and
/// re-associated by index.
pub fn optimize<F>(objective: F, m0: &[f64], options: CmaOptions) -> Result<CmaOutcome, CmaError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut state = CmaState::new(m0, options.sigma0, options.lambda, options.seed)?;
    let lambda = state.lambda();
    if options.budget.max_evals < lambda {
        return Err(CmaError::BudgetTooSmall {
            budget: options.budget.max_evals,
            lambda,
        });
    }

    let mut best: (Vec<f64>, f64) = (m0.to_vec(), f64::INFINITY);
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    while state.evals() < options.budget.max_evals {
        if state.no_effect_coordinate() {
            converged = true;
            break;
        }
        let candidates = state.ask();
        let mut fitness: Vec<f64> = candidates.par_iter().map(|x| objective(x)).collect();
        for (x, &f) in candidates.iter().zip(&fitness) {
            if f.is_finite() && f < best.1 {
                best = (x.clone(), f);
            }
        }
        sanitize(&mut fitness, state.generation())?;
        let mean_f = fitness.iter().sum::<f64>() / fitness.len() as f64;
        state.tell(&candidates, &fitness)?;

        history.push((state.evals(), best.1));
        trace.push(TraceRecord {
            t: state.generation(),
            evals: state.evals(),
            sigma: state.sigma(),
            best_f: best.1,
            mean_f,
        });
    }

    Ok(CmaOutcome {
        mean: state.mean().to_vec(),
        best,
        history,
        trace,
        state,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn init_defaults() {
        let s = CmaState::new(&[0.0; 5], 0.1, None, 1).unwrap();
        assert_eq!(s.lambda(), 8);
        let s = CmaState::new(&[0.0, 0.0], 0.1, None, 1).unwrap();
        assert_eq!(s.covariance(), &DMatrix::identity(2, 2));
        assert_eq!(s.sigma(), 0.1);
        assert_eq!(
            CmaState::new(&[0.0], 0.0, None, 1).unwrap_err(),
            CmaError::InvalidSigma(0.0)
        );
        assert_eq!(
            CmaState::new(&[], 1.0, None, 1).unwrap_err(),
            CmaError::ZeroDimension
        );
    }

    #[test]
    fn weights_are_normalized_and_decreasing() {
        let p = StrategyParams::new(10, 10);
        assert_eq!(p.mu, 5);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.weights.windows(2).all(|w| w[0] > w[1]));
        assert!(p.c_1 + p.c_mu <= 1.0);
    }

    #[test]
    fn ask_is_deterministic() {
        let s = CmaState::new(&[1.0, -2.0, 0.5], 0.3, None, 99).unwrap();
        assert_eq!(s.ask(), s.ask());
        let other = CmaState::new(&[1.0, -2.0, 0.5], 0.3, None, 100).unwrap();
        assert_ne!(s.ask(), other.ask());
    }

    #[test]
    fn tiny_sigma_collapses_samples() {
        let m = [3.0, -1.0];
        let s = CmaState::new(&m, 1e-300, None, 5).unwrap();
        for x in s.ask() {
            assert_eq!(x, m.to_vec());
        }
    }

    #[test]
    fn equal_fitness_uses_candidate_order() {
        let mut s = CmaState::new(&[0.0, 0.0], 1.0, Some(4), 3).unwrap();
        let xs = s.ask();
        s.tell(&xs, &[1.0; 4]).unwrap();
        let w = StrategyParams::new(2, 4).weights;
        let expected: Vec<f64> = (0..2).map(|j| w[0] * xs[0][j] + w[1] * xs[1][j]).collect();
        for (a, b) in s.mean().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tell_validates_input() {
        let mut s = CmaState::new(&[0.0, 0.0], 1.0, Some(4), 3).unwrap();
        let xs = s.ask();
        assert!(matches!(
            s.tell(&xs, &[1.0; 3]),
            Err(CmaError::LengthMismatch { .. })
        ));
        assert_eq!(
            s.tell(&xs, &[1.0, f64::NAN, 0.0, 2.0]),
            Err(CmaError::NonFiniteFitness(1))
        );
        assert_eq!(s.evals(), 0);
        s.tell(&xs, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.evals(), 4);
        assert_eq!(s.generation(), 1);
    }

    #[test]
    fn covariance_stays_symmetric() {
        let mut s = CmaState::new(&[2.0, -1.0, 0.5], 0.7, None, 11).unwrap();
        for _ in 0..30 {
            let xs = s.ask();
            let f: Vec<f64> = xs
                .iter()
                .map(|x| x[0] * x[0] + 10.0 * x[1] * x[1] + x[0] * x[2])
                .collect();
            s.tell(&xs, &f).unwrap();
            let c = s.covariance();
            assert_eq!((c - c.transpose()).amax(), 0.0);
        }
    }

    #[test]
    fn single_generation_budget() {
        let opts = CmaOptions {
            sigma0: 0.5,
            budget: Budget::new(8),
            seed: 1,
            lambda: Some(8),
        };
        let out = optimize(sphere, &[1.0; 5], opts).unwrap();
        assert_eq!(out.state.generation(), 1);
        assert_eq!(out.state.evals(), 8);
    }

    #[test]
    fn budget_smaller_than_population_is_rejected() {
        let opts = CmaOptions {
            sigma0: 0.5,
            budget: Budget::new(3),
            seed: 1,
            lambda: None,
        };
        assert!(matches!(
            optimize(sphere, &[1.0; 5], opts),
            Err(CmaError::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn non_finite_objective_values_are_penalized() {
        let mut f = vec![1.0, f64::NAN, 3.0, f64::INFINITY];
        sanitize(&mut f, 0).unwrap();
        assert_eq!(f, vec![1.0, 23.0, 3.0, 23.0]);
        let mut all_bad = vec![f64::NAN; 3];
        assert!(sanitize(&mut all_bad, 2).is_err());

        let opts = CmaOptions {
            sigma0: 0.5,
            budget: Budget::new(400),
            seed: 4,
            lambda: None,
        };
        let guarded = |x: &[f64]| if x[0] > 2.0 { f64::NAN } else { sphere(x) };
        let out = optimize(guarded, &[1.0, 1.0], opts).unwrap();
        assert!(sphere(&out.mean) < 1e-3);
    }
}

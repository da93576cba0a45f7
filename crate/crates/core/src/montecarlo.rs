//! Path simulation under the market law and Monte Carlo estimates of expected
//! exponential utility.
//!
//! Paths are drawn from the exact discrete law at the grid nodes via a Cholesky
//! factor of the node covariance. Path `k` uses its own ChaCha stream derived
//! from `(seed, k)`, so results do not depend on how the work is scheduled.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::market::{MarketSpec, PreparedMarket};
use crate::solver::{LinearStrategy, OptimalSolution};
use crate::stats::mean_and_std_error;
use crate::timegrid::{DelayIndex, TimeGrid};

/// Exponents above this are clamped before exponentiation.
pub const EXPONENT_CLAMP: f64 = 700.0;

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    /// Row-major, `n_paths × (N + 1)`.
    paths: Vec<f64>,
    /// Lower Cholesky factor of the covariance over nodes `1..=N`.
    factor: DMatrix<f64>,
}

/// Draws `m` paths of the law given by `pm`'s market.
pub fn sample_paths(pm: &PreparedMarket, m: usize, seed: u64) -> Result<PathEnsemble> {
    sample_paths_from_spec(pm.spec(), m, seed)
}

/// Draws `m` paths of standard Brownian motion on `grid`.
pub fn sample_wiener(grid: TimeGrid, m: usize, seed: u64) -> Result<PathEnsemble> {
    let spec = MarketSpec::new(vec![0.0; grid.n_steps()], Kernel::zeros(grid))?;
    sample_paths_from_spec(&spec, m, seed)
}

pub fn sample_paths_from_spec(spec: &MarketSpec, m: usize, seed: u64) -> Result<PathEnsemble> {
    if m == 0 {
        return Err(Error::InvalidParameter("an ensemble needs at least one path".into()));
    }
    let grid = *spec.grid();
    let n = grid.n_steps();
    let cov = spec.covariance_matrix()?;
    let inner = cov.view((1, 1), (n, n)).into_owned();
    let factor = inner
        .cholesky()
        .ok_or(Error::Conditioning {
            min_eigenvalue: f64::NAN,
        })?
        .unpack();
    let mean = spec.mean_vector();
    let mut paths = vec![0.0; m * (n + 1)];
    paths.par_chunks_mut(n + 1).enumerate().for_each(|(k, row)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        row[0] = 0.0;
        for i in 0..n {
            let l = factor.row(i);
            let mut acc = 0.0;
            for (c, zc) in z.iter().enumerate().take(i + 1) {
                acc += l[c] * zc;
            }
            row[i + 1] = mean[i + 1] + acc;
        }
    });
    Ok(PathEnsemble {
        grid,
        n_paths: m,
        seed,
        paths,
        factor,
    })
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Values `X_{t_0}, ..., X_{t_N}` of path `k`.
    pub fn path(&self, k: usize) -> &[f64] {
        let w = self.grid.n_steps() + 1;
        &self.paths[k * w..(k + 1) * w]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.paths.chunks(self.grid.n_steps() + 1)
    }

    /// Sample mean and sample variance of `X_{t_i}` across paths.
    pub fn node_moments(&self, i: usize) -> (f64, f64) {
        let xs: Vec<f64> = self.paths().map(|p| p[i]).collect();
        let (mean, se) = mean_and_std_error(&xs);
        (mean, se * se * self.n_paths as f64)
    }

    /// Applies `eval` to the increments of every path, in parallel, keeping path order.
    pub fn map_increments<T: Send>(&self, eval: impl Fn(&[f64]) -> T + Sync) -> Vec<T> {
        let w = self.grid.n_steps() + 1;
        self.paths
            .par_chunks(w)
            .map_init(
                || vec![0.0; w - 1],
                |dx, p| {
                    for (d, pair) in dx.iter_mut().zip(p.windows(2)) {
                        *d = pair[1] - pair[0];
                    }
                    eval(dx)
                },
            )
            .collect()
    }
}

/// `Σ_i integrand(i) (path(i+1) − path(i))`.
pub fn ito_integral(integrand: &[f64], path: &[f64]) -> Result<f64> {
    if path.len() != integrand.len() + 1 {
        return Err(Error::Shape(format!(
            "integrand has {} values, path needs {} but has {}",
            integrand.len(),
            integrand.len() + 1,
            path.len()
        )));
    }
    Ok(integrand.iter().zip(path.windows(2)).map(|(g, w)| g * (w[1] - w[0])).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilityEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub alpha: f64,
    /// Paths whose exponent hit [`EXPONENT_CLAMP`].
    pub n_clamped: usize,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::domain("alpha", alpha, "(0, inf)"));
    }
    Ok(())
}

fn utilities(wealth: &[f64], alpha: f64) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let u = wealth
        .iter()
        .map(|w| {
            let e = -alpha * w;
            if e > EXPONENT_CLAMP {
                clamped += 1;
            }
            -e.min(EXPONENT_CLAMP).exp()
        })
        .collect();
    (u, clamped)
}

fn estimate_from_wealth(wealth: &[f64], alpha: f64) -> UtilityEstimate {
    let (u, n_clamped) = utilities(wealth, alpha);
    let (mean, std_error) = mean_and_std_error(&u);
    UtilityEstimate {
        mean,
        std_error,
        n_paths: wealth.len(),
        alpha,
        n_clamped,
    }
}

fn check_ensemble(n: usize, ens: &PathEnsemble) -> Result<()> {
    if ens.grid().n_steps() != n {
        return Err(Error::Shape(format!(
            "strategy has {n} steps, ensemble {}",
            ens.grid().n_steps()
        )));
    }
    Ok(())
}

/// Per-path wealth `Σ_i γ_i ΔX_i` of `strategy`.
pub fn strategy_wealth(strategy: &LinearStrategy, ens: &PathEnsemble) -> Result<Vec<f64>> {
    check_ensemble(strategy.n_steps(), ens)?;
    Ok(ens.map_increments(|dx| strategy.wealth(dx)))
}

/// `E[−exp(−α ∫ γ dX)]` for `γ = strategy / α`.
pub fn estimate_strategy_utility(strategy: &LinearStrategy, ens: &PathEnsemble, alpha: f64) -> Result<UtilityEstimate> {
    check_alpha(alpha)?;
    let wealth: Vec<f64> = strategy_wealth(strategy, ens)?.into_iter().map(|w| w / alpha).collect();
    Ok(estimate_from_wealth(&wealth, alpha))
}

/// Per-path utilities `−exp(−α ∫ γ dX)` for `γ = strategy / α`, clamped like
/// the estimates.
pub fn utility_samples(strategy: &LinearStrategy, ens: &PathEnsemble, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let wealth: Vec<f64> = strategy_wealth(strategy, ens)?.into_iter().map(|w| w / alpha).collect();
    Ok(utilities(&wealth, alpha).0)
}

/// Expected utility of the optimal strategy `γ̂ / α` under risk aversion `α`.
pub fn estimate_utility(
    pm: &PreparedMarket,
    sol: &OptimalSolution,
    ens: &PathEnsemble,
    alpha: f64,
) -> Result<UtilityEstimate> {
    let strategy = LinearStrategy::optimal(sol, pm.a())?;
    estimate_strategy_utility(&strategy, ens, alpha)
}

/// Random perturbation directions: intercepts and kernel entries are iid
/// standard normal, the kernel masked to the support allowed by `index`.
pub fn random_perturbations(grid: &TimeGrid, index: &DelayIndex, count: usize, seed: u64) -> Result<Vec<LinearStrategy>> {
    let n = grid.n_steps();
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let intercept: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let mut values = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..index.kappa_row_len(i).min(i) {
                    values[(i, j)] = rng.sample(StandardNormal);
                }
            }
            LinearStrategy::new(intercept, &Kernel::new(*grid, values)?, index)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationOutcome {
    pub direction: usize,
    pub magnitude: f64,
    pub estimate: UtilityEstimate,
    /// Optimal minus perturbed estimate; negative means the perturbation did better.
    pub gap: f64,
    pub combined_std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    pub optimum: UtilityEstimate,
    pub outcomes: Vec<PerturbationOutcome>,
    /// Number of combined standard errors a perturbation may win by.
    pub tolerance_se: f64,
    pub pass: bool,
}

/// Compares `γ̂ + m η` against `γ̂` on a common ensemble for every direction
/// `η` and magnitude `m`, at risk aversion one.
pub fn perturbation_test(
    pm: &PreparedMarket,
    sol: &OptimalSolution,
    ens: &PathEnsemble,
    perturbations: &[LinearStrategy],
    magnitudes: &[f64],
) -> Result<PerturbationReport> {
    const TOL_SE: f64 = 3.0;
    let optimal = LinearStrategy::optimal(sol, pm.a())?;
    let w_opt = strategy_wealth(&optimal, ens)?;
    let optimum = estimate_from_wealth(&w_opt, 1.0);
    let mut outcomes = Vec::new();
    for (d, eta) in perturbations.iter().enumerate() {
        // wealth is linear in the strategy, so each direction is simulated once
        let w_eta = strategy_wealth(eta, ens)?;
        for &m in magnitudes {
            if !m.is_finite() {
                return Err(Error::domain("magnitude", m, "finite"));
            }
            let w: Vec<f64> = w_opt.iter().zip(&w_eta).map(|(a, b)| a + m * b).collect();
            let estimate = estimate_from_wealth(&w, 1.0);
            let gap = optimum.mean - estimate.mean;
            let combined = optimum.std_error.hypot(estimate.std_error);
            outcomes.push(PerturbationOutcome {
                direction: d,
                magnitude: m,
                estimate,
                gap,
                combined_std_error: combined,
                pass: gap >= -TOL_SE * combined,
            });
        }
    }
    let pass = outcomes.iter().all(|o| o.pass);
    Ok(PerturbationReport {
        optimum,
        outcomes,
        tolerance_se: TOL_SE,
        pass,
    })
}

/// Sample mean and standard error of `exp(log dP/dW)` over `ens`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormalizationCheck {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub pass: bool,
}

/// With `ens` drawn from Wiener measure, the density of `pm`'s law should
/// average to one.
pub fn rn_normalization(pm: &PreparedMarket, ens: &PathEnsemble) -> Result<NormalizationCheck> {
    check_ensemble(pm.grid().n_steps(), ens)?;
    let dens = ens.map_increments(|dx| pm.log_rn_from_increments(dx).min(EXPONENT_CLAMP).exp());
    let (mean, std_error) = mean_and_std_error(&dens);
    Ok(NormalizationCheck {
        mean,
        std_error,
        n_paths: ens.n_paths(),
        pass: (mean - 1.0).abs() <= 3.0 * std_error,
    })
}

//! The optimal pair `(κ, g)`, the optimal strategy and the optimal value.
//!
//! `κ` is a Volterra kernel supported on `t ≥ τ⁻¹(s)`, `g` a symmetric kernel
//! supported on `t < τ⁻¹(s)`, and together they solve
//!
//! ```text
//! f(t,s) − κ(t,s) + g(t,s) = ∫ₛᵀ (f(t,u) − κ(t,u)) g(u,s) du,   0 ≤ s ≤ t ≤ T.
//! ```
//!
//! Inside the `g` window the equation is a Fredholm equation of the second kind
//! for each column `g(·, s)`; outside it is a Volterra equation for each row
//! `κ(t, ·)`, solved by back-substitution in `s`. The optimal strategy is
//! `γ̂_t = a(t) + ∫₀ᵗ κ(t,s) dX_s` and the optimal expected utility is
//! `−exp(c − ∫∫_{u<s} f g̃ − ½ ∫∫_{u<s} g²)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{Kernel, WindowFactor, SPECTRAL_MARGIN};
use crate::market::PreparedMarket;
use crate::timegrid::{DelayIndex, DelayMap, TimeGrid};

/// How the per-column Fredholm systems are factorized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowMethod {
    /// One Cholesky factor updated as the window slides, `O(L²)` per column.
    #[default]
    Sliding,
    /// A fresh dense factorization of every window, `O(L³)` per column.
    Direct,
    /// Dense factorization with the window indices eliminated in reverse order.
    DirectReversed,
}

/// Column `j` of a column-major matrix as a slice.
fn col(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[j * n..(j + 1) * n]
}

fn check_index(grid: &TimeGrid, index: &DelayIndex) -> Result<()> {
    if index.n_steps() != grid.n_steps() {
        return Err(Error::Shape(format!(
            "delay index has {} steps, grid {}",
            index.n_steps(),
            grid.n_steps()
        )));
    }
    Ok(())
}

fn check_f_spectrum(pm: &PreparedMarket) -> Result<()> {
    // every window block is a principal submatrix, so by interlacing the
    // full-operator bound covers all windows
    let top = pm.eigenvalues().first().copied().unwrap_or(0.0);
    if top >= 1.0 - SPECTRAL_MARGIN {
        return Err(Error::SpectrumViolation {
            context: "Fredholm windows of f".into(),
            eigenvalue: top,
            bound: 1.0 - SPECTRAL_MARGIN,
        });
    }
    Ok(())
}

/// Solves `(I − F_s) g(·, s) = −f(·, s)` on every window `[s, τ⁻¹(s))`.
pub fn solve_g(pm: &PreparedMarket, delay: &DelayMap) -> Result<Kernel> {
    solve_g_with(pm, delay, WindowMethod::default())
}

pub fn solve_g_with(pm: &PreparedMarket, delay: &DelayMap, method: WindowMethod) -> Result<Kernel> {
    solve_g_indexed(pm, &delay.index(pm.grid())?, method)
}

/// [`solve_g_with`] on a precomputed grid-level inverse.
pub fn solve_g_indexed(pm: &PreparedMarket, index: &DelayIndex, method: WindowMethod) -> Result<Kernel> {
    let grid = *pm.grid();
    check_index(&grid, index)?;
    check_f_spectrum(pm)?;
    let f = pm.f();
    let n = grid.n_steps();
    let window = |j: usize| (j, index.inverse(j).min(n));

    let columns: Vec<Vec<f64>> = match method {
        WindowMethod::Sliding => {
            let cap = (0..n).map(|j| window(j).1 - j).max().unwrap_or(0);
            let mut factor = WindowFactor::new(f, cap);
            let mut cols = Vec::with_capacity(n);
            for j in 0..n {
                let (lo, hi) = window(j);
                let rhs: Vec<f64> = col(f.values(), j)[lo..hi].iter().map(|v| -v).collect();
                factor.advance_to(lo, hi)?;
                let mut x = factor.solve(&rhs);
                let r = window_residual(f, &x, &rhs, lo);
                let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
                if rnorm > 1e-8 * bnorm.max(f64::MIN_POSITIVE) {
                    // accumulated update error; refactor this window from scratch
                    factor.advance_to(hi, hi)?;
                    factor.advance_to(lo, hi)?;
                    x = factor.solve(&rhs);
                    let r = window_residual(f, &x, &rhs, lo);
                    let dx = factor.solve(&r);
                    x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                } else {
                    let dx = factor.solve(&r);
                    x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
                cols.push(x);
            }
            cols
        }
        WindowMethod::Direct | WindowMethod::DirectReversed => (0..n)
            .into_par_iter()
            .map(|j| {
                let (lo, hi) = window(j);
                let rhs: Vec<f64> = col(f.values(), j)[lo..hi].iter().map(|v| -v).collect();
                if method == WindowMethod::Direct {
                    f.solve_shifted(&rhs, lo, hi)
                } else {
                    f.solve_shifted_reversed(&rhs, lo, hi)
                }
            })
            .collect::<Result<Vec<_>>>()?,
    };

    let mut g = DMatrix::zeros(n, n);
    for (j, col) in columns.iter().enumerate() {
        for (k, &v) in col.iter().enumerate() {
            g[(j + k, j)] = v;
            g[(j, j + k)] = v;
        }
    }
    Kernel::symmetric(grid, g)
}

/// `rhs − (x − step · K_W x)` on the window starting at `lo`; `K` symmetric.
fn window_residual(k: &Kernel, x: &[f64], rhs: &[f64], lo: usize) -> Vec<f64> {
    let h = k.grid().step();
    let hi = lo + x.len();
    (0..x.len())
        .map(|a| {
            let row = &col(k.values(), lo + a)[lo..hi];
            let kx: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum();
            rhs[a] - (x[a] - h * kx)
        })
        .collect()
}

/// Solves the Volterra equation for `κ(t_i, ·)` row by row, descending in `s`.
///
/// Writing `y(u) = f(t_i, u) − κ(t_i, u)`, the discrete equation at `(i, j)` is
/// `y(j) (1 − step g(j,j)) = step Σ_{j<u<τ⁻¹(t_j)} y(u) g(u, j)`, and every `y(u)`
/// on the right is already known.
pub fn solve_kappa(pm: &PreparedMarket, delay: &DelayMap, g: &Kernel) -> Result<Kernel> {
    solve_kappa_indexed(pm, &delay.index(pm.grid())?, g)
}

pub fn solve_kappa_indexed(pm: &PreparedMarket, index: &DelayIndex, g: &Kernel) -> Result<Kernel> {
    let grid = *pm.grid();
    grid.check_same(g.grid())?;
    check_index(&grid, index)?;
    let n = grid.n_steps();
    let h = grid.step();
    let f = pm.f();

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let len = index.kappa_row_len(i);
            let mut y: Vec<f64> = col(f.values(), i).to_vec();
            let mut kappa_row = vec![0.0; len];
            for j in (0..len).rev() {
                let hi = index.inverse(j).min(n);
                let gcol = col(g.values(), j);
                let mut acc = 0.0;
                for u in j + 1..hi {
                    acc += y[u] * gcol[u];
                }
                let pivot = 1.0 - h * gcol[j];
                if pivot.abs() < 1e-14 {
                    return Err(Error::SpectrumViolation {
                        context: format!("Volterra pivot at ({i}, {j})"),
                        eigenvalue: h * gcol[j],
                        bound: 1.0,
                    });
                }
                y[j] = h * acc / pivot;
                kappa_row[j] = f.get(i, j) - y[j];
            }
            Ok(kappa_row)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut kappa = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            kappa[(i, j)] = v;
        }
    }
    Kernel::volterra(grid, kappa)
}

/// Solves the same Volterra rows as [`solve_kappa`] by dense LU elimination of
/// each row system at once. `O(N⁴)`; meant for cross-checking small grids.
pub fn solve_kappa_dense(pm: &PreparedMarket, delay: &DelayMap, g: &Kernel) -> Result<Kernel> {
    let grid = *pm.grid();
    grid.check_same(g.grid())?;
    let index = delay.index(&grid)?;
    let n = grid.n_steps();
    let h = grid.step();
    let f = pm.f();
    let mut kappa = DMatrix::zeros(n, n);
    for i in 0..n {
        let len = index.kappa_row_len(i);
        if len == 0 {
            continue;
        }
        // unknowns κ(i, 0..len); equation j:
        // κ(i,j) − h Σ_{u<len} κ(i,u) g(u,j) = f(i,j) − h Σ_u f(i,u) g(u,j), u in the g window of j
        let mut a = DMatrix::<f64>::identity(len, len);
        let mut b = nalgebra::DVector::<f64>::zeros(len);
        for j in 0..len {
            let hi = index.inverse(j).min(n);
            let mut rhs = f.get(i, j);
            for u in j..hi {
                rhs -= h * f.get(i, u) * g.get(u, j);
                if u < len {
                    a[(j, u)] -= h * g.get(u, j);
                }
            }
            b[j] = rhs;
        }
        let x = a.lu().solve(&b).ok_or_else(|| Error::SpectrumViolation {
            context: format!("dense Volterra row {i}"),
            eigenvalue: f64::NAN,
            bound: 1.0,
        })?;
        for j in 0..len {
            kappa[(i, j)] = x[j];
        }
    }
    Kernel::volterra(grid, kappa)
}

/// `g̃(s,u) = g(s,u) − ∫₀ᵘ g(s,v) g(u,v) dv` on `u ≤ s`, zero above the diagonal.
pub fn g_tilde(g: &Kernel) -> Kernel {
    let grid = *g.grid();
    let n = g.n();
    let h = grid.step();
    let vals = g.values();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            // g is stored symmetric, so row i restricted to v < j is column i
            let cj = &col(vals, j)[..j];
            (j..n)
                .map(|i| {
                    let ci = &col(vals, i)[..j];
                    let dot: f64 = ci.iter().zip(cj).map(|(p, q)| p * q).sum();
                    g.get(i, j) - h * dot
                })
                .collect()
        })
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for (j, col) in cols.iter().enumerate() {
        for (k, &v) in col.iter().enumerate() {
            out[(j + k, j)] = v;
        }
    }
    Kernel::volterra(grid, out).expect("built lower triangular")
}

/// The optimal value and the terms of its exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueParts {
    pub c: f64,
    /// `∫₀ᵀ∫₀ˢ f(s,u) g̃(s,u) du ds`
    pub cross_term: f64,
    /// `½ ∫₀ᵀ∫₀ˢ g(s,u)² du ds`
    pub quadratic_term: f64,
    /// `c − cross_term − quadratic_term`
    pub exponent: f64,
    /// `−exp(exponent)`
    pub value: f64,
}

/// Optimal expected utility (risk aversion one) from `c`, `g` and `g̃`.
pub fn optimal_value(pm: &PreparedMarket, g: &Kernel, g_tilde: &Kernel) -> Result<ValueParts> {
    let grid = *pm.grid();
    grid.check_same(g.grid())?;
    grid.check_same(g_tilde.grid())?;
    let h = grid.step();
    let n = grid.n_steps();
    let f = pm.f();
    let mut cross = 0.0;
    let mut quad = 0.0;
    for u in 0..n {
        for s in u + 1..n {
            cross += f.get(s, u) * g_tilde.get(s, u);
            let gv = g.get(s, u);
            quad += gv * gv;
        }
    }
    let cross_term = h * h * cross;
    let quadratic_term = 0.5 * h * h * quad;
    let exponent = pm.c() - cross_term - quadratic_term;
    Ok(ValueParts {
        c: pm.c(),
        cross_term,
        quadratic_term,
        exponent,
        value: -exponent.exp(),
    })
}

/// Discrete residual `max_{j ≤ i} |f − κ + g − step Σ_{u ≥ j} (f(i,u) − κ(i,u)) g(u,j)|`,
/// computed by brute force over the full range of `u`.
pub fn system_residual(f: &Kernel, kappa: &Kernel, g: &Kernel) -> f64 {
    let n = f.n();
    let h = f.grid().step();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut worst = 0.0f64;
            for j in 0..=i {
                let mut integral = 0.0;
                for u in j..n {
                    integral += (f.get(i, u) - kappa.get(i, u)) * g.get(u, j);
                }
                let r = f.get(i, j) - kappa.get(i, j) + g.get(i, j) - h * integral;
                worst = worst.max(r.abs());
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// `max_s |∫₀ˢ κ(s,u) g̃(s,u) du|`.
pub fn orthogonality_defect(kappa: &Kernel, g_tilde: &Kernel) -> f64 {
    let n = kappa.n();
    let h = kappa.grid().step();
    (0..n)
        .map(|i| {
            let s: f64 = (0..=i).map(|u| kappa.get(i, u) * g_tilde.get(i, u)).sum();
            (h * s).abs()
        })
        .fold(0.0, f64::max)
}

/// Number of node pairs `j ≤ i` where both `κ` and `g` are nonzero.
pub fn support_overlap(kappa: &Kernel, g: &Kernel) -> usize {
    let n = kappa.n();
    (0..n)
        .map(|i| (0..=i).filter(|&j| kappa.get(i, j) != 0.0 && g.get(i, j) != 0.0).count())
        .sum()
}

/// `max |κ_N − κ_{rN}|` and `max |g_N − g_{rN}|` over the nodes shared by a
/// grid and its `r`-fold refinement. On shared nodes both grids agree on which
/// pairs lie in the `κ` support, so the gap measures convergence of the values.
pub fn refinement_gap(coarse: &OptimalSolution, fine: &OptimalSolution) -> Result<f64> {
    let (nc, nf) = (coarse.kappa.n(), fine.kappa.n());
    let same_horizon = (coarse.kappa.grid().horizon() - fine.kappa.grid().horizon()).abs()
        <= 1e-12 * coarse.kappa.grid().horizon();
    if nc == 0 || nf % nc != 0 || !same_horizon {
        return Err(Error::Shape(format!(
            "grid with {nf} steps does not refine one with {nc}"
        )));
    }
    let r = nf / nc;
    let mut worst = 0.0f64;
    for i in 0..nc {
        for j in 0..=i {
            let dk = coarse.kappa.get(i, j) - fine.kappa.get(r * i, r * j);
            let dg = coarse.g.get(i, j) - fine.g.get(r * i, r * j);
            worst = worst.max(dk.abs()).max(dg.abs());
        }
    }
    Ok(worst)
}

/// Diagnostics reported with a solution.
#[derive(Debug, Clone, Serialize)]
pub struct SolutionDiagnostics {
    pub system_residual: f64,
    pub orthogonality_defect: f64,
    pub support_overlap: usize,
    pub kappa_nonzeros: usize,
    pub g_nonzeros_lower: usize,
    /// Largest eigenvalue of the operator of `g`; reported, not enforced.
    pub g_spectral_max: f64,
    pub max_window: usize,
}

#[derive(Debug, Clone)]
pub struct OptimalSolution {
    pub kappa: Kernel,
    pub g: Kernel,
    pub g_tilde: Kernel,
    pub value: ValueParts,
    index: DelayIndex,
}

impl OptimalSolution {
    pub fn index(&self) -> &DelayIndex {
        &self.index
    }

    pub fn diagnostics(&self, pm: &PreparedMarket) -> SolutionDiagnostics {
        let n = self.kappa.n();
        let count = |k: &Kernel| (0..n).map(|i| (0..=i).filter(|&j| k.get(i, j) != 0.0).count()).sum();
        SolutionDiagnostics {
            system_residual: system_residual(pm.f(), &self.kappa, &self.g),
            orthogonality_defect: orthogonality_defect(&self.kappa, &self.g_tilde),
            support_overlap: support_overlap(&self.kappa, &self.g),
            kappa_nonzeros: count(&self.kappa),
            g_nonzeros_lower: count(&self.g),
            g_spectral_max: self
                .g
                .eigenvalues_sym()
                .ok()
                .and_then(|e| e.first().copied())
                .unwrap_or(f64::NAN),
            max_window: (0..n).map(|j| self.index.inverse(j).min(n) - j).max().unwrap_or(0),
        }
    }
}

/// Full pipeline: `g`, then `κ`, then `g̃` and the value.
pub fn solve(pm: &PreparedMarket, delay: &DelayMap) -> Result<OptimalSolution> {
    solve_with(pm, delay, WindowMethod::default())
}

pub fn solve_with(pm: &PreparedMarket, delay: &DelayMap, method: WindowMethod) -> Result<OptimalSolution> {
    solve_indexed(pm, delay.index(pm.grid())?, method)
}

pub fn solve_indexed(pm: &PreparedMarket, index: DelayIndex, method: WindowMethod) -> Result<OptimalSolution> {
    let g = solve_g_indexed(pm, &index, method)?;
    let kappa = solve_kappa_indexed(pm, &index, &g)?;
    let gt = g_tilde(&g);
    let value = optimal_value(pm, &g, &gt)?;
    Ok(OptimalSolution {
        kappa,
        g,
        g_tilde: gt,
        value,
        index,
    })
}

/// A strategy of the linear form `γ_t = b(t) + ∫₀ᵗ K(t,s) dX_s`, with `K`
/// supported where the delayed filtration allows.
///
/// Row `i` of the kernel is stored only over its support `j < row_len(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStrategy {
    intercept: Vec<f64>,
    offsets: Vec<usize>,
    rows: Vec<f64>,
}

impl LinearStrategy {
    /// Validates that `kernel` vanishes outside the `κ` support of `index`.
    pub fn new(intercept: Vec<f64>, kernel: &Kernel, index: &DelayIndex) -> Result<Self> {
        let n = kernel.n();
        if intercept.len() != n || index.n_steps() != n {
            return Err(Error::Shape(format!(
                "strategy on N={n} needs {n} intercept values, got {}",
                intercept.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                if kernel.get(i, j) != 0.0 && !(index.in_kappa_support(i, j) && j <= i) {
                    return Err(Error::InvalidPerturbation(format!(
                        "kernel entry ({i}, {j}) uses information not yet available at t_{i}"
                    )));
                }
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut rows = Vec::new();
        offsets.push(0);
        for i in 0..n {
            // increments enter only strictly before t_i
            let len = index.kappa_row_len(i).min(i);
            rows.extend((0..len).map(|j| kernel.get(i, j)));
            offsets.push(rows.len());
        }
        Ok(LinearStrategy {
            intercept,
            offsets,
            rows,
        })
    }

    /// `γ̂ = a + ∫ κ dX`.
    pub fn optimal(sol: &OptimalSolution, a: &[f64]) -> Result<Self> {
        Self::new(a.to_vec(), &sol.kappa, &sol.index)
    }

    pub fn n_steps(&self) -> usize {
        self.intercept.len()
    }

    pub fn intercept(&self) -> &[f64] {
        &self.intercept
    }

    /// Strategy values at `t_0..t_{N-1}` for the given increments `ΔX_j`.
    pub fn evaluate_increments(&self, dx: &[f64]) -> Vec<f64> {
        (0..self.n_steps())
            .map(|i| {
                let row = &self.rows[self.offsets[i]..self.offsets[i + 1]];
                self.intercept[i] + row.iter().zip(dx).map(|(k, d)| k * d).sum::<f64>()
            })
            .collect()
    }

    /// Terminal wealth `Σ_i γ_i ΔX_i`.
    pub fn wealth(&self, dx: &[f64]) -> f64 {
        let mut w = 0.0;
        for i in 0..self.n_steps() {
            let row = &self.rows[self.offsets[i]..self.offsets[i + 1]];
            let gamma = self.intercept[i] + row.iter().zip(dx).map(|(k, d)| k * d).sum::<f64>();
            w += gamma * dx[i];
        }
        w
    }
}

/// `γ̂(i) = a(i) + Σ_{j<i} κ(i,j) ΔX_j` along a path of `N + 1` values.
pub fn evaluate_strategy(sol: &OptimalSolution, a: &[f64], path: &[f64]) -> Result<Vec<f64>> {
    let n = sol.kappa.n();
    if path.len() != n + 1 || a.len() != n {
        return Err(Error::Shape(format!(
            "strategy evaluation needs a path of {} values and {n} drift values",
            n + 1
        )));
    }
    let dx: Vec<f64> = path.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(LinearStrategy::optimal(sol, a)?.evaluate_increments(&dx))
}

/// The optimizer for risk aversion `α` is `γ̂ / α`.
pub fn scale_strategy(gamma: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::domain("alpha", alpha, "(0, inf)"));
    }
    Ok(gamma.iter().map(|g| g / alpha).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::MarketSpec;
    use crate::timegrid::TimeGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn example(n: usize, mu: f64, sigma2: f64) -> PreparedMarket {
        PreparedMarket::new(MarketSpec::constant(grid(n), mu, -sigma2).unwrap()).unwrap()
    }

    fn random_market(n: usize, radius: f64, seed: u64) -> PreparedMarket {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut s = (&raw + raw.transpose()) * 0.5;
        let rho = (&s / n as f64)
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0f64, |m, e| m.max(e.abs()));
        s *= radius / rho;
        crate::kernel::symmetrize(&mut s);
        let at: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        PreparedMarket::new(MarketSpec::new(at, Kernel::symmetric(grid(n), s).unwrap()).unwrap()).unwrap()
    }

    fn lag(delta: f64) -> DelayMap {
        DelayMap::constant_lag(delta, 1.0).unwrap()
    }

    #[test]
    fn g_matches_closed_form_on_the_example() {
        let pm = example(400, 0.0, 1.0);
        let d = lag(0.25);
        let g = solve_g(&pm, &d).unwrap();
        // (t, s) = (0.6, 0.5): -1 / (1 + (1 + 0.5 - 0.75)) = -4/7
        assert!((g.get(240, 200) + 4.0 / 7.0).abs() < 1e-2);
        assert_eq!(g.get(300, 200), 0.0);
    }

    #[test]
    fn zero_f_gives_zero_g() {
        let pm = PreparedMarket::new(MarketSpec::constant(grid(20), 0.3, 0.0).unwrap()).unwrap();
        let g = solve_g(&pm, &lag(0.2)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let k = solve_kappa(&pm, &lag(0.2), &g).unwrap();
        assert_eq!(k.max_abs(), 0.0);
    }

    #[test]
    fn g_satisfies_the_fredholm_equations() {
        let pm = random_market(16, 0.8, 1);
        let d = lag(0.3);
        let g = solve_g(&pm, &d).unwrap();
        let idx = d.index(pm.grid()).unwrap();
        let h = pm.grid().step();
        for j in 0..16 {
            let hi = idx.inverse(j).min(16);
            for i in j..hi {
                let mut s = 0.0;
                for k in j..hi {
                    s += pm.f().get(i, k) * g.get(k, j);
                }
                let r = g.get(i, j) - h * s + pm.f().get(i, j);
                assert!(r.abs() < 1e-9, "({i},{j}) residual {r}");
            }
            for i in hi..16 {
                assert_eq!(g.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn window_methods_agree() {
        let pm = random_market(48, 0.85, 2);
        let d = DelayMap::piecewise_linear(vec![(0.0, 0.0), (0.2, 0.0), (0.6, 0.1), (1.0, 0.7)], 0.2, 1.0)
            .unwrap();
        let a = solve_g_with(&pm, &d, WindowMethod::Sliding).unwrap();
        let b = solve_g_with(&pm, &d, WindowMethod::Direct).unwrap();
        let c = solve_g_with(&pm, &d, WindowMethod::DirectReversed).unwrap();
        assert!((a.values() - b.values()).amax() < 1e-10);
        assert!((c.values() - b.values()).amax() < 1e-10);
    }

    #[test]
    fn no_delay_limit_gives_kappa_equal_f() {
        // τ⁻¹(s) = s makes every window empty
        let n = 20;
        let pm = random_market(n, 0.5, 3);
        let index = DelayIndex::without_delay(&grid(n));
        let sol = solve_indexed(&pm, index, WindowMethod::Sliding).unwrap();
        assert_eq!(sol.g.max_abs(), 0.0);
        for i in 0..n {
            for j in 0..=i {
                assert!((sol.kappa.get(i, j) - pm.f().get(i, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn subcell_lag_still_opens_one_cell_windows() {
        let n = 20;
        let pm = random_market(n, 0.5, 3);
        let g = solve_g(&pm, &lag(0.2 / n as f64)).unwrap();
        let h = 1.0 / n as f64;
        for j in 1..n {
            let expected = -pm.f().get(j, j) / (1.0 - h * pm.f().get(j, j));
            assert!((g.get(j, j) - expected).abs() < 1e-12);
            if j + 1 < n {
                assert_eq!(g.get(j + 1, j), 0.0);
            }
        }
    }

    #[test]
    fn kappa_solves_the_example_volterra_equation() {
        // κ(t,s) = G(s) (1 − ∫_s^{τ⁻¹(s)} κ(t,u) du),  G(s) = σ²/(1+σ²(1+s−τ⁻¹(s)))
        let n = 400;
        let pm = example(n, 0.0, 1.0);
        let d = lag(0.25);
        let sol = solve(&pm, &d).unwrap();
        let gr = grid(n);
        let h = gr.step();
        let mut worst = 0.0f64;
        for i in (0..n).step_by(7) {
            let len = sol.index().kappa_row_len(i);
            for j in 0..len {
                let s = gr.node(j);
                let inv = d.tau_inverse_at(s).unwrap();
                let big_g = 1.0 / (1.0 + (1.0 + s - inv));
                let hi = sol.index().inverse(j);
                // trapezoid over nodes j..=hi; κ(t_i, u) vanishes at u = T
                let k_at = |u: usize| if u < n { sol.kappa.get(i, u) } else { 0.0 };
                let mut integral = 0.0;
                for u in j..hi {
                    integral += 0.5 * h * (k_at(u) + k_at(u + 1));
                }
                let r = sol.kappa.get(i, j) - big_g * (1.0 - integral);
                worst = worst.max(r.abs());
            }
        }
        assert!(worst < 1e-2, "worst residual {worst}");
    }

    #[test]
    fn system_residual_and_invariants_on_random_markets() {
        for seed in 0..3 {
            let pm = random_market(16, 0.8, 10 + seed);
            for d in [lag(0.3), lag(0.55)] {
                let sol = solve(&pm, &d).unwrap();
                assert!(system_residual(pm.f(), &sol.kappa, &sol.g) < 1e-8);
                assert_eq!(support_overlap(&sol.kappa, &sol.g), 0);
                assert!(orthogonality_defect(&sol.kappa, &sol.g_tilde) < 1e-8);
                let dense = solve_kappa_dense(&pm, &d, &sol.g).unwrap();
                assert!((dense.values() - sol.kappa.values()).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn g_tilde_cases() {
        let g0 = Kernel::zeros(grid(8));
        assert_eq!(g_tilde(&g0).max_abs(), 0.0);

        // one nonzero column 3 (mirrored into row 3): the correction needs v < j with
        // g(i,v) g(j,v) ≠ 0, so only v = 3 < j contributes
        let n = 8;
        let mut v = DMatrix::zeros(n, n);
        for i in 3..6 {
            v[(i, 3)] = -0.5 - i as f64 * 0.1;
            v[(3, i)] = v[(i, 3)];
        }
        let g = Kernel::symmetric(grid(n), v).unwrap();
        let gt = g_tilde(&g);
        for i in 0..n {
            for j in 0..=i.min(3) {
                assert_eq!(gt.get(i, j), g.get(i, j));
            }
        }
        let h = 1.0 / n as f64;
        assert!((gt.get(5, 4) - (0.0 - h * g.get(5, 3) * g.get(4, 3))).abs() < 1e-15);
    }

    #[test]
    fn g_tilde_by_double_loop() {
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let sym = (&raw + raw.transpose()) * 0.5;
        let g = Kernel::new(grid(n), sym).unwrap();
        let gt = g_tilde(&g);
        let h = 1.0 / n as f64;
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for v in 0..j {
                    s += g.get(i, v) * g.get(j, v);
                }
                assert!((gt.get(i, j) - (g.get(i, j) - h * s)).abs() < 1e-12);
            }
            for j in i + 1..n {
                assert_eq!(gt.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn value_without_g_is_minus_exp_c() {
        let pm = example(32, 0.4, 1.0);
        let z = Kernel::zeros(grid(32));
        let v = optimal_value(&pm, &z, &z).unwrap();
        assert_eq!(v.value, -pm.c().exp());
    }

    #[test]
    fn value_without_covariance_perturbation() {
        let mu = 0.8;
        let pm = PreparedMarket::new(MarketSpec::constant(grid(64), mu, 0.0).unwrap()).unwrap();
        let sol = solve(&pm, &lag(0.25)).unwrap();
        assert!((sol.value.value + (-0.5 * mu * mu).exp()).abs() < 1e-12);
    }

    #[test]
    fn strategy_evaluation_cases() {
        let n = 40;
        let pm = example(n, 0.5, 1.0);
        let d = lag(0.25);
        let sol = solve(&pm, &d).unwrap();
        let zero_path = vec![0.0; n + 1];
        assert_eq!(evaluate_strategy(&sol, pm.a(), &zero_path).unwrap(), pm.a().to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut path = vec![0.0];
        for _ in 0..n {
            let last = *path.last().unwrap();
            path.push(last + rng.random_range(-0.2..0.2));
        }
        let gamma = evaluate_strategy(&sol, pm.a(), &path).unwrap();
        for i in 0..n {
            let mut s = pm.a()[i];
            for j in 0..i {
                s += sol.kappa.get(i, j) * (path[j + 1] - path[j]);
            }
            assert!((gamma[i] - s).abs() < 1e-12);
        }

        let mut zero_kappa = sol.clone();
        zero_kappa.kappa = Kernel::zeros(grid(n));
        assert_eq!(evaluate_strategy(&zero_kappa, pm.a(), &path).unwrap(), pm.a().to_vec());
        assert!(evaluate_strategy(&sol, pm.a(), &path[..n]).is_err());
    }

    #[test]
    fn strategy_uses_only_delayed_increments() {
        let n = 50;
        let pm = random_market(n, 0.7, 22);
        let d = DelayMap::piecewise_linear(vec![(0.0, 0.0), (0.15, 0.0), (0.5, 0.2), (1.0, 0.6)], 0.15, 1.0)
            .unwrap();
        let sol = solve(&pm, &d).unwrap();
        let strat = LinearStrategy::optimal(&sol, pm.a()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dx: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let base = strat.evaluate_increments(&dx);
        let gr = grid(n);
        let taus = sol.index().taus();
        for i in 0..n {
            // perturb every increment that starts after τ(t_i)
            let mut moved = dx.clone();
            for (k, m) in moved.iter_mut().enumerate() {
                if gr.node(k) > taus[i] + 1e-12 {
                    *m += 1.0;
                }
            }
            assert_eq!(strat.evaluate_increments(&moved)[i], base[i], "node {i}");
        }
    }

    #[test]
    fn support_violating_kernel_is_rejected() {
        let n = 20;
        let d = lag(0.25);
        let idx = d.index(&grid(n)).unwrap();
        let mut v = DMatrix::zeros(n, n);
        v[(10, 9)] = 1.0; // t = 0.5 cannot see s = 0.45
        let k = Kernel::new(grid(n), v).unwrap();
        assert!(matches!(
            LinearStrategy::new(vec![0.0; n], &k, &idx),
            Err(Error::InvalidPerturbation(_))
        ));
    }

    #[test]
    fn refinement_gap_shrinks_under_doubling() {
        let d = lag(0.25);
        let sols: Vec<_> = [50, 100, 200, 400].iter().map(|&n| solve(&example(n, 0.0, 1.0), &d).unwrap()).collect();
        let gaps: Vec<f64> = sols.windows(2).map(|w| refinement_gap(&w[0], &w[1]).unwrap()).collect();
        for w in gaps.windows(2) {
            assert!(w[0] / w[1] >= 1.5, "gaps {gaps:?}");
        }
        assert!(refinement_gap(&sols[1], &sols[0]).is_err());
    }

    #[test]
    fn scaling_cases() {
        assert_eq!(scale_strategy(&[1.0, -2.0], 1.0).unwrap(), vec![1.0, -2.0]);
        assert_eq!(scale_strategy(&[1.0; 3], 2.0).unwrap(), vec![0.5; 3]);
        assert!(scale_strategy(&[1.0], 0.0).is_err());
        assert!(scale_strategy(&[1.0], -1.0).is_err());
    }
}

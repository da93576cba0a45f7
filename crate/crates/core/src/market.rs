//! From the Gaussian market law to its density with respect to Wiener measure.
//!
//! The market law has mean `∫₀ᵗ ã` and covariance
//! `min(t, s) − ∫₀ᵗ∫₀ˢ f̃(u, v) du dv`. Its density against Wiener measure is
//! `exp(c + ∫ a dX + ∫₀ᵀ∫₀ˢ f(s, u) dX_u dX_s)` where `f` solves the resolvent
//! equation `f + f̃ = f ∘ f̃`, `a = ã − f ã`, and
//! `c = ½ (Σ (λ_i + log(1 − λ_i)) − ∫ a ã)` over the nonzero eigenvalues of `f`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{symmetrize, Kernel};
use crate::timegrid::TimeGrid;

/// Default relative cutoff separating nonzero eigenvalues from discretization noise.
pub const DEFAULT_EIGEN_CUTOFF: f64 = 1e-10;

/// Drift density `ã` (one value per cell) and covariance kernel `f̃`.
#[derive(Debug, Clone)]
pub struct MarketSpec {
    grid: TimeGrid,
    a_tilde: Vec<f64>,
    f_tilde: Kernel,
}

impl MarketSpec {
    /// Validates symmetry of `f̃` and that its operator spectrum lies below one.
    pub fn new(a_tilde: Vec<f64>, f_tilde: Kernel) -> Result<Self> {
        let grid = *f_tilde.grid();
        if a_tilde.len() != grid.n_steps() {
            return Err(Error::Shape(format!(
                "drift density has {} values, expected {}",
                a_tilde.len(),
                grid.n_steps()
            )));
        }
        let f_tilde = if f_tilde.is_symmetric() {
            f_tilde
        } else {
            Kernel::symmetric(grid, f_tilde.into_values())?
        };
        f_tilde.check_spectrum("covariance kernel f_tilde")?;
        Ok(MarketSpec {
            grid,
            a_tilde,
            f_tilde,
        })
    }

    /// Constant `ã ≡ drift` and `f̃ ≡ kernel`.
    pub fn constant(grid: TimeGrid, drift: f64, kernel: f64) -> Result<Self> {
        Self::new(vec![drift; grid.n_steps()], Kernel::constant(grid, kernel))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn a_tilde(&self) -> &[f64] {
        &self.a_tilde
    }

    pub fn f_tilde(&self) -> &Kernel {
        &self.f_tilde
    }

    /// `E[X_{t_i}] = step · Σ_{k<i} ã(k)`, for `i = 0..=N`.
    pub fn mean_vector(&self) -> Vec<f64> {
        let h = self.grid.step();
        let mut m = Vec::with_capacity(self.a_tilde.len() + 1);
        let mut acc = 0.0;
        m.push(0.0);
        for &a in &self.a_tilde {
            acc += h * a;
            m.push(acc);
        }
        m
    }

    /// Node covariance `min(t_i, t_j) − step² Σ_{u<i} Σ_{v<j} f̃(u, v)`, `(N+1) × (N+1)`.
    ///
    /// Fails with [`Error::Conditioning`] when the block over nodes `1..=N` is not
    /// positive definite (node 0 is the deterministic start).
    pub fn covariance_matrix(&self) -> Result<DMatrix<f64>> {
        let cov = self.covariance_unchecked();
        let n = self.grid.n_steps();
        let inner = cov.view((1, 1), (n, n)).into_owned();
        if inner.clone().cholesky().is_none() {
            let min = inner
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            return Err(Error::Conditioning {
                min_eigenvalue: min,
            });
        }
        Ok(cov)
    }

    pub(crate) fn covariance_unchecked(&self) -> DMatrix<f64> {
        let n = self.grid.n_steps();
        let h = self.grid.step();
        // prefix(i, j) = Σ_{u<i} Σ_{v<j} f̃(u, v)
        let mut prefix = DMatrix::<f64>::zeros(n + 1, n + 1);
        for i in 1..=n {
            for j in 1..=n {
                prefix[(i, j)] = self.f_tilde.get(i - 1, j - 1) + prefix[(i - 1, j)] + prefix[(i, j - 1)]
                    - prefix[(i - 1, j - 1)];
            }
        }
        let mut cov = DMatrix::from_fn(n + 1, n + 1, |i, j| {
            self.grid.node(i.min(j)) - h * h * prefix[(i, j)]
        });
        symmetrize(&mut cov);
        cov
    }
}

/// Solves `f + f̃ = f ∘ f̃` for `f`.
///
/// With `B = step · f̃` the discrete equation reads `F + B = F B` for
/// `F = step · f`, i.e. `F = −(I − B)⁻¹ B`. `I − B` is positive definite for
/// `f̃` in the admissible class, so the system is solved by Cholesky.
pub fn solve_resolvent(f_tilde: &Kernel) -> Result<Kernel> {
    let grid = *f_tilde.grid();
    let n = grid.n_steps();
    let h = grid.step();
    f_tilde.check_spectrum("resolvent equation")?;
    let mut b = f_tilde.operator_matrix();
    symmetrize(&mut b);
    let system = DMatrix::identity(n, n) - &b;
    let chol = system.cholesky().ok_or_else(|| Error::SpectrumViolation {
        context: "resolvent equation".into(),
        eigenvalue: f64::NAN,
        bound: 1.0,
    })?;
    let mut f = chol.solve(&b) * (-1.0 / h);
    symmetrize(&mut f);
    Kernel::symmetric(grid, f)
}

/// `max |f + f̃ − f ∘ f̃|` entrywise, the discrete residual of the resolvent equation.
pub fn resolvent_residual(f: &Kernel, f_tilde: &Kernel) -> Result<f64> {
    let comp = f.compose(f_tilde)?;
    Ok((f.values() + f_tilde.values() - comp.values()).amax())
}

/// `a(i) = ã(i) − step · Σ_k f(i, k) ã(k)`.
pub fn compute_a(a_tilde: &[f64], f: &Kernel) -> Result<Vec<f64>> {
    let fa = f.apply(a_tilde)?;
    Ok(a_tilde.iter().zip(&fa).map(|(x, y)| x - y).collect())
}

/// Eigenvalues `λ` of the operator of `f` with `|λ| > cutoff · max(1, |λ|_max)`.
pub fn nonzero_eigenvalues(f: &Kernel, rel_cutoff: f64) -> Result<Vec<f64>> {
    Ok(filter_nonzero(&f.eigenvalues_sym()?, rel_cutoff))
}

fn filter_nonzero(eigs: &[f64], rel_cutoff: f64) -> Vec<f64> {
    let top = eigs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let cut = rel_cutoff * top.max(1.0);
    eigs.iter().copied().filter(|e| e.abs() > cut).collect()
}

fn c_from_parts(eigs: &[f64], a: &[f64], a_tilde: &[f64], step: f64) -> Result<f64> {
    let mut spectral = 0.0;
    for &l in eigs {
        if l >= 1.0 {
            return Err(Error::SpectrumViolation {
                context: "constant c (log(1 - lambda))".into(),
                eigenvalue: l,
                bound: 1.0,
            });
        }
        spectral += l + (-l).ln_1p();
    }
    let drift: f64 = a.iter().zip(a_tilde).map(|(x, y)| x * y).sum::<f64>() * step;
    Ok(0.5 * (spectral - drift))
}

/// `c = ½ (Σ_i (λ_i + log(1 − λ_i)) − step · Σ_k a(k) ã(k))`.
pub fn compute_c(a: &[f64], a_tilde: &[f64], f: &Kernel, rel_cutoff: f64) -> Result<f64> {
    if a.len() != f.n() || a_tilde.len() != f.n() {
        return Err(Error::Shape("drift vectors do not match the kernel grid".into()));
    }
    let eigs = nonzero_eigenvalues(f, rel_cutoff)?;
    c_from_parts(&eigs, a, a_tilde, f.grid().step())
}

/// The density data `(f, a, c)` of a market, together with its spectrum.
#[derive(Debug, Clone)]
pub struct PreparedMarket {
    spec: MarketSpec,
    f: Kernel,
    a: Vec<f64>,
    c: f64,
    eigenvalues: Vec<f64>,
    rel_cutoff: f64,
    resolvent_residual: f64,
}

/// Serializable summary of a [`PreparedMarket`].
#[derive(Debug, Clone, Serialize)]
pub struct PreparedSummary {
    pub c: f64,
    pub nonzero_eigs: Vec<f64>,
    pub eigen_cutoff: f64,
    pub resolvent_residual: f64,
    pub f_l2_norm: f64,
    pub f_tilde_l2_norm: f64,
    /// `c` recomputed at other cutoffs, as `(cutoff, c)`.
    pub c_cutoff_sensitivity: Vec<(f64, f64)>,
}

impl PreparedMarket {
    pub fn new(spec: MarketSpec) -> Result<Self> {
        Self::with_cutoff(spec, DEFAULT_EIGEN_CUTOFF)
    }

    pub fn with_cutoff(spec: MarketSpec, rel_cutoff: f64) -> Result<Self> {
        let f = solve_resolvent(spec.f_tilde())?;
        let a = compute_a(spec.a_tilde(), &f)?;
        let eigenvalues = f.eigenvalues_sym()?;
        let nonzero = filter_nonzero(&eigenvalues, rel_cutoff);
        let c = c_from_parts(&nonzero, &a, spec.a_tilde(), spec.grid().step())?;
        let resolvent_residual = resolvent_residual(&f, spec.f_tilde())?;
        Ok(PreparedMarket {
            spec,
            f,
            a,
            c,
            eigenvalues,
            rel_cutoff,
            resolvent_residual,
        })
    }

    pub fn spec(&self) -> &MarketSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TimeGrid {
        self.spec.grid()
    }

    pub fn f(&self) -> &Kernel {
        &self.f
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn eigen_cutoff(&self) -> f64 {
        self.rel_cutoff
    }

    /// All eigenvalues of the operator of `f`, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn nonzero_eigs(&self) -> Vec<f64> {
        filter_nonzero(&self.eigenvalues, self.rel_cutoff)
    }

    /// `c` evaluated with a different eigenvalue cutoff.
    pub fn c_with_cutoff(&self, rel_cutoff: f64) -> Result<f64> {
        let eigs = filter_nonzero(&self.eigenvalues, rel_cutoff);
        c_from_parts(&eigs, &self.a, self.spec.a_tilde(), self.grid().step())
    }

    pub fn resolvent_residual(&self) -> f64 {
        self.resolvent_residual
    }

    pub fn summary(&self) -> PreparedSummary {
        let c_cutoff_sensitivity = [1e-12, 1e-10, 1e-9, 1e-6]
            .iter()
            .map(|&cut| (cut, self.c_with_cutoff(cut).unwrap_or(f64::NAN)))
            .collect();
        PreparedSummary {
            c: self.c,
            nonzero_eigs: self.nonzero_eigs(),
            eigen_cutoff: self.rel_cutoff,
            resolvent_residual: self.resolvent_residual,
            f_l2_norm: self.f.l2_norm(),
            f_tilde_l2_norm: self.spec.f_tilde().l2_norm(),
            c_cutoff_sensitivity,
        }
    }

    /// Logarithm of the density of the market law against Wiener measure at a
    /// discretely observed path, with Itô (left-point) sums:
    /// `c + Σ_i a(i) ΔX_i + Σ_i (Σ_{k<i} f(i, k) ΔX_k) ΔX_i`.
    pub fn log_rn_derivative(&self, path: &[f64]) -> Result<f64> {
        let n = self.grid().n_steps();
        if path.len() != n + 1 {
            return Err(Error::Shape(format!(
                "path has {} values, expected {}",
                path.len(),
                n + 1
            )));
        }
        let dx: Vec<f64> = path.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(self.log_rn_from_increments(&dx))
    }

    pub(crate) fn log_rn_from_increments(&self, dx: &[f64]) -> f64 {
        let f = self.f.values();
        let mut linear = 0.0;
        let mut double = 0.0;
        for i in 0..dx.len() {
            linear += self.a[i] * dx[i];
            // f is symmetric: row i below the diagonal is column i above it
            let col = f.column(i);
            let inner: f64 = col.as_slice()[..i].iter().zip(&dx[..i]).map(|(x, y)| x * y).sum();
            double += inner * dx[i];
        }
        self.c + linear + double
    }
}

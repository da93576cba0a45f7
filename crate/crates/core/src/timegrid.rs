//! Uniform time grid on `[0, T]` and the deterministic delay function.
//!
//! The investor observing the market at time `t` only knows the price path up to
//! `τ(t)`, where `τ` is nondecreasing, right-continuous and satisfies the strict
//! delay condition `τ(t) ≤ (t − ε)⁺` for some `ε > 0`. Kernel supports are
//! expressed through the left-continuous inverse
//! `τ⁻¹(s) = T ∧ inf{u : τ(u) ≥ s}`, and at grid level through [`DelayIndex`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform discretization `t_i = i·T/N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::domain("horizon_T", horizon, "(0, inf)"));
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be positive".into()));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// `t_i`. The last node is returned as exactly `T`.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }

    /// Tolerance used when comparing times that should coincide with grid nodes.
    pub(crate) fn tie_tolerance(&self) -> f64 {
        1e-9 * self.step()
    }

    pub(crate) fn check_same(&self, other: &TimeGrid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "grid (T={}, N={}) does not match grid (T={}, N={})",
                self.horizon, self.n_steps, other.horizon, other.n_steps
            )))
        }
    }
}

/// How the delay function is described in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DelaySpec {
    /// `τ(t) = (t − δ)⁺`.
    ConstantLag { delta: f64 },
    /// Linear interpolation between `(t, τ(t))` points spanning `[0, T]`.
    /// A repeated time encodes a jump; the later value is the value at that time.
    PiecewiseLinear { breakpoints: Vec<(f64, f64)> },
    /// `τ` at every grid node, held constant on each cell `[t_i, t_{i+1})`.
    Tabulated { values: Vec<f64> },
}

/// A validated delay function on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayMap {
    spec: DelaySpec,
    epsilon: f64,
    horizon: f64,
    /// Cell width of the table, for tabulated specs.
    #[serde(skip)]
    table_step: Option<f64>,
}

impl DelayMap {
    pub fn constant_lag(delta: f64, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidDelay(format!(
                "constant lag must be positive, got {delta}"
            )));
        }
        Ok(DelayMap {
            spec: DelaySpec::ConstantLag { delta },
            epsilon: delta,
            horizon,
            table_step: None,
        })
    }

    pub fn piecewise_linear(breakpoints: Vec<(f64, f64)>, epsilon: f64, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        check_epsilon(epsilon)?;
        validate_breakpoints(&breakpoints, epsilon, horizon)?;
        Ok(DelayMap {
            spec: DelaySpec::PiecewiseLinear { breakpoints },
            epsilon,
            horizon,
            table_step: None,
        })
    }

    pub fn tabulated(values: Vec<f64>, grid: &TimeGrid, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if values.len() != grid.n_steps() + 1 {
            return Err(Error::InvalidDelay(format!(
                "tabulated delay needs {} values, got {}",
                grid.n_steps() + 1,
                values.len()
            )));
        }
        let tol = grid.tie_tolerance();
        let mut prev = 0.0;
        for (i, &v) in values.iter().enumerate() {
            let t = grid.node(i);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidDelay(format!("tau(t_{i}) = {v} is negative")));
            }
            if v < prev {
                return Err(Error::InvalidDelay(format!(
                    "tabulated tau decreases at node {i}: {prev} -> {v}"
                )));
            }
            if v > (t - epsilon).max(0.0) + tol {
                return Err(Error::InvalidDelay(format!(
                    "tau(t_{i}) = {v} violates the strict delay bound (t - eps)+ = {}",
                    (t - epsilon).max(0.0)
                )));
            }
            prev = v;
        }
        Ok(DelayMap {
            spec: DelaySpec::Tabulated { values },
            epsilon,
            horizon: grid.horizon(),
            table_step: Some(grid.step()),
        })
    }

    /// Builds a map from a scenario description. `epsilon` is required for
    /// piecewise and tabulated specs; a constant lag uses `ε = δ`.
    pub fn from_spec(spec: DelaySpec, epsilon: Option<f64>, grid: &TimeGrid) -> Result<Self> {
        match spec {
            DelaySpec::ConstantLag { delta } => {
                if let Some(e) = epsilon {
                    if e > delta {
                        return Err(Error::InvalidDelay(format!(
                            "epsilon {e} exceeds the constant lag {delta}"
                        )));
                    }
                }
                Self::constant_lag(delta, grid.horizon())
            }
            DelaySpec::PiecewiseLinear { breakpoints } => {
                let eps = epsilon.ok_or_else(|| {
                    Error::InvalidDelay("piecewise_linear delay requires epsilon".into())
                })?;
                Self::piecewise_linear(breakpoints, eps, grid.horizon())
            }
            DelaySpec::Tabulated { values } => {
                let eps = epsilon
                    .ok_or_else(|| Error::InvalidDelay("tabulated delay requires epsilon".into()))?;
                Self::tabulated(values, grid, eps)
            }
        }
    }

    pub fn spec(&self) -> &DelaySpec {
        &self.spec
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn check_time(&self, name: &'static str, t: f64) -> Result<f64> {
        let tol = 1e-12 * self.horizon;
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::domain(name, t, format!("[0, {}]", self.horizon)));
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    /// `τ(t)`.
    pub fn tau_at(&self, t: f64) -> Result<f64> {
        let t = self.check_time("t", t)?;
        Ok(match &self.spec {
            DelaySpec::ConstantLag { delta } => (t - delta).max(0.0),
            DelaySpec::PiecewiseLinear { breakpoints } => {
                let k = breakpoints.partition_point(|p| p.0 <= t).max(1) - 1;
                match breakpoints.get(k + 1) {
                    None => breakpoints[k].1,
                    Some(&(t1, v1)) => {
                        let (t0, v0) = breakpoints[k];
                        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                    }
                }
            }
            DelaySpec::Tabulated { values } => values[self.cell_of(t, values.len() - 1)],
        })
    }

    /// `τ⁻¹(s) = T ∧ inf{u ∈ [0, T] : τ(u) ≥ s}`.
    pub fn tau_inverse_at(&self, s: f64) -> Result<f64> {
        let s = self.check_time("s", s)?;
        let horizon = self.horizon;
        Ok(match &self.spec {
            DelaySpec::ConstantLag { delta } => {
                if s <= 0.0 {
                    0.0
                } else {
                    (s + delta).min(horizon)
                }
            }
            DelaySpec::PiecewiseLinear { breakpoints } => {
                let mut hit = horizon;
                for w in breakpoints.windows(2) {
                    let ((t0, v0), (t1, v1)) = (w[0], w[1]);
                    if v0 >= s {
                        hit = t0;
                        break;
                    }
                    if v1 >= s {
                        hit = t0 + (s - v0) / (v1 - v0) * (t1 - t0);
                        break;
                    }
                }
                hit.min(horizon)
            }
            DelaySpec::Tabulated { values } => {
                let h = self.table_step.expect("tabulated delay carries its step");
                match values.iter().position(|&v| v >= s) {
                    Some(k) => (k as f64 * h).min(horizon),
                    None => horizon,
                }
            }
        })
    }

    /// Points in `(0, T)` where `τ⁻¹` may fail to be smooth.
    pub fn inverse_breakpoints(&self) -> Vec<f64> {
        let horizon = self.horizon;
        let mut pts: Vec<f64> = match &self.spec {
            DelaySpec::ConstantLag { delta } => vec![horizon - delta],
            DelaySpec::PiecewiseLinear { breakpoints } => {
                breakpoints.iter().flat_map(|&(t, v)| [t, v]).collect()
            }
            DelaySpec::Tabulated { values } => values.clone(),
        };
        pts.retain(|&p| p > 0.0 && p < horizon);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }

    fn cell_of(&self, t: f64, last: usize) -> usize {
        let h = self.table_step.expect("tabulated delay carries its step");
        (((t / h) + 1e-9).floor() as usize).min(last)
    }

    /// Grid-level inverse for every node (two-pointer scan).
    pub fn index(&self, grid: &TimeGrid) -> Result<DelayIndex> {
        if (grid.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(Error::Shape(format!(
                "delay horizon {} does not match grid horizon {}",
                self.horizon,
                grid.horizon()
            )));
        }
        let n = grid.n_steps();
        let tol = grid.tie_tolerance();
        let taus = (0..=n)
            .map(|k| self.tau_at(grid.node(k)))
            .collect::<Result<Vec<_>>>()?;
        let mut inv = Vec::with_capacity(n + 1);
        let mut k = 0;
        for j in 0..=n {
            let tj = grid.node(j);
            while k < n && taus[k] < tj - tol {
                k += 1;
            }
            inv.push(k);
        }
        Ok(DelayIndex { inv, taus })
    }

    /// Smallest node index `k` with `τ(t_k) ≥ t_j`, capped at `N`.
    pub fn inverse_index(&self, grid: &TimeGrid, j: usize) -> Result<usize> {
        if j > grid.n_steps() {
            return Err(Error::Shape(format!(
                "node index {j} exceeds n_steps {}",
                grid.n_steps()
            )));
        }
        Ok(self.index(grid)?.inverse(j))
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::domain("horizon_T", horizon, "(0, inf)"));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidDelay(format!(
            "strict delay margin epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

fn validate_breakpoints(bp: &[(f64, f64)], epsilon: f64, horizon: f64) -> Result<()> {
    let tol = 1e-12 * horizon;
    if bp.len() < 2 {
        return Err(Error::InvalidDelay("need at least two breakpoints".into()));
    }
    if bp[0].0.abs() > tol || (bp[bp.len() - 1].0 - horizon).abs() > tol {
        return Err(Error::InvalidDelay(format!(
            "breakpoints must span [0, {horizon}], got [{}, {}]",
            bp[0].0,
            bp[bp.len() - 1].0
        )));
    }
    for (i, &(t, v)) in bp.iter().enumerate() {
        if !(t.is_finite() && v.is_finite()) || v < 0.0 {
            return Err(Error::InvalidDelay(format!("bad breakpoint ({t}, {v})")));
        }
        if v > (t - epsilon).max(0.0) + tol {
            return Err(Error::InvalidDelay(format!(
                "tau({t}) = {v} violates the strict delay bound with epsilon {epsilon}"
            )));
        }
        if i > 0 {
            let (tp, vp) = bp[i - 1];
            if t < tp || v < vp {
                return Err(Error::InvalidDelay(format!(
                    "breakpoints must be nondecreasing: ({tp}, {vp}) then ({t}, {v})"
                )));
            }
            if i > 1 && t == tp && bp[i - 2].0 == t {
                return Err(Error::InvalidDelay(format!("more than one jump at t = {t}")));
            }
            // The bound (t - eps)+ is convex, so inside a segment the margin can only
            // be tight at its kink t = eps.
            if tp < epsilon && epsilon < t {
                let v_eps = vp + (v - vp) * (epsilon - tp) / (t - tp);
                if v_eps > tol {
                    return Err(Error::InvalidDelay(format!(
                        "tau({epsilon}) = {v_eps} violates the strict delay bound"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Grid-level view of `τ⁻¹`: `inverse(j)` is the smallest node `k` with
/// `τ(t_k) ≥ t_j` (capped at `N`). Equality is resolved with a tolerance far
/// below the step so that exact ties land on the `κ` side.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayIndex {
    inv: Vec<usize>,
    taus: Vec<f64>,
}

impl DelayIndex {
    /// The limit `τ⁻¹(s) = s`: every `g` window is empty. Not an admissible
    /// delay, only a reference for limit checks.
    pub fn without_delay(grid: &TimeGrid) -> Self {
        let n = grid.n_steps();
        DelayIndex {
            inv: (0..=n).collect(),
            taus: grid.nodes(),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.inv.len() - 1
    }

    pub fn inverse(&self, j: usize) -> usize {
        self.inv[j]
    }

    pub fn inverses(&self) -> &[usize] {
        &self.inv
    }

    /// `τ(t_i)` at every node.
    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    /// Node pair `(i, j)` lies in the support of `g`: `t_j ≤ t_i < τ⁻¹(t_j)`.
    pub fn in_g_window(&self, i: usize, j: usize) -> bool {
        j <= i && i < self.inv[j]
    }

    /// Node pair `(i, j)` lies in the support of `κ`: `t_i ≥ τ⁻¹(t_j)`.
    pub fn in_kappa_support(&self, i: usize, j: usize) -> bool {
        i >= self.inv[j]
    }

    /// Number of kernel columns `j < N` with `(i, j)` in the support of `κ`;
    /// these are exactly `j = 0..len`.
    pub fn kappa_row_len(&self, i: usize) -> usize {
        let n = self.n_steps();
        self.inv[..n].partition_point(|&k| k <= i)
    }
}

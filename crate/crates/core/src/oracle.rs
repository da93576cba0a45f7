//! Closed forms for the market `X_t = B_t + tZ` on `[0, 1]`, with `B` a Brownian
//! motion and `Z ~ N(μ, σ²)` independent of it.
//!
//! `X` is Gauss–Markov with covariance `min(t,s)(1 + σ² max(t,s))`. In this
//! market `f̃ ≡ −σ²`, the resolvent and the drift are constant,
//! `f ≡ σ²/(1+σ²)` and `a ≡ μ/(1+σ²)`, and `g` has an explicit form. Only `κ`
//! remains implicit, as the solution of a scalar Volterra equation whose
//! coefficient is [`volterra_coefficient`].

use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::MarketSpec;
use crate::timegrid::{DelayMap, TimeGrid};

/// Panels used for the penalty integral.
pub const PENALTY_PANELS: usize = 20_000;

/// Parameters of the example market. `delay = None` is the zero-delay limit
/// `τ⁻¹(s) = s`, which is outside the admissible delays (`ε = 0`) and only
/// exists here as an analytic reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleParams {
    pub mu: f64,
    pub sigma2: f64,
    pub delay: Option<DelayMap>,
}

/// `(f, a, c)` of the example market.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OraclePrepared {
    pub f: f64,
    pub a: f64,
    pub c: f64,
}

impl ExampleParams {
    pub fn new(mu: f64, sigma2: f64, delay: Option<DelayMap>) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::domain("mu", mu, "finite"));
        }
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::domain("sigma2", sigma2, "[0, inf)"));
        }
        if let Some(d) = &delay {
            if (d.horizon() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "the example market lives on [0, 1], delay has horizon {}",
                    d.horizon()
                )));
            }
        }
        Ok(ExampleParams { mu, sigma2, delay })
    }

    /// `ã ≡ μ`, `f̃ ≡ −σ²` on a grid over `[0, 1]`.
    pub fn market_spec(&self, grid: TimeGrid) -> Result<MarketSpec> {
        if (grid.horizon() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "the example market needs horizon 1, got {}",
                grid.horizon()
            )));
        }
        MarketSpec::constant(grid, self.mu, -self.sigma2)
    }

    fn tau_inverse(&self, s: f64) -> Result<f64> {
        match &self.delay {
            Some(d) => d.tau_inverse_at(s),
            None => Ok(s),
        }
    }
}

fn check_unit(name: &'static str, t: f64) -> Result<f64> {
    if !(-1e-12..=1.0 + 1e-12).contains(&t) {
        return Err(Error::domain(name, t, "[0, 1]"));
    }
    Ok(t.clamp(0.0, 1.0))
}

pub fn oracle_prepared(p: &ExampleParams) -> OraclePrepared {
    let s2 = p.sigma2;
    OraclePrepared {
        f: s2 / (1.0 + s2),
        a: p.mu / (1.0 + s2),
        c: (s2 - p.mu * p.mu) / (2.0 * (1.0 + s2)) - 0.5 * s2.ln_1p(),
    }
}

/// `σ² / (1 + σ²(1 + s − τ⁻¹(s)))`.
pub fn volterra_coefficient(p: &ExampleParams, s: f64) -> Result<f64> {
    let s = check_unit("s", s)?;
    let inv = p.tau_inverse(s)?;
    Ok(p.sigma2 / (1.0 + p.sigma2 * (1.0 + s - inv)))
}

/// `g(t,s) = −𝟙{t < τ⁻¹(s)} σ² / (1 + σ²(1 + s − τ⁻¹(s)))` for `s ≤ t`.
///
/// A node lying on `τ⁻¹(s)` up to round-off counts as outside the window.
pub fn oracle_g(p: &ExampleParams, t: f64, s: f64) -> Result<f64> {
    let t = check_unit("t", t)?;
    let s = check_unit("s", s)?;
    if s > t + 1e-12 {
        return Err(Error::domain("s", s, format!("[0, t] with t = {t}")));
    }
    let inv = p.tau_inverse(s)?;
    if t < inv - 1e-12 {
        Ok(-volterra_coefficient(p, s)?)
    } else {
        Ok(0.0)
    }
}

/// `min(t,s) (1 + σ² max(t,s))`.
pub fn oracle_covariance(p: &ExampleParams, t: f64, s: f64) -> Result<f64> {
    let t = check_unit("t", t)?;
    let s = check_unit("s", s)?;
    Ok(t.min(s) * (1.0 + p.sigma2 * t.max(s)))
}

// 5-point Gauss–Legendre rule on [-1, 1]
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Composite Gauss–Legendre over `[a, b]` with panel edges at `cuts` and about
/// `panels` panels in total. No endpoint is ever evaluated.
pub(crate) fn integrate(mut psi: impl FnMut(f64) -> f64, a: f64, b: f64, cuts: &[f64], panels: usize) -> f64 {
    let mut edges = vec![a];
    edges.extend(cuts.iter().copied().filter(|&c| c > a && c < b));
    edges.push(b);
    let len = b - a;
    let mut total = 0.0;
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let k = ((panels as f64 * (hi - lo) / len).ceil() as usize).max(1);
        let width = (hi - lo) / k as f64;
        for p in 0..k {
            let mid = lo + (p as f64 + 0.5) * width;
            let half = 0.5 * width;
            let mut acc = 0.0;
            for (x, wt) in GL_NODES.iter().zip(&GL_WEIGHTS) {
                acc += wt * psi(mid + half * x);
            }
            total += half * acc;
        }
    }
    total
}

/// `σ⁴ / (2(1+σ²)) ∫₀¹ (τ⁻¹(t) − t) / (1 + σ²(1 + t − τ⁻¹(t))) dt`.
pub fn oracle_penalty(p: &ExampleParams) -> f64 {
    let Some(delay) = &p.delay else {
        return 0.0;
    };
    let s2 = p.sigma2;
    if s2 == 0.0 {
        return 0.0;
    }
    let cuts = delay.inverse_breakpoints();
    let integral = integrate(
        |t| {
            let gap = delay.tau_inverse_at(t).expect("quadrature node inside [0, 1]") - t;
            gap / (1.0 + s2 * (1.0 - gap))
        },
        0.0,
        1.0,
        &cuts,
        PENALTY_PANELS,
    );
    s2 * s2 / (2.0 * (1.0 + s2)) * integral
}

/// `−exp(c + penalty)`.
pub fn oracle_value(p: &ExampleParams) -> f64 {
    -(oracle_prepared(p).c + oracle_penalty(p)).exp()
}

/// Everything the oracle knows about one parameter set.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub mu: f64,
    pub sigma2: f64,
    pub f: f64,
    pub a: f64,
    pub c: f64,
    pub penalty: f64,
    pub value: f64,
    pub value_without_delay: f64,
}

pub fn oracle_report(p: &ExampleParams) -> OracleReport {
    let prep = oracle_prepared(p);
    OracleReport {
        mu: p.mu,
        sigma2: p.sigma2,
        f: prep.f,
        a: prep.a,
        c: prep.c,
        penalty: oracle_penalty(p),
        value: oracle_value(p),
        value_without_delay: -prep.c.exp(),
    }
}

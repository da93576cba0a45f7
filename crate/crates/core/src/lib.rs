//! Optimal trading under delayed information in a Gaussian market.
//!
//! The market law is a Gaussian measure equivalent to Wiener measure, given by a
//! drift density `ã` and a symmetric covariance perturbation kernel `f̃`. The
//! investor maximizes expected exponential utility of terminal wealth while only
//! observing prices up to `τ(t)` at time `t`. The optimal strategy is linear in
//! the observed increments, with a Volterra kernel `κ` obtained together with a
//! complementary symmetric kernel `g` from a coupled Fredholm/Volterra system.
//!
//! Everything is discretized on a uniform grid with the left-endpoint rule, which
//! matches the Itô convention of the stochastic integrals.
//!
//! Module map:
//! - [`timegrid`]: uniform grid, delay function `τ` and its left-continuous inverse.
//! - [`kernel`]: grid-sampled kernels with Hilbert–Schmidt operator semantics.
//! - [`market`]: resolvent kernel `f`, drift `a`, constant `c`, path log-density.
//! - [`solver`]: the `(κ, g)` system, the optimal strategy and the optimal value.
//! - [`oracle`]: closed forms for the market `X_t = B_t + tZ`.
//! - [`montecarlo`]: path simulation, utility estimation, perturbation tests.

pub mod error;
pub mod kernel;
pub mod market;
pub mod montecarlo;
pub mod oracle;
pub mod solver;
pub mod stats;
pub mod timegrid;

pub use error::{Error, Result};
pub use kernel::Kernel;
pub use market::{MarketSpec, PreparedMarket};
pub use montecarlo::{PathEnsemble, UtilityEstimate};
pub use oracle::ExampleParams;
pub use solver::{LinearStrategy, OptimalSolution};
pub use timegrid::{DelayMap, DelaySpec, TimeGrid};

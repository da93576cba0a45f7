use expdelay_core::kernel::Kernel;
use expdelay_core::montecarlo::sample_paths;
use expdelay_core::solver::{
    system_residual, g_tilde, solve, solve_g_with, solve_kappa_dense, support_overlap, LinearStrategy, WindowMethod,
};
use expdelay_core::{DelayMap, ExampleParams, MarketSpec, PreparedMarket, TimeGrid};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn contraction(n: usize, radius: f64, seed: u64) -> Kernel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let s = (&raw + raw.transpose()) * 0.5;
    let h = 1.0 / n as f64;
    let rho = (&s * h).symmetric_eigenvalues().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut s = s * (radius / rho);
    for i in 0..n {
        for j in 0..i {
            s[(j, i)] = s[(i, j)];
        }
    }
    Kernel::symmetric(TimeGrid::new(1.0, n).unwrap(), s).unwrap()
}

fn market(n: usize, radius: f64, seed: u64) -> PreparedMarket {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let at: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    PreparedMarket::new(MarketSpec::new(at, contraction(n, radius, seed)).unwrap()).unwrap()
}

/// Piecewise-linear delay: zero up to `eps`, then through `(mid, v_mid)` to `(1, v_end)`.
fn arb_delay() -> impl Strategy<Value = DelayMap> {
    (0.05f64..0.6, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(eps, c, a, b)| {
        let mid = eps + (1.0 - eps) * (0.05 + 0.9 * c);
        let v_mid = a * (mid - eps);
        let v_end = v_mid + b * ((1.0 - eps) - v_mid);
        DelayMap::piecewise_linear(vec![(0.0, 0.0), (eps, 0.0), (mid, v_mid), (1.0, v_end)], eps, 1.0).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solution_satisfies_the_system(n in 8usize..28, radius in 0.05f64..0.9, seed in any::<u64>(), d in arb_delay()) {
        let pm = market(n, radius, seed);
        let sol = solve(&pm, &d).unwrap();
        prop_assert!(sol.g.is_symmetric());
        prop_assert!(sol.kappa.is_volterra());
        prop_assert!(system_residual(pm.f(), &sol.kappa, &sol.g) < 1e-8);
        prop_assert_eq!(support_overlap(&sol.kappa, &sol.g), 0);
        for i in 0..n {
            for j in 0..=i {
                if sol.index().in_kappa_support(i, j) {
                    prop_assert_eq!(sol.g.get(i, j), 0.0);
                    prop_assert_eq!(sol.g_tilde.get(i, j), 0.0);
                } else {
                    prop_assert_eq!(sol.kappa.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn solution_is_route_independent(n in 8usize..24, radius in 0.05f64..0.9, seed in any::<u64>(), d in arb_delay()) {
        let pm = market(n, radius, seed);
        let sol = solve(&pm, &d).unwrap();
        for method in [WindowMethod::Direct, WindowMethod::DirectReversed] {
            let g = solve_g_with(&pm, &d, method).unwrap();
            prop_assert!((g.values() - sol.g.values()).amax() < 1e-10);
        }
        let k = solve_kappa_dense(&pm, &d, &sol.g).unwrap();
        prop_assert!((k.values() - sol.kappa.values()).amax() < 1e-10);
    }

    #[test]
    fn g_tilde_is_lower_triangular_and_exact_on_diagonal_band(n in 4usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let g = Kernel::symmetric(TimeGrid::new(1.0, n).unwrap(), (&raw + raw.transpose()) * 0.5).unwrap();
        let gt = g_tilde(&g);
        prop_assert!(gt.is_volterra());
        for i in 0..n {
            prop_assert_eq!(gt.get(i, 0), g.get(i, 0));
        }
    }

    #[test]
    fn strategy_ignores_future_increments(n in 10usize..30, seed in any::<u64>(), d in arb_delay()) {
        let pm = market(n, 0.6, seed);
        let sol = solve(&pm, &d).unwrap();
        let strat = LinearStrategy::optimal(&sol, pm.a()).unwrap();
        let grid = TimeGrid::new(1.0, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let dx: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..0.2)).collect();
        let base = strat.evaluate_increments(&dx);
        let taus = sol.index().taus();
        for i in 0..n {
            let moved: Vec<f64> = dx
                .iter()
                .enumerate()
                .map(|(k, v)| if grid.node(k) > taus[i] + 1e-12 { v + 3.0 } else { *v })
                .collect();
            prop_assert_eq!(strat.evaluate_increments(&moved)[i], base[i]);
        }
    }
}

#[test]
fn discrete_value_nonincreasing_in_lag() {
    let n = 200;
    let grid = TimeGrid::new(1.0, n).unwrap();
    for (mu, s2) in [(0.0, 1.0), (1.0, 1.0), (0.0, 3.0)] {
        let p = ExampleParams::new(mu, s2, None).unwrap();
        let pm = PreparedMarket::new(p.market_spec(grid).unwrap()).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let d = DelayMap::constant_lag(k as f64 * 0.1, 1.0).unwrap();
            let v = solve(&pm, &d).unwrap().value.value;
            assert!(v <= last, "lag {} raised the value", k as f64 * 0.1);
            last = v;
        }
    }
}

#[test]
fn ensemble_node_means_match_the_drift() {
    let n = 20;
    let grid = TimeGrid::new(1.0, n).unwrap();
    let p = ExampleParams::new(0.8, 0.5, None).unwrap();
    let spec = p.market_spec(grid).unwrap();
    let mean = spec.mean_vector();
    let pm = PreparedMarket::new(spec).unwrap();
    let m = 50_000;
    let ens = sample_paths(&pm, m, 11).unwrap();
    for i in 1..=n {
        let (avg, var) = ens.node_moments(i);
        assert!((avg - mean[i]).abs() <= 4.0 * (var / m as f64).sqrt(), "node {i}");
    }
}

//! The pipelines behind each subcommand. Every report is written to the output
//! directory and also returned to the caller.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use expdelay_core::kernel::write_vector_csv;
use expdelay_core::market::PreparedSummary;
use expdelay_core::montecarlo::{
    estimate_strategy_utility, perturbation_test, random_perturbations, rn_normalization, sample_paths,
    sample_wiener, NormalizationCheck, UtilityEstimate,
};
use expdelay_core::oracle::{oracle_report, OracleReport};
use expdelay_core::solver::{system_residual, refinement_gap, solve, OptimalSolution, SolutionDiagnostics, ValueParts};
use expdelay_core::{Kernel, LinearStrategy, PreparedMarket};
use serde::Serialize;

use crate::error::CliError;
use crate::scenario::{LoadedScenario, Provenance};

/// Number of standard errors a statistical check tolerates.
pub const TOLERANCE_SE: f64 = 3.0;
/// Perturbation magnitudes tried along every direction.
pub const MAGNITUDES: [f64; 3] = [0.02, 0.1, 0.5];

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join(name))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn csv_header(p: &Provenance) -> String {
    format!(
        "# scenario_hash={} horizon_T={} n_steps={} step={}\n",
        p.scenario_hash, p.horizon, p.n_steps, p.step
    )
}

fn write_kernel(out: &Path, name: &str, p: &Provenance, k: &Kernel) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join(name))?);
    w.write_all(csv_header(p).as_bytes())?;
    k.write_csv(&mut w)?;
    Ok(())
}

fn write_vector(out: &Path, name: &str, p: &Provenance, v: &[f64]) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join(name))?);
    w.write_all(csv_header(p).as_bytes())?;
    write_vector_csv(v, &mut w)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct PreparedReport {
    pub scenario: Provenance,
    pub prepared: PreparedSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub oracle_value: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolutionReport {
    pub scenario: Provenance,
    pub value: ValueParts,
    pub diagnostics: SolutionDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleComparison>,
}

/// Value the pipeline should reproduce exactly or in the limit, if one is known.
fn reference_value(sc: &LoadedScenario, pm: &PreparedMarket) -> Result<Option<f64>, CliError> {
    if let Some(p) = sc.example()? {
        return Ok(Some(expdelay_core::oracle::oracle_value(&p)));
    }
    if sc.is_covariance_free() {
        let h = pm.grid().step();
        let at = sc.a_tilde_table().expect("tabulated market");
        return Ok(Some(-(-0.5 * h * at.iter().map(|a| a * a).sum::<f64>()).exp()));
    }
    Ok(None)
}

fn prepare_and_solve(sc: &LoadedScenario) -> Result<(PreparedMarket, OptimalSolution), CliError> {
    let pm = PreparedMarket::new(sc.market_spec()?)?;
    let sol = solve(&pm, &sc.delay()?)?;
    Ok((pm, sol))
}

/// Prepares the market, solves for `(κ, g)` and writes `prepared.json`,
/// `solution.json`, `kappa.csv`, `g.csv` and `gtilde.csv`.
pub fn run_solve(sc: &LoadedScenario, out: &Path) -> Result<SolutionReport, CliError> {
    let (pm, sol) = prepare_and_solve(sc)?;
    let prov = sc.provenance();
    write_json(
        out,
        "prepared.json",
        &PreparedReport {
            scenario: prov.clone(),
            prepared: pm.summary(),
        },
    )?;
    let oracle = reference_value(sc, &pm)?.map(|v| OracleComparison {
        oracle_value: v,
        relative_error: ((sol.value.value - v) / v).abs(),
    });
    let report = SolutionReport {
        scenario: prov.clone(),
        value: sol.value,
        diagnostics: sol.diagnostics(&pm),
        oracle,
    };
    write_json(out, "solution.json", &report)?;
    write_kernel(out, "kappa.csv", &prov, &sol.kappa)?;
    write_kernel(out, "g.csv", &prov, &sol.g)?;
    write_kernel(out, "gtilde.csv", &prov, &sol.g_tilde)?;
    Ok(report)
}

/// Writes `f.csv`, `a.csv`, `kappa.csv`, `g.csv` and `gtilde.csv` only.
pub fn run_dump_kernels(sc: &LoadedScenario, out: &Path) -> Result<(), CliError> {
    let (pm, sol) = prepare_and_solve(sc)?;
    let prov = sc.provenance();
    write_kernel(out, "f.csv", &prov, pm.f())?;
    write_vector(out, "a.csv", &prov, pm.a())?;
    write_kernel(out, "kappa.csv", &prov, &sol.kappa)?;
    write_kernel(out, "g.csv", &prov, &sol.g)?;
    write_kernel(out, "gtilde.csv", &prov, &sol.g_tilde)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleOutput {
    pub scenario: Provenance,
    pub oracle: OracleReport,
}

/// Closed-form quantities of the example market, written to `oracle.json`.
pub fn run_oracle(sc: &LoadedScenario, out: &Path) -> Result<OracleOutput, CliError> {
    let p = sc
        .example()?
        .ok_or_else(|| CliError::Validation("closed forms exist only for the example market".into()))?;
    let report = OracleOutput {
        scenario: sc.provenance(),
        oracle: oracle_report(&p),
    };
    write_json(out, "oracle.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n_steps: usize,
    pub step: f64,
    pub value: f64,
    pub system_residual: f64,
    /// Largest change of `(κ, g)` at shared nodes against the previous level,
    /// when this level refines it.
    pub refinement_gap: Option<f64>,
    pub reference_value: Option<f64>,
    pub relative_gap: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Solves at every level and writes `convergence.csv`.
pub fn run_convergence(sc: &LoadedScenario, levels: &[usize], out: &Path) -> Result<Vec<ConvergenceRow>, CliError> {
    if levels.is_empty() {
        return Err(CliError::Validation("no levels given".into()));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Validation(format!("levels must increase: {levels:?}")));
    }
    let mut rows = Vec::new();
    let mut previous: Option<OptimalSolution> = None;
    let mut hashes = Vec::new();
    for &n in levels {
        let level = sc.with_steps(n)?;
        let (pm, sol) = prepare_and_solve(&level)?;
        let reference = reference_value(&level, &pm)?;
        let refinement = match &previous {
            Some(prev) if n % prev.kappa.n() == 0 => Some(refinement_gap(prev, &sol)?),
            _ => None,
        };
        rows.push(ConvergenceRow {
            n_steps: n,
            step: pm.grid().step(),
            value: sol.value.value,
            system_residual: system_residual(pm.f(), &sol.kappa, &sol.g),
            refinement_gap: refinement,
            reference_value: reference,
            relative_gap: reference.map(|r| ((sol.value.value - r) / r).abs()),
        });
        hashes.push(level.hash().to_string());
        previous = Some(sol);
    }

    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("convergence.csv"))?);
    writeln!(
        w,
        "scenario_hash,horizon_T,n_steps,step,value,system_residual,refinement_gap,reference_value,relative_gap"
    )?;
    for (r, h) in rows.iter().zip(&hashes) {
        writeln!(
            w,
            "{h},{},{},{:e},{:e},{:e},{},{},{}",
            sc.scenario.horizon,
            r.n_steps,
            r.step,
            r.value,
            r.system_residual,
            opt(r.refinement_gap),
            opt(r.reference_value),
            opt(r.relative_gap)
        )?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct UtilityCheck {
    pub strategy: &'static str,
    pub estimate: UtilityEstimate,
    pub target: f64,
    pub z_score: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationSummary {
    pub n_directions: usize,
    pub magnitudes: Vec<f64>,
    pub optimum: UtilityEstimate,
    /// Largest `(perturbed − optimum) / combined SE` over all trials.
    pub max_improvement_se: f64,
    pub failures: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaCheck {
    pub alphas: Vec<f64>,
    pub estimates: Vec<UtilityEstimate>,
    pub max_gap_se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateReport {
    pub scenario: Provenance,
    pub n_paths: usize,
    pub seed: u64,
    pub alpha: f64,
    pub value: f64,
    pub utility: UtilityCheck,
    pub perturbation: PerturbationSummary,
    pub risk_aversion: AlphaCheck,
    pub rn_normalization: NormalizationCheck,
    pub pass: bool,
}

/// Monte Carlo checks of the solution; writes `validate.json` and returns a
/// statistical error after writing when any check fails.
pub fn run_validate(sc: &LoadedScenario, out: &Path, zero_strategy: bool) -> Result<ValidateReport, CliError> {
    let mc = sc.mc()?.clone();
    let (pm, sol) = prepare_and_solve(sc)?;
    let grid = *pm.grid();
    let ens = sample_paths(&pm, mc.n_paths, mc.seed)?;

    let optimal = LinearStrategy::optimal(&sol, pm.a())?;
    let utility = if zero_strategy {
        let zero = LinearStrategy::new(vec![0.0; grid.n_steps()], &Kernel::zeros(grid), sol.index())?;
        let estimate = estimate_strategy_utility(&zero, &ens, mc.alpha)?;
        utility_check("zero", estimate, -1.0)
    } else {
        let estimate = estimate_strategy_utility(&optimal, &ens, mc.alpha)?;
        utility_check("optimal", estimate, sol.value.value)
    };

    let etas = random_perturbations(&grid, sol.index(), mc.n_perturbations, mc.seed.wrapping_add(1))?;
    let rep = perturbation_test(&pm, &sol, &ens, &etas, &MAGNITUDES)?;
    let perturbation = PerturbationSummary {
        n_directions: etas.len(),
        magnitudes: MAGNITUDES.to_vec(),
        optimum: rep.optimum,
        max_improvement_se: rep
            .outcomes
            .iter()
            .map(|o| if o.combined_std_error > 0.0 { -o.gap / o.combined_std_error } else { 0.0 })
            .fold(f64::NEG_INFINITY, f64::max),
        failures: rep.outcomes.iter().filter(|o| !o.pass).count(),
        pass: rep.pass,
    };

    let alphas = vec![0.5, 1.0, 2.0];
    let estimates = alphas
        .iter()
        .map(|&a| estimate_strategy_utility(&optimal, &ens, a))
        .collect::<Result<Vec<_>, _>>()?;
    let mut max_gap_se = 0.0f64;
    for a in &estimates {
        for b in &estimates {
            let se = a.std_error.hypot(b.std_error);
            if se > 0.0 {
                max_gap_se = max_gap_se.max((a.mean - b.mean).abs() / se);
            } else if a.mean != b.mean {
                max_gap_se = f64::INFINITY;
            }
        }
    }
    let risk_aversion = AlphaCheck {
        alphas,
        estimates,
        max_gap_se,
        pass: max_gap_se <= TOLERANCE_SE,
    };
    drop(ens);

    let wiener = sample_wiener(grid, mc.n_paths, mc.seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let rn = rn_normalization(&pm, &wiener)?;

    let pass = utility.pass && perturbation.pass && risk_aversion.pass && rn.pass;
    let report = ValidateReport {
        scenario: sc.provenance(),
        n_paths: mc.n_paths,
        seed: mc.seed,
        alpha: mc.alpha,
        value: sol.value.value,
        utility,
        perturbation,
        risk_aversion,
        rn_normalization: rn,
        pass,
    };
    write_json(out, "validate.json", &report)?;
    Ok(report)
}

fn utility_check(strategy: &'static str, estimate: UtilityEstimate, target: f64) -> UtilityCheck {
    let diff = estimate.mean - target;
    let z_score = if estimate.std_error > 0.0 {
        diff / estimate.std_error
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    UtilityCheck {
        strategy,
        estimate,
        target,
        z_score,
        pass: z_score.abs() <= TOLERANCE_SE,
    }
}

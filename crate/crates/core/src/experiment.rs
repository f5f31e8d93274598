//! End-to-end runs behind the command-line subcommands.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Sabotage};
use crate::error::Result;
use crate::funcalc::PathFunctional;
use crate::market::{MarketModel, ScaledPolicy};
use crate::optimizer::{closed_form, has_closed_form, optimal_portfolio, power_integrand, ClosedForm, DeflatedWealthFunctional, OptimalPolicy, PortfolioResult};
use crate::paths::{brownian_member, simulate_brownian, Path, TimeGrid};
use crate::report::fmt_num;
use crate::rng;
use crate::stats::RunningStats;
use crate::utility::{solve_multiplier, BudgetSample, EstimatorConfig, MultiplierSolve, UtilitySpec};
use crate::verify::{
    convergence_study, likelihood_mean_test, martingale_flatness, moment_stability_test, replication_test, Comparison, ConvergenceRow, Fingerprint,
    TestReport, REPLICATION_TOLERANCE,
};

/// Key domain for choosing evaluation points.
const POINT_DOMAIN: u64 = 0x504f_494e_5400_0004;

/// Oracle tolerance on the portfolio: relative error for log, relative error of `π/X` for power.
pub fn oracle_tolerance(utility: &UtilitySpec) -> f64 {
    match utility {
        UtilitySpec::Log => 0.02,
        UtilitySpec::Power { .. } => 0.05,
    }
}

/// A validated config turned into model objects.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub market: MarketModel,
    pub utility: UtilitySpec,
    pub x0: f64,
    pub estimator: EstimatorConfig,
}

/// Budget paths and the multiplier solved on them.
#[derive(Debug)]
pub struct Solved {
    pub budget: BudgetSample,
    pub solve: MultiplierSolve,
}

/// Numerical and closed-form portfolio at one `(t, ω)`.
#[derive(Clone, Debug)]
pub struct OraclePoint {
    pub path: Path,
    pub result: PortfolioResult,
    pub oracle: ClosedForm,
}

impl OraclePoint {
    /// `|π - π_c| / |π_c|` for log utility, the same on `π / X` otherwise.
    pub fn relative_error(&self, utility: &UtilitySpec) -> f64 {
        let (num, exact) = match utility {
            UtilitySpec::Log => (self.result.pi.clone(), self.oracle.pi.clone()),
            UtilitySpec::Power { .. } => (&self.result.pi / self.result.wealth, &self.oracle.pi / self.oracle.wealth),
        };
        (num - &exact).norm() / exact.norm().max(1e-12)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergeOutput {
    pub rows: Vec<ConvergenceRow>,
    pub reports: Vec<TestReport>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        Ok(Self {
            market: config.market_model()?,
            utility: config.utility_spec()?,
            x0: config.utility.x0,
            estimator: config.estimator.clone(),
            config,
        })
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::from(&self.estimator)
    }

    fn fingerprint_with(&self, outer: usize, inner: usize, steps: usize) -> Fingerprint {
        Fingerprint { outer_paths: outer, inner_paths: inner, steps, ..self.fingerprint() }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        self.estimator.grid(self.market.horizon())
    }

    pub fn solve(&self) -> Result<Solved> {
        let budget = BudgetSample::simulate(&self.market, &self.estimator)?;
        let solve = solve_multiplier(&self.utility, &budget, self.x0, self.estimator.budget_rel_tol)?;
        Ok(Solved { budget, solve })
    }

    pub fn functional(&self, solved: &Solved, inner: usize) -> Result<DeflatedWealthFunctional> {
        DeflatedWealthFunctional::new(self.market.clone(), self.utility, solved.solve.multiplier, inner, self.estimator.seed)
    }

    pub fn outer_path(&self, grid: TimeGrid, id: u64) -> Path {
        brownian_member(grid, self.market.dim(), self.estimator.seed, id)
    }

    pub fn has_oracle(&self) -> bool {
        has_closed_form(&self.market, &self.utility)
    }

    /// Portfolio at every node of outer path `run.path_index`, with the closed form when known.
    pub fn portfolio(&self, solved: &Solved) -> Result<(Vec<PortfolioResult>, Option<Vec<ClosedForm>>)> {
        let grid = self.grid()?;
        let f = self.functional(solved, self.estimator.inner_paths)?;
        let path = self.outer_path(grid, self.config.run.path_index as u64);
        let results = (0..=grid.steps()).map(|k| optimal_portfolio(&f, k, &path, self.estimator.bump)).collect::<Result<Vec<_>>>()?;
        let oracle = if self.has_oracle() {
            Some((0..=grid.steps()).map(|k| closed_form(&self.market, &self.utility, self.x0, k, &path)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok((results, oracle))
    }

    /// `count` pseudo-random `(node, path)` pairs strictly before the horizon.
    pub fn evaluation_points(&self, grid: TimeGrid, count: usize) -> Vec<(usize, Path)> {
        (0..count as u64)
            .map(|i| {
                let node = (rng::key_digest(self.estimator.seed, POINT_DOMAIN, &[i]) % grid.steps() as u64) as usize;
                (node, self.outer_path(grid, i))
            })
            .collect()
    }

    pub fn oracle_points(&self, f: &DeflatedWealthFunctional, count: usize, h: f64) -> Result<Vec<OraclePoint>> {
        let grid = self.grid()?;
        self.evaluation_points(grid, count)
            .into_iter()
            .map(|(node, path)| {
                Ok(OraclePoint {
                    result: optimal_portfolio(f, node, &path, h)?,
                    oracle: closed_form(&self.market, &self.utility, self.x0, node, &path)?,
                    path,
                })
            })
            .collect()
    }

    /// `M(t_k)` on every node of `n` outer paths, indexed `[node][path]`.
    pub fn martingale_samples(&self, f: &DeflatedWealthFunctional, n: usize) -> Result<Vec<Vec<f64>>> {
        let grid = self.grid()?;
        let ensemble = simulate_brownian(grid, self.market.dim(), n, self.estimator.seed)?;
        let per_path = ensemble
            .paths()
            .par_iter()
            .map(|p| (0..=grid.steps()).map(|k| f.evaluate(k, p)).collect::<Result<Vec<f64>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok((0..=grid.steps()).map(|k| per_path.iter().map(|row| row[k]).collect()).collect())
    }

    /// The `verify` suite: multiplier, oracle, flatness, replication and sanity checks.
    pub fn verify(&self) -> Result<Vec<TestReport>> {
        let v = &self.config.verify;
        let sabotage = self.config.run.sabotage;
        let fp = self.fingerprint();
        let solved = self.solve()?;
        let mut reports = Vec::new();

        let s = &solved.solve;
        reports.push(
            TestReport::new("multiplier/budget-residual", (s.budget - self.x0).abs() / self.x0, 0.0, s.rel_tol, Comparison::AtMost, fp)
                .with_note(format!("y = {} after {} evaluations", fmt_num(s.multiplier), s.iterations)),
        );

        if self.has_oracle() {
            let f = self.functional(&solved, self.estimator.inner_paths)?;
            let points = self.oracle_points(&f, v.oracle_points, self.estimator.bump)?;
            reports.extend(self.oracle_reports(&points, fp)?);
        }

        let flat_f = self.functional(&solved, v.flatness_inner)?;
        let mut samples = self.martingale_samples(&flat_f, v.flatness_paths)?;
        if sabotage == Sabotage::DriftMartingale {
            plant_drift(&mut samples, self.x0);
        }
        let flat = martingale_flatness("flatness/M", &samples, self.x0, s.budget_stderr, self.fingerprint_with(v.flatness_paths, v.flatness_inner, self.estimator.steps))?;
        reports.push(flat.report);

        let grid = self.grid()?;
        let rep_f = self.functional(&solved, v.replication_inner)?;
        let ensemble = simulate_brownian(grid, self.market.dim(), v.replication_paths, self.estimator.seed)?;
        let optimal = OptimalPolicy { functional: &rep_f, bump: self.estimator.bump };
        let rep_fp = self.fingerprint_with(v.replication_paths, v.replication_inner, self.estimator.steps);
        let outcome = match sabotage {
            Sabotage::DoublePolicy => {
                let doubled = ScaledPolicy { inner: optimal, factor: 2.0 };
                replication_test("replication/numerical-policy", &self.market, &doubled, &rep_f, self.x0, &ensemble, REPLICATION_TOLERANCE, rep_fp)?
            }
            _ => replication_test("replication/numerical-policy", &self.market, &optimal, &rep_f, self.x0, &ensemble, REPLICATION_TOLERANCE, rep_fp)?,
        };
        reports.push(outcome.report);

        let sanity = simulate_brownian(grid, self.market.dim(), v.sanity_paths, self.estimator.seed)?;
        reports.push(likelihood_mean_test("sanity/likelihood-mean", &self.market, &sanity, self.fingerprint_with(v.sanity_paths, 0, self.estimator.steps))?.0);
        let half = solved.budget.len() / 2;
        if half > 0 {
            let y = s.multiplier;
            let a = solved.budget.second_moment(&self.utility, y, 0..half)?;
            let b = solved.budget.second_moment(&self.utility, y, half..2 * half)?;
            reports.push(moment_stability_test("sanity/second-moment", a, b, fp));
        }
        Ok(reports)
    }

    fn oracle_reports(&self, points: &[OraclePoint], fp: Fingerprint) -> Result<Vec<TestReport>> {
        let tol = oracle_tolerance(&self.utility);
        let worst = points.iter().map(|p| p.relative_error(&self.utility)).fold(0.0, f64::max);
        let what = match self.utility {
            UtilitySpec::Log => "pi",
            UtilitySpec::Power { .. } => "pi/X",
        };
        let mut out = vec![TestReport::new("oracle/portfolio-relative-error", worst, 0.0, tol, Comparison::AtMost, fp)
            .with_note(format!("max relative error of {what} over {} points", points.len()))];
        match self.utility {
            UtilitySpec::Log => {
                let largest = points.iter().map(|p| p.result.gradient.amax()).fold(0.0, f64::max);
                out.push(TestReport::new("oracle/gradient-zero", largest, 0.0, 0.0, Comparison::AtMost, fp).with_note("max |grad M| over points"));
            }
            UtilitySpec::Power { gamma } if self.market.is_deterministic() => {
                let mut worst_z: f64 = 0.0;
                for p in points {
                    let (z, _) = gradient_z_score(&self.market, gamma, p)?;
                    worst_z = worst_z.max(z);
                }
                out.push(
                    TestReport::new("oracle/gradient-closed-form", worst_z, 0.0, 3.0, Comparison::AtMost, fp)
                        .with_note("max over points of |grad M - closed form| in combined standard errors"),
                );
            }
            UtilitySpec::Power { .. } => {}
        }
        Ok(out)
    }

    /// Bump, inner-budget and time-step sweeps.
    pub fn converge(&self) -> Result<ConvergeOutput> {
        let c = &self.config.converge;
        let solved = self.solve()?;
        let fp = self.fingerprint();
        let mut rows = Vec::new();
        let mut reports = Vec::new();

        if self.has_oracle() {
            let f = self.functional(&solved, self.estimator.inner_paths)?;
            let study = convergence_study("converge/bump", "h", &c.bumps, 2.0, fp, |h| {
                let pts = self.oracle_points(&f, c.points, h)?;
                Ok(pts.iter().map(|p| p.relative_error(&self.utility)).sum::<f64>() / pts.len() as f64)
            })?;
            rows.extend(study.rows);
            reports.extend(study.reports);
        }

        let inner: Vec<f64> = c.inner.iter().map(|m| *m as f64).collect();
        let study = convergence_study("converge/inner", "m", &inner, -0.5, fp, |m| {
            let f = self.functional(&solved, m as usize)?;
            let pts = self.oracle_like_points(&f, c.points)?;
            Ok(pts.iter().map(|r| r.gradient_stderr.norm()).sum::<f64>() / pts.len() as f64)
        })?;
        rows.extend(study.rows);
        reports.extend(study.reports);

        let finest = *c.steps.iter().max().unwrap_or(&1);
        let fine_grid = TimeGrid::new(self.market.horizon(), finest)?;
        let fine = simulate_brownian(fine_grid, self.market.dim(), c.paths, self.estimator.seed)?;
        let rep_f = self.functional(&solved, self.config.verify.replication_inner)?;
        let steps: Vec<f64> = c.steps.iter().map(|k| *k as f64).collect();
        let study = convergence_study("converge/steps", "K", &steps, -0.5, fp, |k| {
            let ensemble = fine.coarsen(finest / k as usize)?;
            let policy = OptimalPolicy { functional: &rep_f, bump: self.estimator.bump };
            let fpk = self.fingerprint_with(c.paths, self.config.verify.replication_inner, k as usize);
            Ok(replication_test("converge/replication", &self.market, &policy, &rep_f, self.x0, &ensemble, REPLICATION_TOLERANCE, fpk)?.relative_rmse)
        })?;
        rows.extend(study.rows);
        reports.extend(study.reports);
        Ok(ConvergeOutput { rows, reports })
    }

    fn oracle_like_points(&self, f: &DeflatedWealthFunctional, count: usize) -> Result<Vec<PortfolioResult>> {
        let grid = self.grid()?;
        self.evaluation_points(grid, count).into_iter().map(|(node, path)| optimal_portfolio(f, node, &path, self.estimator.bump)).collect()
    }
}

/// `|∇M - closed form|` in combined standard errors, and the closed form itself.
///
/// The closed form is `M (-γ/(γ-1)) θ` evaluated at the numerical `M`, so its standard error is
/// the inner standard error of `M` scaled by the same factor.
pub fn gradient_z_score(market: &MarketModel, gamma: f64, p: &OraclePoint) -> Result<(f64, DVector<f64>)> {
    let r = &p.result;
    let g = power_integrand(market, gamma, r.node, &p.path, r.deflated_wealth)?;
    let scale = (gamma / (gamma - 1.0)).abs();
    let mut worst: f64 = 0.0;
    for i in 0..g.len() {
        let se = (r.gradient_stderr[i].powi(2) + (scale * r.theta[i].abs() * r.inner_stderr).powi(2)).sqrt();
        let d = (r.gradient[i] - g[i]).abs();
        let z = if se > 0.0 { d / se } else if d == 0.0 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    }
    Ok((worst, g))
}

/// Adds a drift that grows linearly to 10 standard errors at the last node.
///
/// Nodes with zero spread use a floor of `1e-3 * target` as their standard error.
pub fn plant_drift(samples: &mut [Vec<f64>], target: f64) {
    let last = samples.len().saturating_sub(1).max(1) as f64;
    for (k, xs) in samples.iter_mut().enumerate() {
        let se = xs.iter().copied().collect::<RunningStats>().stderr().max(1e-3 * target.abs());
        let shift = 10.0 * se * k as f64 / last;
        xs.iter_mut().for_each(|x| *x += shift);
    }
}

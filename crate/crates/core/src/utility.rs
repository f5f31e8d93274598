//! Utility families, the inverse marginal utility and the budget multiplier.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Error, Result};
use crate::market::{DeflatorKernel, MarketModel};
use crate::paths::{extend_in_place, fill_increments, Path, TimeGrid};
use crate::rng::{self, BUDGET_DOMAIN};
use crate::stats::{Estimate, RunningStats};

/// Log utility or CRRA power utility `x^γ / γ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum UtilitySpec {
    Log,
    Power { gamma: f64 },
}

impl UtilitySpec {
    pub fn log() -> Self {
        UtilitySpec::Log
    }

    /// Power utility; requires `γ < 1` and `γ != 0`.
    pub fn power(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma < 1.0 && gamma != 0.0) {
            return Err(invalid(format!("power utility needs gamma < 1 and gamma != 0, got {gamma}")));
        }
        Ok(UtilitySpec::Power { gamma })
    }

    pub fn name(&self) -> &'static str {
        match self {
            UtilitySpec::Log => "log",
            UtilitySpec::Power { .. } => "power",
        }
    }

    /// `U(x)`; `-inf` at zero where the family diverges.
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            UtilitySpec::Log => x.ln(),
            UtilitySpec::Power { gamma } => x.powf(gamma) / gamma,
        }
    }

    /// `U'(x)`.
    pub fn marginal(&self, x: f64) -> f64 {
        match *self {
            UtilitySpec::Log => 1.0 / x,
            UtilitySpec::Power { gamma } => x.powf(gamma - 1.0),
        }
    }

    /// `I(y)`, the inverse of `U'`.
    pub fn inverse_marginal(&self, y: f64) -> Result<f64> {
        if !(y > 0.0 && y.is_finite()) {
            return Err(invalid(format!("inverse marginal utility needs y > 0, got {y}")));
        }
        Ok(match *self {
            UtilitySpec::Log => 1.0 / y,
            UtilitySpec::Power { gamma } => y.powf(1.0 / (gamma - 1.0)),
        })
    }

    /// `H I(y H)` from `ln H`. Exactly `1/y` for log utility, whatever `H` is.
    #[inline]
    pub fn deflated_payoff_from_log_h(&self, y: f64, log_h: f64) -> f64 {
        match *self {
            UtilitySpec::Log => 1.0 / y,
            UtilitySpec::Power { gamma } => (log_h + (y.ln() + log_h) / (gamma - 1.0)).exp(),
        }
    }

    /// Optimal risky fraction relative to the log investor's: `1 / (1 - γ)`.
    pub fn relative_risk_tolerance(&self) -> f64 {
        match *self {
            UtilitySpec::Log => 1.0,
            UtilitySpec::Power { gamma } => 1.0 / (1.0 - gamma),
        }
    }
}

/// Monte Carlo budgets shared by the estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Time steps `K`.
    pub steps: usize,
    /// Outer paths `N`.
    pub outer_paths: usize,
    /// Inner extensions `m` per conditional expectation.
    pub inner_paths: usize,
    /// Vertical bump `h`.
    pub bump: f64,
    pub seed: u64,
    /// Paths behind the budget constraint estimate.
    pub budget_paths: usize,
    /// Stop the multiplier search once `|budget - x0| <= budget_rel_tol * x0`.
    pub budget_rel_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { steps: 64, outer_paths: 1000, inner_paths: 10_000, bump: 0.05, seed: 20_240_607, budget_paths: 1 << 20, budget_rel_tol: 1e-8 }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Error::Config { path: format!("estimator.{name}"), message: msg.into() };
        if self.steps == 0 {
            return Err(field("steps", "must be at least 1"));
        }
        if self.outer_paths == 0 {
            return Err(field("outer_paths", "must be at least 1"));
        }
        if self.inner_paths == 0 {
            return Err(field("inner_paths", "must be at least 1"));
        }
        if !(self.bump.is_finite() && self.bump > 0.0) {
            return Err(field("bump", "must be positive"));
        }
        if self.budget_paths == 0 {
            return Err(field("budget_paths", "must be at least 1"));
        }
        if !(self.budget_rel_tol.is_finite() && self.budget_rel_tol > 0.0) {
            return Err(field("budget_rel_tol", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self, horizon: f64) -> Result<TimeGrid> {
        TimeGrid::new(horizon, self.steps)
    }
}

/// Terminal state price densities on a fixed set of budget paths.
///
/// Every trial multiplier is evaluated on the same paths, so the estimated budget is a
/// deterministic, strictly decreasing function of `y`.
#[derive(Clone, Debug)]
pub struct BudgetSample {
    log_h: Vec<f64>,
}

impl BudgetSample {
    pub fn simulate(market: &MarketModel, config: &EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid(market.horizon())?;
        let kernel = DeflatorKernel::new(market, grid)?;
        let n = market.dim();
        let k = grid.steps();
        let sqrt_dt = grid.dt().sqrt();
        const CHUNK: usize = 4096;
        let chunks: Vec<usize> = (0..config.budget_paths.div_ceil(CHUNK)).collect();
        let parts = chunks
            .par_iter()
            .map(|&c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(config.budget_paths);
                let mut incs = vec![0.0; k * n];
                let mut scratch = Path::zeros(grid, n)?;
                let mut out = Vec::with_capacity(hi - lo);
                for j in lo..hi {
                    let mut rng = rng::stream(config.seed, BUDGET_DOMAIN, &[j as u64]);
                    fill_increments(&mut rng, sqrt_dt, &mut incs);
                    let log_h = match kernel.table() {
                        Some(t) => t.block(0, &incs).log_h(),
                        None => {
                            extend_in_place(&mut scratch, 0, &incs)?;
                            kernel.prefix(&scratch, k)?.log_h()
                        }
                    };
                    if !log_h.is_finite() {
                        return Err(numeric(format!("terminal state price non-finite on budget path {j}")));
                    }
                    out.push(log_h);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { log_h: parts.concat() })
    }

    pub fn from_log_h(log_h: Vec<f64>) -> Self {
        Self { log_h }
    }

    pub fn len(&self) -> usize {
        self.log_h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_h.is_empty()
    }

    pub fn terminal_log_h(&self) -> &[f64] {
        &self.log_h
    }

    fn payoffs(&self, spec: &UtilitySpec, y: f64, range: std::ops::Range<usize>) -> Result<Vec<f64>> {
        if !(y > 0.0 && y.is_finite()) {
            return Err(invalid(format!("budget needs y > 0, got {y}")));
        }
        let values: Vec<f64> = self.log_h[range.clone()].par_iter().map(|lh| spec.deflated_payoff_from_log_h(y, *lh)).collect();
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(numeric(format!("non-finite budget summand on path {} at y = {y}", range.start + j)));
        }
        Ok(values)
    }

    /// `E[H(T) I(y H(T))]` with its standard error.
    pub fn expectation(&self, spec: &UtilitySpec, y: f64) -> Result<Estimate> {
        Ok(self.payoffs(spec, y, 0..self.len())?.into_iter().collect::<RunningStats>().estimate())
    }

    /// `E[(H(T) I(y H(T)))²]` over the budget paths in `range`.
    pub fn second_moment(&self, spec: &UtilitySpec, y: f64, range: std::ops::Range<usize>) -> Result<Estimate> {
        if range.start >= range.end || range.end > self.len() {
            return Err(invalid(format!("path range {range:?} outside a sample of {}", self.len())));
        }
        Ok(self.payoffs(spec, y, range)?.into_iter().map(|v| v * v).collect::<RunningStats>().estimate())
    }
}

/// Budget estimate for a trial multiplier, as logged by the solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BracketStep {
    pub y: f64,
    pub budget: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Solved Lagrange multiplier and the search that found it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiplierSolve {
    pub utility: UtilitySpec,
    pub x0: f64,
    pub multiplier: f64,
    pub budget: f64,
    pub budget_stderr: f64,
    pub iterations: usize,
    pub bracket: [f64; 2],
    pub rel_tol: f64,
    pub budget_paths: usize,
    pub history: Vec<BracketStep>,
}

const MAX_DOUBLINGS: usize = 120;
const MAX_BISECTIONS: usize = 400;

/// Bisection on `ln y` for `E[H(T) I(y H(T))] = x0` over a shared budget sample.
pub fn solve_multiplier(spec: &UtilitySpec, sample: &BudgetSample, x0: f64, rel_tol: f64) -> Result<MultiplierSolve> {
    if !(x0.is_finite() && x0 > 0.0) {
        return Err(invalid(format!("initial wealth must be positive, got {x0}")));
    }
    if sample.is_empty() {
        return Err(invalid("budget sample is empty"));
    }
    let tol = rel_tol * x0;
    let mut history = Vec::new();
    let eval = |y: f64, lo: f64, hi: f64, history: &mut Vec<BracketStep>| -> Result<Estimate> {
        let e = sample.expectation(spec, y)?;
        history.push(BracketStep { y, budget: e.mean, lower: lo, upper: hi });
        Ok(e)
    };

    // budget(y) is strictly decreasing: budget(lo) > x0 > budget(hi)
    let start = 1.0;
    let first = eval(start, f64::NAN, f64::NAN, &mut history)?;
    let finish = |y: f64, e: Estimate, it: usize, lo: f64, hi: f64, history: Vec<BracketStep>| MultiplierSolve {
        utility: *spec,
        x0,
        multiplier: y,
        budget: e.mean,
        budget_stderr: e.stderr,
        iterations: it,
        bracket: [lo, hi],
        rel_tol,
        budget_paths: sample.len(),
        history,
    };
    if (first.mean - x0).abs() <= tol {
        return Ok(finish(start, first, 1, start, start, history));
    }
    let (mut lo, mut hi);
    let mut doublings = 0;
    if first.mean > x0 {
        lo = start;
        hi = start * 2.0;
        loop {
            let e = eval(hi, lo, f64::NAN, &mut history)?;
            doublings += 1;
            if (e.mean - x0).abs() <= tol {
                return Ok(finish(hi, e, history.len(), lo, hi, history));
            }
            if e.mean < x0 {
                break;
            }
            if doublings >= MAX_DOUBLINGS {
                return Err(Error::UnattainableBudget { x0, doublings });
            }
            lo = hi;
            hi *= 2.0;
        }
    } else {
        hi = start;
        lo = start / 2.0;
        loop {
            let e = eval(lo, f64::NAN, hi, &mut history)?;
            doublings += 1;
            if (e.mean - x0).abs() <= tol {
                return Ok(finish(lo, e, history.len(), lo, hi, history));
            }
            if e.mean > x0 {
                break;
            }
            if doublings >= MAX_DOUBLINGS {
                return Err(Error::UnattainableBudget { x0, doublings });
            }
            hi = lo;
            lo /= 2.0;
        }
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = (lo.ln() + hi.ln()).mul_add(0.5, 0.0).exp();
        let e = eval(mid, lo, hi, &mut history)?;
        if (e.mean - x0).abs() <= tol {
            return Ok(finish(mid, e, history.len(), lo, hi, history));
        }
        if e.mean > x0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if mid == lo && mid == hi {
            break;
        }
    }
    Err(numeric(format!("multiplier bisection stalled in [{lo}, {hi}] before reaching tolerance {rel_tol}")))
}

/// Sample mean of `U(X(T))` with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObjectiveEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Every sample sat at or below the floor.
    pub degenerate: bool,
}

/// Default floor applied to terminal wealth before evaluating `U`.
pub const WEALTH_FLOOR: f64 = 1e-12;

pub fn realized_objective(spec: &UtilitySpec, samples: &[f64], floor: f64) -> Result<ObjectiveEstimate> {
    if samples.is_empty() {
        return Err(invalid("no terminal wealth samples"));
    }
    let degenerate = samples.iter().all(|x| *x <= floor);
    let stats: RunningStats = samples.iter().map(|x| spec.value(x.max(floor))).collect();
    Ok(ObjectiveEstimate { mean: stats.mean(), stderr: stats.stderr(), degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn market() -> MarketModel {
        MarketModel::constant(0.01, &[0.05], DMatrix::from_element(1, 1, 0.2), 1.0).unwrap()
    }

    fn small(budget_paths: usize) -> EstimatorConfig {
        EstimatorConfig { steps: 16, budget_paths, ..EstimatorConfig::default() }
    }

    #[test]
    fn inverse_marginal_examples() {
        assert_eq!(UtilitySpec::log().inverse_marginal(2.0).unwrap(), 0.5);
        assert!((UtilitySpec::power(0.5).unwrap().inverse_marginal(4.0).unwrap() - 0.0625).abs() < 1e-15);
        assert!(UtilitySpec::log().inverse_marginal(0.0).is_err());
        assert!(UtilitySpec::log().inverse_marginal(-1.0).is_err());
        for spec in [UtilitySpec::log(), UtilitySpec::power(0.5).unwrap()] {
            assert!((spec.inverse_marginal(spec.marginal(3.0)).unwrap() - 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn power_parameter_range() {
        assert!(UtilitySpec::power(1.0).is_err());
        assert!(UtilitySpec::power(0.0).is_err());
        assert!(UtilitySpec::power(1.5).is_err());
        assert!(UtilitySpec::power(-2.0).is_ok());
    }

    #[test]
    fn log_budget_is_exactly_one_over_y() {
        let s = BudgetSample::simulate(&market(), &small(5000)).unwrap();
        for y in [0.3, 1.0, 7.0] {
            let e = s.expectation(&UtilitySpec::log(), y).unwrap();
            assert_eq!(e.mean, 1.0 / y);
            assert_eq!(e.stderr, 0.0);
        }
    }

    #[test]
    fn power_budget_matches_lognormal_moment() {
        let s = BudgetSample::simulate(&market(), &small(200_000)).unwrap();
        let spec = UtilitySpec::power(0.5).unwrap();
        for y in [0.5, 1.0, 2.0] {
            let e = s.expectation(&spec, y).unwrap();
            let oracle = 0.05f64.exp() / (y * y);
            assert!((e.mean - oracle).abs() <= 3.0 * e.stderr, "y={y}: {} vs {oracle} ± {}", e.mean, e.stderr);
        }
        let budgets: Vec<f64> = (1..20).map(|i| s.expectation(&spec, 0.2 * i as f64).unwrap().mean).collect();
        assert!(budgets.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn log_multiplier_examples() {
        let s = BudgetSample::simulate(&market(), &small(100)).unwrap();
        for x0 in [1.0, 100.0, 0.5] {
            let sol = solve_multiplier(&UtilitySpec::log(), &s, x0, 1e-8).unwrap();
            assert!((sol.multiplier * x0 - 1.0).abs() < 1e-7);
            assert!(sol.multiplier > 0.0);
        }
    }

    #[test]
    fn unattainable_budget() {
        let s = BudgetSample::from_log_h(vec![0.0; 4]);
        let err = solve_multiplier(&UtilitySpec::log(), &s, 1e-300, 1e-8).unwrap_err();
        assert!(matches!(err, Error::UnattainableBudget { .. }), "{err}");
    }

    #[test]
    fn multiplier_decreases_in_x0() {
        let s = BudgetSample::simulate(&market(), &small(20_000)).unwrap();
        let spec = UtilitySpec::power(0.5).unwrap();
        let ys: Vec<f64> = [0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|x| solve_multiplier(&spec, &s, *x, 1e-8).unwrap().multiplier).collect();
        assert!(ys.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn objective_examples() {
        let o = realized_objective(&UtilitySpec::log(), &[1.0; 10], WEALTH_FLOOR).unwrap();
        assert_eq!((o.mean, o.stderr, o.degenerate), (0.0, 0.0, false));
        let p = realized_objective(&UtilitySpec::power(0.5).unwrap(), &[4.0; 3], WEALTH_FLOOR).unwrap();
        assert!((p.mean - 4.0).abs() < 1e-15);
        assert!(realized_objective(&UtilitySpec::log(), &[0.0, -1.0], WEALTH_FLOOR).unwrap().degenerate);
    }

    #[test]
    fn second_moment_is_finite() {
        let s = BudgetSample::simulate(&market(), &small(20_000)).unwrap();
        let spec = UtilitySpec::power(0.5).unwrap();
        let a = s.second_moment(&spec, 1.0, 0..10_000).unwrap();
        let b = s.second_moment(&spec, 1.0, 10_000..20_000).unwrap();
        assert!(a.mean.is_finite() && (a.mean - b.mean).abs() <= 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt());
    }

    proptest! {
        #[test]
        fn round_trip(x in 1e-3f64..1e3, gamma in prop_oneof![-5.0f64..-0.01, 0.01f64..0.99]) {
            for spec in [UtilitySpec::log(), UtilitySpec::power(gamma).unwrap()] {
                let back = spec.inverse_marginal(spec.marginal(x)).unwrap();
                prop_assert!((back - x).abs() <= 1e-9 * x);
            }
        }

        #[test]
        fn power_homogeneity(y in 1e-2f64..1e2, c in 1e-2f64..1e2, gamma in prop_oneof![-5.0f64..-0.01, 0.01f64..0.99]) {
            let spec = UtilitySpec::power(gamma).unwrap();
            let lhs = spec.inverse_marginal(c * y).unwrap();
            let rhs = c.powf(1.0 / (gamma - 1.0)) * spec.inverse_marginal(y).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs());
        }

        #[test]
        fn inverse_is_strictly_decreasing(y in 1e-3f64..1e3, gamma in 0.01f64..0.99) {
            for spec in [UtilitySpec::log(), UtilitySpec::power(gamma).unwrap()] {
                prop_assert!(spec.inverse_marginal(y * 1.01).unwrap() < spec.inverse_marginal(y).unwrap());
            }
        }

        #[test]
        fn log_scale_property(x0 in 1e-2f64..1e2, c in 1e-1f64..1e1) {
            let s = BudgetSample::from_log_h(vec![0.1, -0.3, 0.2]);
            let a = solve_multiplier(&UtilitySpec::log(), &s, x0, 1e-10).unwrap().multiplier;
            let b = solve_multiplier(&UtilitySpec::log(), &s, c * x0, 1e-10).unwrap().multiplier;
            prop_assert!((b * c / a - 1.0).abs() <= 1e-9);
        }
    }
}

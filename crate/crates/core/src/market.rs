//! Complete Wiener-driven market: coefficients, deflators, stocks and self-financing wealth.
//!
//! Every stochastic integral is rebuilt from the increments of the path it is handed, so a
//! vertically bumped path propagates through `θ`, `Z` and `H` without any cached state.
//!
//! Paths are read as starting from the origin: a nonzero level at `t_0` (which only a bump at
//! the first node produces) is a jump at time zero and enters the Itô sums with weight `θ(t_0)`.

use std::fmt::Debug;
use std::io::Write;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, numeric, Error, Result};
use crate::paths::{Path, TimeGrid};
use crate::report::fmt_num;

/// Default cap on the 2-norm condition number of `σ(t, ω)`.
pub const DEFAULT_CONDITION_CAP: f64 = 1e8;

/// Coefficients `r`, `α`, `σ` at one node of one path.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCoefficients {
    pub rate: f64,
    pub drift: DVector<f64>,
    pub volatility: DMatrix<f64>,
}

/// Non-anticipative coefficient rules. Implementations may read `path` only up to `node`.
pub trait Coefficients: Send + Sync + Debug {
    fn dim(&self) -> usize;

    fn at(&self, node: usize, path: &Path) -> LocalCoefficients;

    /// True when the rules depend on time only.
    fn is_deterministic(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstantCoefficients {
    pub rate: f64,
    pub drift: DVector<f64>,
    pub volatility: DMatrix<f64>,
}

impl Coefficients for ConstantCoefficients {
    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn at(&self, _node: usize, _path: &Path) -> LocalCoefficients {
        LocalCoefficients { rate: self.rate, drift: self.drift.clone(), volatility: self.volatility.clone() }
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Linear-in-time rate and drift, volatility scaled by `1 + volatility_slope * t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeVaryingCoefficients {
    pub rate: f64,
    pub rate_slope: f64,
    pub drift: DVector<f64>,
    pub drift_slope: DVector<f64>,
    pub volatility: DMatrix<f64>,
    pub volatility_slope: f64,
}

impl Coefficients for TimeVaryingCoefficients {
    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn at(&self, node: usize, path: &Path) -> LocalCoefficients {
        let t = path.grid().time(node);
        LocalCoefficients {
            rate: self.rate + self.rate_slope * t,
            drift: &self.drift + &self.drift_slope * t,
            volatility: &self.volatility * (1.0 + self.volatility_slope * t),
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Path-dependent demo: volatility scaled by `1 + sensitivity * tanh(max_{s<=t} ω_1(s))`.
///
/// With `|sensitivity| < 1` the scale stays in `(1 - |a|, 1 + |a|)`, so `θ` is bounded.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMaxVolatility {
    pub rate: f64,
    pub drift: DVector<f64>,
    pub volatility: DMatrix<f64>,
    pub sensitivity: f64,
}

impl Coefficients for RunningMaxVolatility {
    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn at(&self, node: usize, path: &Path) -> LocalCoefficients {
        let running_max = (0..=node).map(|k| path.level(k, 0)).fold(f64::NEG_INFINITY, f64::max);
        let scale = 1.0 + self.sensitivity * running_max.tanh();
        LocalCoefficients { rate: self.rate, drift: self.drift.clone(), volatility: &self.volatility * scale }
    }
}

/// Market with `n` stocks driven by an `n`-dimensional Wiener process on `[0, T]`.
#[derive(Clone, Debug)]
pub struct MarketModel {
    horizon: f64,
    initial_prices: Vec<f64>,
    coefficients: Arc<dyn Coefficients>,
    condition_cap: f64,
}

impl MarketModel {
    pub fn new(horizon: f64, initial_prices: Vec<f64>, coefficients: Arc<dyn Coefficients>) -> Result<Self> {
        let n = coefficients.dim();
        if n == 0 {
            return Err(invalid("market needs at least one stock"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if initial_prices.len() != n {
            return Err(invalid(format!("{} initial prices for {n} stocks", initial_prices.len())));
        }
        if initial_prices.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid("initial prices must be strictly positive"));
        }
        Ok(Self { horizon, initial_prices, coefficients, condition_cap: DEFAULT_CONDITION_CAP })
    }

    /// Constant-coefficient market with unit initial prices.
    pub fn constant(rate: f64, drift: &[f64], volatility: DMatrix<f64>, horizon: f64) -> Result<Self> {
        let n = drift.len();
        if volatility.nrows() != n || volatility.ncols() != n {
            return Err(invalid(format!("volatility must be {n}x{n}")));
        }
        let coefficients = ConstantCoefficients { rate, drift: DVector::from_column_slice(drift), volatility };
        Self::new(horizon, vec![1.0; n], Arc::new(coefficients))
    }

    pub fn with_condition_cap(mut self, cap: f64) -> Self {
        self.condition_cap = cap;
        self
    }

    pub fn with_initial_prices(mut self, prices: Vec<f64>) -> Result<Self> {
        let model = Self::new(self.horizon, prices, self.coefficients.clone())?;
        self.initial_prices = model.initial_prices;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.coefficients.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_prices(&self) -> &[f64] {
        &self.initial_prices
    }

    pub fn condition_cap(&self) -> f64 {
        self.condition_cap
    }

    pub fn is_deterministic(&self) -> bool {
        self.coefficients.is_deterministic()
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coefficients.as_ref()
    }

    pub fn local(&self, node: usize, path: &Path) -> LocalCoefficients {
        self.coefficients.at(node, path)
    }

    pub(crate) fn check_path(&self, path: &Path) -> Result<()> {
        if path.dim() != self.dim() {
            return Err(invalid(format!("path has dimension {}, market has {} stocks", path.dim(), self.dim())));
        }
        if (path.grid().horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(invalid(format!(
                "path horizon {} does not match market horizon {}",
                path.grid().horizon(),
                self.horizon
            )));
        }
        Ok(())
    }
}

/// 2-norm condition number of a square matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return if m[(0, 0)] != 0.0 && m[(0, 0)].is_finite() { 1.0 } else { f64::INFINITY };
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 { max / min } else { f64::INFINITY }
}

/// Solves `σ x = rhs` (or `σ' x = rhs`) after checking the condition number against `cap`.
pub fn solve_volatility(sigma: &DMatrix<f64>, rhs: &DVector<f64>, transpose: bool, node: usize, cap: f64) -> Result<(DVector<f64>, f64)> {
    let condition = condition_number(sigma);
    if !(condition.is_finite() && condition <= cap) {
        return Err(Error::SingularVolatility { node, condition, cap });
    }
    let lu = if transpose { sigma.transpose().lu() } else { sigma.clone().lu() };
    let x = lu.solve(rhs).ok_or(Error::SingularVolatility { node, condition: f64::INFINITY, cap })?;
    Ok((x, condition))
}

/// `θ = σ⁻¹(α - r 1)` at `node`.
pub fn market_price_of_risk(model: &MarketModel, node: usize, path: &Path) -> Result<DVector<f64>> {
    model.check_path(path)?;
    path.grid().check_node(node)?;
    theta_from(&model.local(node, path), node, model.condition_cap)
}

pub(crate) fn theta_from(c: &LocalCoefficients, node: usize, cap: f64) -> Result<DVector<f64>> {
    let excess = c.drift.map(|a| a - c.rate);
    Ok(solve_volatility(&c.volatility, &excess, false, node, cap)?.0)
}

/// Logarithms of `B` and `Z` at one node.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct LogDeflator {
    pub log_b: f64,
    pub log_z: f64,
}

impl LogDeflator {
    #[inline]
    pub fn log_h(&self) -> f64 {
        self.log_z - self.log_b
    }
}

/// Rate and market price of risk on every node of one grid, for time-only coefficients.
#[derive(Debug)]
pub(crate) struct DeterministicTerms {
    grid: TimeGrid,
    dim: usize,
    rate: Vec<f64>,
    theta: Vec<f64>,
    theta_sq: Vec<f64>,
}

impl DeterministicTerms {
    pub fn build(model: &MarketModel, grid: TimeGrid) -> Result<Self> {
        let n = model.dim();
        let probe = Path::zeros(grid, n)?;
        let mut rate = Vec::with_capacity(grid.steps() + 1);
        let mut theta = Vec::with_capacity((grid.steps() + 1) * n);
        let mut theta_sq = Vec::with_capacity(grid.steps() + 1);
        for k in 0..=grid.steps() {
            let c = model.local(k, &probe);
            let th = theta_from(&c, k, model.condition_cap)?;
            rate.push(c.rate);
            theta_sq.push(th.norm_squared());
            theta.extend(th.iter());
        }
        Ok(Self { grid, dim: n, rate, theta, theta_sq })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn theta(&self, k: usize) -> &[f64] {
        &self.theta[k * self.dim..(k + 1) * self.dim]
    }

    /// Change in the log deflators produced by an increment block covering steps `from..K`.
    #[inline]
    pub fn block(&self, from: usize, increments: &[f64]) -> LogDeflator {
        let dt = self.grid.dt();
        let mut out = LogDeflator::default();
        for (j, dw) in increments.chunks_exact(self.dim).enumerate() {
            let k = from + j;
            let th = self.theta(k);
            let mut dot = 0.0;
            for i in 0..self.dim {
                dot += th[i] * dw[i];
            }
            out.log_b += self.rate[k] * dt;
            out.log_z -= dot + 0.5 * self.theta_sq[k] * dt;
        }
        out
    }
}

/// Evaluates log deflators along paths, through a precomputed table when the market allows it.
pub(crate) struct DeflatorKernel<'m> {
    market: &'m MarketModel,
    table: Option<Arc<DeterministicTerms>>,
}

impl<'m> DeflatorKernel<'m> {
    pub fn new(market: &'m MarketModel, grid: TimeGrid) -> Result<Self> {
        let table = if market.is_deterministic() { Some(Arc::new(DeterministicTerms::build(market, grid)?)) } else { None };
        Ok(Self { market, table })
    }

    pub fn with_table(market: &'m MarketModel, table: Option<Arc<DeterministicTerms>>) -> Self {
        Self { market, table }
    }

    pub fn table(&self) -> Option<&DeterministicTerms> {
        self.table.as_deref()
    }

    fn terms(&self, k: usize, path: &Path) -> Result<(f64, DVector<f64>)> {
        match &self.table {
            Some(t) => Ok((t.rate[k], DVector::from_column_slice(t.theta(k)))),
            None => {
                let c = self.market.local(k, path);
                let th = theta_from(&c, k, self.market.condition_cap)?;
                Ok((c.rate, th))
            }
        }
    }

    /// Log deflators at node `upto`, reading `path` only up to that node.
    pub fn prefix(&self, path: &Path, upto: usize) -> Result<LogDeflator> {
        let mut acc = LogDeflator::default();
        let origin = path.value(0);
        if origin.iter().any(|x| *x != 0.0) {
            let (_, th) = self.terms(0, path)?;
            acc.log_z -= th.iter().zip(origin).map(|(a, b)| a * b).sum::<f64>();
        }
        self.advance(acc, path, 0, upto)
    }

    /// Accumulates steps `from..to` of `path` onto `acc`.
    pub fn advance(&self, mut acc: LogDeflator, path: &Path, from: usize, to: usize) -> Result<LogDeflator> {
        let dt = path.grid().dt();
        let n = path.dim();
        if let Some(t) = &self.table {
            for k in from..to {
                let th = t.theta(k);
                let mut dot = 0.0;
                for i in 0..n {
                    dot += th[i] * path.increment(k, i);
                }
                acc.log_b += t.rate[k] * dt;
                acc.log_z -= dot + 0.5 * t.theta_sq[k] * dt;
            }
            return Ok(acc);
        }
        for k in from..to {
            let (r, th) = self.terms(k, path)?;
            let dot: f64 = (0..n).map(|i| th[i] * path.increment(k, i)).sum();
            acc.log_b += r * dt;
            acc.log_z -= dot + 0.5 * th.norm_squared() * dt;
        }
        Ok(acc)
    }
}

/// Per-grid coefficient tables, built on first use.
#[derive(Debug, Default)]
pub(crate) struct KernelCache {
    tables: Mutex<Vec<Arc<DeterministicTerms>>>,
}

impl KernelCache {
    pub fn kernel<'m>(&self, market: &'m MarketModel, grid: &TimeGrid) -> Result<DeflatorKernel<'m>> {
        if !market.is_deterministic() {
            return Ok(DeflatorKernel::with_table(market, None));
        }
        let mut tables = self.tables.lock().expect("table lock");
        if let Some(t) = tables.iter().find(|t| t.grid() == grid) {
            return Ok(DeflatorKernel::with_table(market, Some(t.clone())));
        }
        let t = Arc::new(DeterministicTerms::build(market, *grid)?);
        tables.push(t.clone());
        Ok(DeflatorKernel::with_table(market, Some(t)))
    }
}

impl Clone for KernelCache {
    fn clone(&self) -> Self {
        Self { tables: Mutex::new(self.tables.lock().expect("table lock").clone()) }
    }
}

/// Money market, market price of risk, likelihood and state price density on every node.
#[derive(Clone, Debug, PartialEq)]
pub struct DeflatorBundle {
    pub times: Vec<f64>,
    pub money_market: Vec<f64>,
    pub theta: Vec<DVector<f64>>,
    pub likelihood: Vec<f64>,
    pub state_price: Vec<f64>,
}

impl DeflatorBundle {
    /// Writes `path_id,node,time,B,theta_1..n,Z,H` rows.
    pub fn write_csv<W: Write>(&self, path_id: u64, header: bool, mut w: W) -> Result<()> {
        let n = self.theta.first().map_or(0, |t| t.len());
        if header {
            write!(w, "path_id,node,time,B")?;
            for i in 1..=n {
                write!(w, ",theta_{i}")?;
            }
            writeln!(w, ",Z,H")?;
        }
        for k in 0..self.times.len() {
            write!(w, "{path_id},{k},{},{}", fmt_num(self.times[k]), fmt_num(self.money_market[k]))?;
            for x in self.theta[k].iter() {
                write!(w, ",{}", fmt_num(*x))?;
            }
            writeln!(w, ",{},{}", fmt_num(self.likelihood[k]), fmt_num(self.state_price[k]))?;
        }
        Ok(())
    }
}

/// `B = exp(∫r)`, `Z = exp(-∫θ'dW - ½∫|θ|²)`, `H = Z / B` with left-point sums.
pub fn deflators(model: &MarketModel, path: &Path) -> Result<DeflatorBundle> {
    model.check_path(path)?;
    let grid = *path.grid();
    let kernel = DeflatorKernel::new(model, grid)?;
    let k_max = grid.steps();
    let mut out = DeflatorBundle {
        times: grid.times(),
        money_market: Vec::with_capacity(k_max + 1),
        theta: Vec::with_capacity(k_max + 1),
        likelihood: Vec::with_capacity(k_max + 1),
        state_price: Vec::with_capacity(k_max + 1),
    };
    let mut acc = kernel.prefix(path, 0)?;
    for k in 0..=k_max {
        if k > 0 {
            acc = kernel.advance(acc, path, k - 1, k)?;
        }
        let b = acc.log_b.exp();
        let z = acc.log_z.exp();
        let h = z / b;
        if !(b.is_finite() && z.is_finite() && h.is_finite() && b > 0.0 && z > 0.0 && h > 0.0) {
            return Err(numeric(format!("deflator overflow at node {k} (log B = {}, log Z = {})", acc.log_b, acc.log_z)));
        }
        out.money_market.push(b);
        out.likelihood.push(z);
        out.state_price.push(h);
        out.theta.push(kernel.terms(k, path)?.1);
    }
    Ok(out)
}

/// Log-Euler stock prices; one price vector per node.
pub fn simulate_stocks(model: &MarketModel, path: &Path) -> Result<Vec<Vec<f64>>> {
    model.check_path(path)?;
    let grid = path.grid();
    let n = model.dim();
    let dt = grid.dt();
    let mut log_s: Vec<f64> = model.initial_prices.iter().map(|s| s.ln()).collect();
    let mut out = Vec::with_capacity(grid.steps() + 1);
    out.push(model.initial_prices.clone());
    for k in 0..grid.steps() {
        let c = model.local(k, path);
        for i in 0..n {
            let var: f64 = (0..n).map(|d| c.volatility[(i, d)].powi(2)).sum();
            let shock: f64 = (0..n).map(|d| c.volatility[(i, d)] * path.increment(k, d)).sum();
            log_s[i] += (c.drift[i] - 0.5 * var) * dt + shock;
        }
        let prices: Vec<f64> = log_s.iter().map(|x| x.exp()).collect();
        if prices.iter().any(|p| !p.is_finite()) {
            return Err(numeric(format!("stock price overflow at node {}", k + 1)));
        }
        out.push(prices);
    }
    Ok(out)
}

/// Amounts held in each stock as a function of time, path and current wealth.
pub trait PortfolioPolicy: Sync {
    fn allocation(&self, node: usize, path: &Path, wealth: f64) -> Result<DVector<f64>>;
}

/// Holds everything in the money market.
#[derive(Clone, Copy, Debug)]
pub struct ZeroPolicy {
    pub dim: usize,
}

impl PortfolioPolicy for ZeroPolicy {
    fn allocation(&self, _node: usize, _path: &Path, _wealth: f64) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.dim))
    }
}

/// Another policy multiplied by a constant factor.
pub struct ScaledPolicy<P> {
    pub inner: P,
    pub factor: f64,
}

impl<P: PortfolioPolicy> PortfolioPolicy for ScaledPolicy<P> {
    fn allocation(&self, node: usize, path: &Path, wealth: f64) -> Result<DVector<f64>> {
        Ok(self.inner.allocation(node, path, wealth)? * self.factor)
    }
}

impl<P: PortfolioPolicy + ?Sized> PortfolioPolicy for &P {
    fn allocation(&self, node: usize, path: &Path, wealth: f64) -> Result<DVector<f64>> {
        (**self).allocation(node, path, wealth)
    }
}

/// Money-market amount implied by self-financing: `π⁰ = X - π'1`.
pub fn money_market_amount(wealth: f64, pi: &DVector<f64>) -> f64 {
    wealth - pi.sum()
}

/// Euler scheme for self-financing wealth:
/// `X_{k+1} = X_k + X_k r Δt + π_k'(α - r1)Δt + π_k'σ ΔW_k`.
pub fn wealth_under_policy<P: PortfolioPolicy + ?Sized>(model: &MarketModel, policy: &P, x0: f64, path: &Path) -> Result<Vec<f64>> {
    model.check_path(path)?;
    if !(x0.is_finite() && x0 >= 0.0) {
        return Err(invalid(format!("initial wealth must be nonnegative, got {x0}")));
    }
    let grid = path.grid();
    let n = model.dim();
    let dt = grid.dt();
    let mut wealth = Vec::with_capacity(grid.steps() + 1);
    let mut x = x0;
    wealth.push(x);
    for k in 0..grid.steps() {
        let pi = policy
            .allocation(k, path, x)
            .map_err(|e| Error::PolicyEvaluation { node: k, reason: format!("path {}: {e}", path.stream()) })?;
        if pi.len() != n || pi.iter().any(|v| !v.is_finite()) {
            return Err(Error::PolicyEvaluation { node: k, reason: format!("path {}: non-finite or mis-sized allocation", path.stream()) });
        }
        let c = model.local(k, path);
        let mut premium = 0.0;
        let mut diffusion = 0.0;
        for i in 0..n {
            premium += pi[i] * (c.drift[i] - c.rate);
            let shock: f64 = (0..n).map(|d| c.volatility[(i, d)] * path.increment(k, d)).sum();
            diffusion += pi[i] * shock;
        }
        x += x * c.rate * dt + premium * dt + diffusion;
        if !x.is_finite() {
            return Err(numeric(format!("wealth overflow at node {} on path {}", k + 1, path.stream())));
        }
        wealth.push(x);
    }
    Ok(wealth)
}

/// Result of the nonnegativity check on a wealth trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Admissibility {
    pub admissible: bool,
    pub first_violation: Option<usize>,
}

/// Default admissibility tolerance, `1e-12 * x0`.
pub fn admissibility_tolerance(x0: f64) -> f64 {
    1e-12 * x0.abs()
}

/// True iff every node is at least `-tolerance`.
pub fn check_admissible(wealth: &[f64], tolerance: f64) -> Admissibility {
    let first_violation = wealth.iter().position(|x| !(*x >= -tolerance));
    Admissibility { admissible: first_violation.is_none(), first_violation }
}

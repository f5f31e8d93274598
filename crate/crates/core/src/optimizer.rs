//! Optimal wealth and portfolio from the vertical derivative of the deflated wealth.
//!
//! `M(t, ω) = E[H(T) I(𝒴 H(T)) | ω up to t]` is estimated by averaging over `m` Brownian
//! extensions of the stopped path. The extensions are keyed by `(seed, outer stream, node, j)`
//! only, so every bumped copy of a path sees the same inner increments. The portfolio solves
//! `σ(t)' π = ∇_W M / H + θ X*`.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{invalid, numeric, Result};
use crate::funcalc::PathFunctional;
use crate::market::{market_price_of_risk, solve_volatility, theta_from, DeflatorKernel, DeterministicTerms, KernelCache, LogDeflator, MarketModel, PortfolioPolicy};
use crate::paths::{bump_in_place, extend_in_place, fill_increments, stop_path, Path, TimeGrid};
use crate::report::fmt_num;
use crate::rng::{self, INNER_DOMAIN};
use crate::stats::{Estimate, RunningStats};
use crate::utility::UtilitySpec;

const EXTENSION_CHUNK: usize = 256;

/// Nested Monte Carlo estimator of `M(t) = H(t) X*(t)`.
#[derive(Debug)]
pub struct DeflatedWealthFunctional {
    market: MarketModel,
    utility: UtilitySpec,
    multiplier: f64,
    inner_paths: usize,
    seed: u64,
    label: String,
    tables: KernelCache,
}

impl DeflatedWealthFunctional {
    pub fn new(market: MarketModel, utility: UtilitySpec, multiplier: f64, inner_paths: usize, seed: u64) -> Result<Self> {
        if !(multiplier.is_finite() && multiplier > 0.0) {
            return Err(invalid(format!("multiplier must be positive, got {multiplier}")));
        }
        if inner_paths == 0 {
            return Err(invalid("need at least one inner path"));
        }
        let label = format!("deflated_wealth({})", utility.name());
        Ok(Self { market, utility, multiplier, inner_paths, seed, label, tables: KernelCache::default() })
    }

    /// Same functional with a different inner budget; shares the coefficient tables.
    pub fn with_inner_paths(&self, inner_paths: usize) -> Result<Self> {
        let mut f = Self::new(self.market.clone(), self.utility, self.multiplier, inner_paths, self.seed)?;
        f.tables = self.tables.clone();
        Ok(f)
    }

    pub fn market(&self) -> &MarketModel {
        &self.market
    }

    pub fn utility(&self) -> &UtilitySpec {
        &self.utility
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn inner_paths(&self) -> usize {
        self.inner_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn kernel(&self, grid: &TimeGrid) -> Result<DeflatorKernel<'_>> {
        self.tables.kernel(&self.market, grid)
    }

    /// `H(t_k)` along `path`.
    pub fn state_price(&self, node: usize, path: &Path) -> Result<f64> {
        self.market.check_path(path)?;
        path.grid().check_node(node)?;
        let h = self.kernel(path.grid())?.prefix(path, node)?.log_h().exp();
        if !(h.is_finite() && h > 0.0) {
            return Err(numeric(format!("state price density not positive and finite at node {node}")));
        }
        Ok(h)
    }

    /// `I(𝒴 H(T))`, the optimal terminal claim on `path`.
    pub fn terminal_claim(&self, path: &Path) -> Result<f64> {
        let h = self.state_price(path.grid().steps(), path)?;
        self.utility.inverse_marginal(self.multiplier * h)
    }

    /// Deflated payoffs on each inner extension, one row per input path.
    ///
    /// Paths with the same stream tag share their inner increments; at the horizon every row has a
    /// single exact entry.
    pub fn inner_payoffs(&self, node: usize, paths: &[Path]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = paths.first() else { return Ok(Vec::new()) };
        let grid = *first.grid();
        for p in paths {
            self.market.check_path(p)?;
            if *p.grid() != grid {
                return Err(invalid("batch paths live on different grids"));
            }
        }
        grid.check_node(node)?;
        let kernel = self.kernel(&grid)?;
        let prefixes = paths.iter().map(|p| kernel.prefix(p, node)).collect::<Result<Vec<_>>>()?;
        let y = self.multiplier;
        let payoff = |acc: LogDeflator, what: &dyn Fn() -> String| -> Result<f64> {
            let v = self.utility.deflated_payoff_from_log_h(y, acc.log_h());
            if !(v.is_finite() && acc.log_h().is_finite()) {
                return Err(numeric(format!("non-finite deflated payoff on {}", what())));
            }
            Ok(v)
        };
        if node == grid.steps() {
            return prefixes.iter().enumerate().map(|(i, a)| Ok(vec![payoff(*a, &|| format!("batch path {i} at the horizon"))?])).collect();
        }

        let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
        for (i, p) in paths.iter().enumerate() {
            match groups.iter_mut().find(|(s, _)| *s == p.stream()) {
                Some((_, members)) => members.push(i),
                None => groups.push((p.stream(), vec![i])),
            }
        }

        let n = grid.steps() - node;
        let dim = first.dim();
        let sqrt_dt = grid.dt().sqrt();
        let m = self.inner_paths;
        let mut rows = vec![Vec::with_capacity(m); paths.len()];
        for (stream, members) in &groups {
            let digest = rng::key_digest(self.seed, INNER_DOMAIN, &[*stream, node as u64]);
            let chunks: Vec<usize> = (0..m.div_ceil(EXTENSION_CHUNK)).collect();
            let blocks = chunks
                .par_iter()
                .map(|&c| {
                    let lo = c * EXTENSION_CHUNK;
                    let hi = (lo + EXTENSION_CHUNK).min(m);
                    let mut incs = vec![0.0; n * dim];
                    let mut scratch: Option<Path> = None;
                    let mut out = Vec::with_capacity((hi - lo) * members.len());
                    for e in lo..hi {
                        let mut r = rng::substream(digest, e as u64);
                        fill_increments(&mut r, sqrt_dt, &mut incs);
                        let what = || format!("extension {e} of stream {stream} at node {node}");
                        match kernel.table() {
                            Some(t) => {
                                let delta = t.block(node, &incs);
                                for &i in members {
                                    let acc = LogDeflator { log_b: prefixes[i].log_b + delta.log_b, log_z: prefixes[i].log_z + delta.log_z };
                                    out.push(payoff(acc, &what)?);
                                }
                            }
                            None => {
                                for &i in members {
                                    let s = scratch.get_or_insert_with(|| paths[i].clone());
                                    s.clone_from(&paths[i]);
                                    extend_in_place(s, node, &incs)?;
                                    let acc = kernel.advance(prefixes[i], s, node, grid.steps())?;
                                    out.push(payoff(acc, &what)?);
                                }
                            }
                        }
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            for block in blocks {
                for chunk in block.chunks_exact(members.len()) {
                    for (slot, &i) in members.iter().enumerate() {
                        rows[i].push(chunk[slot]);
                    }
                }
            }
        }
        Ok(rows)
    }

    /// `M(t_k, ω)` with its inner standard error.
    pub fn deflated_wealth(&self, node: usize, path: &Path) -> Result<Estimate> {
        let rows = self.inner_payoffs(node, std::slice::from_ref(path))?;
        Ok(rows[0].iter().copied().collect::<RunningStats>().estimate())
    }

    /// `X*(t_k) = M(t_k) / H(t_k)`; exactly `I(𝒴 H(T))` at the horizon.
    pub fn optimal_wealth(&self, node: usize, path: &Path) -> Result<Estimate> {
        if node == path.grid().steps() {
            return Ok(Estimate::exact(self.terminal_claim(path)?));
        }
        let h = self.state_price(node, path)?;
        Ok(self.deflated_wealth(node, path)?.scaled(1.0 / h))
    }
}

impl PathFunctional for DeflatedWealthFunctional {
    fn label(&self) -> &str {
        &self.label
    }

    fn evaluate(&self, node: usize, path: &Path) -> Result<f64> {
        Ok(self.deflated_wealth(node, path)?.mean)
    }

    fn evaluate_batch(&self, node: usize, paths: &[Path]) -> Result<Vec<f64>> {
        Ok(self.inner_payoffs(node, paths)?.iter().map(|r| r.iter().copied().collect::<RunningStats>().mean()).collect())
    }
}

/// Optimal portfolio at one node with diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioResult {
    pub node: usize,
    pub time: f64,
    /// Amounts held in each stock.
    pub pi: DVector<f64>,
    pub wealth: f64,
    pub deflated_wealth: f64,
    /// `∇_W M` from common-random-number central differences.
    pub gradient: DVector<f64>,
    pub gradient_stderr: DVector<f64>,
    pub theta: DVector<f64>,
    pub state_price: f64,
    pub inner_stderr: f64,
    pub bump: f64,
    pub condition: f64,
}

/// `σ(t)' π = ∇_W M / H + θ X*` with `∇_W M` from bump-and-revalue.
pub fn optimal_portfolio(f: &DeflatedWealthFunctional, node: usize, path: &Path, h: f64) -> Result<PortfolioResult> {
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid(format!("bump size must be positive, got {h}")));
    }
    let market = f.market();
    market.check_path(path)?;
    let stopped = stop_path(path, node)?;
    let n = path.dim();
    let mut batch = Vec::with_capacity(2 * n + 1);
    batch.push(stopped.clone());
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut b = stopped.clone();
            bump_in_place(&mut b, node, i, sign * h)?;
            batch.push(b);
        }
    }
    let rows = f.inner_payoffs(node, &batch)?;
    let base: RunningStats = rows[0].iter().copied().collect();
    let mut gradient = DVector::zeros(n);
    let mut gradient_stderr = DVector::zeros(n);
    for i in 0..n {
        let (up, down) = (&rows[1 + 2 * i], &rows[2 + 2 * i]);
        let d: RunningStats = up.iter().zip(down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        gradient[i] = d.mean();
        gradient_stderr[i] = d.stderr();
    }
    let m = base.mean();
    let state_price = f.state_price(node, path)?;
    let wealth = m / state_price;
    let local = market.local(node, path);
    let theta = theta_from(&local, node, market.condition_cap())?;
    let rhs = &gradient / state_price + &theta * wealth;
    let (pi, condition) = solve_volatility(&local.volatility, &rhs, true, node, market.condition_cap())?;
    if pi.iter().any(|x| !x.is_finite()) {
        return Err(numeric(format!("non-finite portfolio at node {node}")));
    }
    Ok(PortfolioResult {
        node,
        time: path.grid().time(node),
        pi,
        wealth,
        deflated_wealth: m,
        gradient,
        gradient_stderr,
        theta,
        state_price,
        inner_stderr: base.stderr(),
        bump: h,
        condition,
    })
}

/// Policy that recomputes the numerical optimal portfolio at every node.
pub struct OptimalPolicy<'a> {
    pub functional: &'a DeflatedWealthFunctional,
    pub bump: f64,
}

impl PortfolioPolicy for OptimalPolicy<'_> {
    fn allocation(&self, node: usize, path: &Path, _wealth: f64) -> Result<DVector<f64>> {
        Ok(optimal_portfolio(self.functional, node, path, self.bump)?.pi)
    }
}

/// Closed-form optimal wealth and portfolio.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedForm {
    pub wealth: f64,
    pub pi: DVector<f64>,
}

fn log_state_price(market: &MarketModel, node: usize, path: &Path) -> Result<f64> {
    market.check_path(path)?;
    path.grid().check_node(node)?;
    Ok(DeflatorKernel::new(market, *path.grid())?.prefix(path, node)?.log_h())
}

/// Log utility: `X* = x0 / H(t)`, `π* = (σσ')⁻¹(α - r1) X*`.
pub fn closed_form_log(market: &MarketModel, x0: f64, node: usize, path: &Path) -> Result<ClosedForm> {
    let wealth = x0 / log_state_price(market, node, path)?.exp();
    let local = market.local(node, path);
    let theta = theta_from(&local, node, market.condition_cap())?;
    let (pi, _) = solve_volatility(&local.volatility, &(theta * wealth), true, node, market.condition_cap())?;
    Ok(ClosedForm { wealth, pi })
}

/// Power utility with time-only coefficients.
///
/// `X*(t) = x0 H(t)^{p-1} exp(A_k - A_0)` with `p = γ/(γ-1)` and
/// `A_k = Σ_{j>=k} (-p r_j - ½p|θ_j|² + ½p²|θ_j|²) Δt`, the discrete lognormal moment on the
/// simulation grid; `π* = (σσ')⁻¹(α - r1) X* / (1 - γ)`.
pub fn closed_form_power(market: &MarketModel, gamma: f64, x0: f64, node: usize, path: &Path) -> Result<ClosedForm> {
    if !market.is_deterministic() {
        return Err(invalid("closed-form power oracle needs time-only coefficients"));
    }
    UtilitySpec::power(gamma)?;
    let grid = *path.grid();
    let log_h = log_state_price(market, node, path)?;
    let terms = DeterministicTerms::build(market, grid)?;
    let p = gamma / (gamma - 1.0);
    let probe = Path::zeros(grid, market.dim())?;
    let mut a_node = 0.0;
    let mut a_total = 0.0;
    for j in 0..grid.steps() {
        let r = market.local(j, &probe).rate;
        let th2: f64 = terms.theta(j).iter().map(|x| x * x).sum();
        let term = (-p * r - 0.5 * p * th2 + 0.5 * p * p * th2) * grid.dt();
        a_total += term;
        if j >= node {
            a_node += term;
        }
    }
    let wealth = x0 * ((p - 1.0) * log_h + a_node - a_total).exp();
    let local = market.local(node, path);
    let theta = theta_from(&local, node, market.condition_cap())?;
    let (pi, _) = solve_volatility(&local.volatility, &(theta * (wealth / (1.0 - gamma))), true, node, market.condition_cap())?;
    Ok(ClosedForm { wealth, pi })
}

/// `∇_W M = M (-γ/(γ-1)) θ(t)` for power utility with time-only coefficients.
pub fn power_integrand(market: &MarketModel, gamma: f64, node: usize, path: &Path, m: f64) -> Result<DVector<f64>> {
    if !market.is_deterministic() {
        return Err(invalid("closed-form power integrand needs time-only coefficients"));
    }
    Ok(market_price_of_risk(market, node, path)? * (m * -gamma / (gamma - 1.0)))
}

/// Closed-form oracle for the given utility, if one applies to `market`.
pub fn closed_form(market: &MarketModel, utility: &UtilitySpec, x0: f64, node: usize, path: &Path) -> Result<ClosedForm> {
    match *utility {
        UtilitySpec::Log => closed_form_log(market, x0, node, path),
        UtilitySpec::Power { gamma } => closed_form_power(market, gamma, x0, node, path),
    }
}

/// True when [`closed_form`] is available.
pub fn has_closed_form(market: &MarketModel, utility: &UtilitySpec) -> bool {
    matches!(utility, UtilitySpec::Log) || market.is_deterministic()
}

/// Policy holding the closed-form optimal amounts.
pub struct OraclePolicy<'a> {
    pub market: &'a MarketModel,
    pub utility: UtilitySpec,
    pub x0: f64,
}

impl PortfolioPolicy for OraclePolicy<'_> {
    fn allocation(&self, node: usize, path: &Path, _wealth: f64) -> Result<DVector<f64>> {
        Ok(closed_form(self.market, &self.utility, self.x0, node, path)?.pi)
    }
}

/// Writes the per-node portfolio table, with oracle columns when `oracle` is given.
pub fn write_portfolio_csv<W: Write>(results: &[PortfolioResult], dim: usize, oracle: Option<&[ClosedForm]>, mut w: W) -> Result<()> {
    write!(w, "node,time,X_star,M")?;
    for prefix in ["pi", "grad", "theta"] {
        for i in 1..=dim {
            write!(w, ",{prefix}_{i}")?;
        }
    }
    write!(w, ",H,inner_stderr")?;
    if oracle.is_some() {
        write!(w, ",X_star_oracle")?;
        for i in 1..=dim {
            write!(w, ",pi_oracle_{i}")?;
        }
    }
    writeln!(w)?;
    for (row, r) in results.iter().enumerate() {
        write!(w, "{},{},{},{}", r.node, fmt_num(r.time), fmt_num(r.wealth), fmt_num(r.deflated_wealth))?;
        for v in r.pi.iter().chain(r.gradient.iter()).chain(r.theta.iter()) {
            write!(w, ",{}", fmt_num(*v))?;
        }
        write!(w, ",{},{}", fmt_num(r.state_price), fmt_num(r.inner_stderr))?;
        if let Some(o) = oracle {
            let o = o.get(row).ok_or_else(|| invalid("oracle table shorter than portfolio table"))?;
            write!(w, ",{}", fmt_num(o.wealth))?;
            for v in o.pi.iter() {
                write!(w, ",{}", fmt_num(*v))?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

//! Statistical checks: martingale flatness, replication, representation residuals and
//! convergence sweeps, each reported as a [`TestReport`].

use std::fmt::Write as _;
use std::path::Path as FsPath;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::funcalc::{check_non_anticipative, representation_residual, FnFunctional, PathFunctional};
use crate::market::{admissibility_tolerance, check_admissible, wealth_under_policy, KernelCache, MarketModel, PortfolioPolicy};
use crate::optimizer::DeflatedWealthFunctional;
use crate::paths::{Path, PathEnsemble};
use crate::report::{fmt_num, write_bytes, write_json};
use crate::stats::{Estimate, RunningStats};
use crate::utility::EstimatorConfig;

/// Enough of the run configuration to reproduce a report bit for bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Fingerprint {
    pub seed: u64,
    pub steps: usize,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub bump: f64,
    pub budget_paths: usize,
}

impl From<&EstimatorConfig> for Fingerprint {
    fn from(c: &EstimatorConfig) -> Self {
        Self { seed: c.seed, steps: c.steps, outer_paths: c.outer_paths, inner_paths: c.inner_paths, bump: c.bump, budget_paths: c.budget_paths }
    }
}

/// How a statistic is held against its target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Comparison {
    /// `statistic <= target + tolerance`
    AtMost,
    /// `statistic >= target - tolerance`
    AtLeast,
    /// `|statistic - target| <= tolerance`
    WithinAbs,
    /// `lo * target <= statistic <= hi * target`
    RatioBand { lo: f64, hi: f64 },
    /// `|statistic - target| > tolerance`
    Exceeds,
    /// `statistic > target + tolerance`
    Above,
    /// `statistic < target - tolerance`
    Below,
    /// outside `[lo * target, hi * target]`
    OutsideBand { lo: f64, hi: f64 },
}

impl Comparison {
    pub fn passes(&self, statistic: f64, target: f64, tolerance: f64) -> bool {
        let d = statistic - target;
        match *self {
            Comparison::AtMost => d <= tolerance,
            Comparison::AtLeast => d >= -tolerance,
            Comparison::WithinAbs => d.abs() <= tolerance,
            Comparison::RatioBand { lo, hi } => statistic >= lo * target && statistic <= hi * target,
            Comparison::Exceeds => d.abs() > tolerance,
            Comparison::Above => d > tolerance,
            Comparison::Below => d < -tolerance,
            Comparison::OutsideBand { lo, hi } => !(statistic >= lo * target && statistic <= hi * target),
        }
    }

    /// The acceptance region in plain terms, e.g. `<= 0.05` or `in [2.4, 6.4]`.
    pub fn describe(&self, target: f64, tolerance: f64) -> String {
        match *self {
            Comparison::AtMost => format!("<= {}", fmt_num(target + tolerance)),
            Comparison::AtLeast => format!(">= {}", fmt_num(target - tolerance)),
            Comparison::WithinAbs => format!("{} +- {}", fmt_num(target), fmt_num(tolerance)),
            Comparison::RatioBand { lo, hi } => format!("in [{}, {}]", fmt_num(lo * target), fmt_num(hi * target)),
            Comparison::Exceeds => format!("not {} +- {}", fmt_num(target), fmt_num(tolerance)),
            Comparison::Above => format!("> {}", fmt_num(target + tolerance)),
            Comparison::Below => format!("< {}", fmt_num(target - tolerance)),
            Comparison::OutsideBand { lo, hi } => format!("not in [{}, {}]", fmt_num(lo * target), fmt_num(hi * target)),
        }
    }

    /// The comparison that passes exactly when `self` fails.
    pub fn negated(&self) -> Comparison {
        match *self {
            Comparison::AtMost => Comparison::Above,
            Comparison::AtLeast => Comparison::Below,
            Comparison::WithinAbs => Comparison::Exceeds,
            Comparison::RatioBand { lo, hi } => Comparison::OutsideBand { lo, hi },
            Comparison::Exceeds => Comparison::WithinAbs,
            Comparison::Above => Comparison::AtMost,
            Comparison::Below => Comparison::AtLeast,
            Comparison::OutsideBand { lo, hi } => Comparison::RatioBand { lo, hi },
        }
    }
}

/// One pass/fail check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestReport {
    pub name: String,
    pub statistic: f64,
    pub target: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub passed: bool,
    pub note: String,
    pub fingerprint: Fingerprint,
}

impl TestReport {
    pub fn new(name: impl Into<String>, statistic: f64, target: f64, tolerance: f64, comparison: Comparison, fingerprint: Fingerprint) -> Self {
        let passed = comparison.passes(statistic, target, tolerance);
        Self { name: name.into(), statistic, target, tolerance, comparison, passed, note: String::new(), fingerprint }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    /// Recomputes the pass flag from the stored numbers.
    pub fn recheck(&self) -> bool {
        self.comparison.passes(self.statistic, self.target, self.tolerance)
    }
}

/// Fraction of nodes that must sit inside their band.
pub const FLATNESS_COVERAGE: f64 = 0.95;
/// Band half-width in standard errors.
pub const SIGMA_BAND: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlatnessOutcome {
    pub report: TestReport,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub inside: Vec<bool>,
}

/// Checks that the per-node sample mean stays within 3 standard errors of `target`.
///
/// `samples[k]` holds the outer-path values at node `k`. `target_uncertainty` is the standard
/// error of the target itself and widens every band. Passes when at least 95% of the nodes are
/// inside.
pub fn martingale_flatness(name: &str, samples: &[Vec<f64>], target: f64, target_uncertainty: f64, fingerprint: Fingerprint) -> Result<FlatnessOutcome> {
    if samples.is_empty() {
        return Err(invalid("flatness needs at least one node"));
    }
    let floor = 8.0 * f64::EPSILON * target.abs().max(1.0);
    let mut means = Vec::with_capacity(samples.len());
    let mut stderrs = Vec::with_capacity(samples.len());
    let mut inside = Vec::with_capacity(samples.len());
    for (k, xs) in samples.iter().enumerate() {
        if xs.len() < 2 {
            return Err(invalid(format!("node {k} has {} samples, need at least 2", xs.len())));
        }
        let s: RunningStats = xs.iter().copied().collect();
        let band = SIGMA_BAND * (s.stderr().powi(2) + target_uncertainty.powi(2)).sqrt() + floor;
        means.push(s.mean());
        stderrs.push(s.stderr());
        inside.push((s.mean() - target).abs() <= band);
    }
    let coverage = inside.iter().filter(|b| **b).count() as f64 / inside.len() as f64;
    let worst = means.iter().zip(&stderrs).map(|(m, se)| (m - target).abs() / se.max(floor)).fold(0.0, f64::max);
    let report = TestReport::new(name, coverage, FLATNESS_COVERAGE, 0.0, Comparison::AtLeast, fingerprint).with_note(format!(
        "fraction of {} nodes with |mean - {}| <= 3 se; worst deviation {} se",
        inside.len(),
        fmt_num(target),
        fmt_num(worst)
    ));
    Ok(FlatnessOutcome { report, means, stderrs, inside })
}

/// Default relative RMSE bound for replication.
pub const REPLICATION_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationOutcome {
    pub report: TestReport,
    pub relative_rmse: f64,
    pub admissible_rate: f64,
    pub terminal_errors: Vec<f64>,
}

/// Runs `policy` from `x0` on every path and compares `X^π(T)` with the optimal claim.
pub fn replication_test<P: PortfolioPolicy + ?Sized>(
    name: &str,
    market: &MarketModel,
    policy: &P,
    target: &DeflatedWealthFunctional,
    x0: f64,
    ensemble: &PathEnsemble,
    tolerance: f64,
    fingerprint: Fingerprint,
) -> Result<ReplicationOutcome> {
    if ensemble.is_empty() {
        return Err(invalid("replication needs at least one path"));
    }
    let tol = admissibility_tolerance(x0);
    let rows = ensemble
        .paths()
        .par_iter()
        .map(|p| {
            let wealth = wealth_under_policy(market, policy, x0, p)?;
            let claim = target.terminal_claim(p)?;
            Ok((wealth[wealth.len() - 1] - claim, check_admissible(&wealth, tol).admissible))
        })
        .collect::<Result<Vec<(f64, bool)>>>()?;
    let errors: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let relative_rmse = crate::stats::rms(&errors) / x0;
    let admissible_rate = rows.iter().filter(|r| r.1).count() as f64 / rows.len() as f64;
    let report = TestReport::new(name, relative_rmse, 0.0, tolerance, Comparison::AtMost, fingerprint)
        .with_note(format!("relative RMSE of X(T) - I(yH(T)) over {} paths; admissible rate {}", rows.len(), fmt_num(admissible_rate)));
    Ok(ReplicationOutcome { report, relative_rmse, admissible_rate, terminal_errors: errors })
}

/// Ratio band around the predicted refinement ratio.
pub const RATIO_BAND: (f64, f64) = (0.6, 1.6);
/// Metrics at or below this are treated as exactly zero.
pub const EXACT_ZERO: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub parameter: String,
    pub value: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    pub reports: Vec<TestReport>,
}

/// Sweeps one parameter, expecting `metric ∝ value^exponent`.
///
/// Each consecutive pair gives a report whose statistic is `metric_i / metric_{i+1}` and whose
/// target is `(value_i / value_{i+1})^exponent`, banded to `[0.6, 1.6]` times the target. When
/// every metric is zero to within `1e-12` the sweep passes as exact.
pub fn convergence_study<F>(name: &str, parameter: &str, values: &[f64], exponent: f64, fingerprint: Fingerprint, mut measure: F) -> Result<ConvergenceStudy>
where
    F: FnMut(f64) -> Result<f64>,
{
    if values.len() < 2 {
        return Err(invalid("a convergence sweep needs at least two values"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        rows.push(ConvergenceRow { parameter: parameter.to_string(), value: v, metric: measure(v)? });
    }
    Ok(ConvergenceStudy { reports: ratio_reports(name, parameter, &rows, exponent, fingerprint), rows })
}

fn ratio_reports(name: &str, parameter: &str, rows: &[ConvergenceRow], exponent: f64, fingerprint: Fingerprint) -> Vec<TestReport> {
    let largest = rows.iter().map(|r| r.metric.abs()).fold(0.0, f64::max);
    if largest <= EXACT_ZERO {
        return vec![TestReport::new(format!("{name}/exact"), largest, 0.0, EXACT_ZERO, Comparison::AtMost, fingerprint)
            .with_note(format!("metric vanishes at every {parameter}"))];
    }
    rows.windows(2)
        .map(|w| {
            let ratio = w[0].metric / w[1].metric;
            let expected = (w[0].value / w[1].value).powf(exponent);
            TestReport::new(
                format!("{name}/{parameter}={}->{}", fmt_num(w[0].value), fmt_num(w[1].value)),
                ratio,
                expected,
                0.0,
                Comparison::RatioBand { lo: RATIO_BAND.0, hi: RATIO_BAND.1 },
                fingerprint,
            )
            .with_note(format!("metric {} -> {}", fmt_num(w[0].metric), fmt_num(w[1].metric)))
        })
        .collect()
}

/// Representation residuals of several functionals on coupled ensembles of increasing `K`.
///
/// `ensembles` must be ordered from coarse to fine. For each functional the suite checks
/// non-anticipativity, then expects RMS ratios near `√2` between consecutive grids and a finest
/// RMS at most `bound`. A functional whose residual vanishes on every grid passes as exact.
pub fn representation_suite(
    name: &str,
    functionals: &[&dyn PathFunctional],
    ensembles: &[PathEnsemble],
    h: f64,
    bound: f64,
    fingerprint: Fingerprint,
) -> Result<Vec<TestReport>> {
    if ensembles.len() < 2 {
        return Err(invalid("representation suite needs at least two grids"));
    }
    let mut reports = Vec::new();
    for f in functionals {
        let probe = &ensembles[0].paths()[..ensembles[0].len().min(2)];
        check_non_anticipative(*f, probe)?;
        let mut rows = Vec::with_capacity(ensembles.len());
        for e in ensembles {
            let r = representation_residual(*f, e, h)?;
            rows.push(ConvergenceRow { parameter: "K".into(), value: e.grid().steps() as f64, metric: r.rms });
        }
        let label = format!("{name}/{}", f.label());
        let largest = rows.iter().map(|r| r.metric).fold(0.0, f64::max);
        if largest <= 1e-10 {
            reports.push(
                TestReport::new(format!("{label}/exact"), largest, 0.0, 1e-10, Comparison::AtMost, fingerprint)
                    .with_note("residual vanishes on every grid"),
            );
            continue;
        }
        // RMS ∝ K^{-1/2}: coarse/fine ratio is (K_i/K_{i+1})^{-1/2}
        reports.extend(ratio_reports(&label, "K", &rows, -0.5, fingerprint));
        let finest = rows[rows.len() - 1].metric;
        reports.push(
            TestReport::new(format!("{label}/finest-rms"), finest, 0.0, bound, Comparison::AtMost, fingerprint)
                .with_note(format!("residual RMS at K = {}", rows[rows.len() - 1].value)),
        );
    }
    Ok(reports)
}

/// `Y = W_1`.
pub fn brownian_functional() -> impl PathFunctional {
    FnFunctional::new("W", |k, p: &Path| Ok(p.level(k, 0)))
}

/// `Y = W_1² - t`.
pub fn compensated_square_functional() -> impl PathFunctional {
    FnFunctional::new("W^2-t", |k, p: &Path| Ok(p.level(k, 0).powi(2) - p.grid().time(k)))
}

/// The likelihood process `Z(t)` of a market.
#[derive(Debug)]
pub struct LikelihoodFunctional {
    market: MarketModel,
    cache: KernelCache,
}

impl LikelihoodFunctional {
    pub fn new(market: MarketModel) -> Self {
        Self { market, cache: KernelCache::default() }
    }
}

impl PathFunctional for LikelihoodFunctional {
    fn label(&self) -> &str {
        "Z"
    }

    fn evaluate(&self, node: usize, path: &Path) -> Result<f64> {
        self.market.check_path(path)?;
        path.grid().check_node(node)?;
        Ok(self.cache.kernel(&self.market, path.grid())?.prefix(path, node)?.log_z.exp())
    }
}

/// `E[Z(T)] = 1` within 3 standard errors.
pub fn likelihood_mean_test(name: &str, market: &MarketModel, ensemble: &PathEnsemble, fingerprint: Fingerprint) -> Result<(TestReport, Estimate)> {
    let z = LikelihoodFunctional::new(market.clone());
    let k = ensemble.grid().steps();
    let values = ensemble.paths().par_iter().map(|p| z.evaluate(k, p)).collect::<Result<Vec<f64>>>()?;
    let e = values.into_iter().collect::<RunningStats>().estimate();
    let report = TestReport::new(name, e.mean, 1.0, SIGMA_BAND * e.stderr, Comparison::WithinAbs, fingerprint)
        .with_note(format!("mean of Z(T) over {} paths, se {}", ensemble.len(), fmt_num(e.stderr)));
    Ok((report, e))
}

/// Two independent halves of a second-moment estimate agree within 3 combined standard errors.
pub fn moment_stability_test(name: &str, first: Estimate, second: Estimate, fingerprint: Fingerprint) -> TestReport {
    let combined = (first.stderr.powi(2) + second.stderr.powi(2)).sqrt();
    let finite = first.mean.is_finite() && second.mean.is_finite();
    let statistic = if finite { second.mean - first.mean } else { f64::INFINITY };
    TestReport::new(name, statistic, 0.0, SIGMA_BAND * combined, Comparison::WithinAbs, fingerprint).with_note(format!(
        "second moment {} (N) vs {} (2N)",
        fmt_num(first.mean),
        fmt_num(second.mean)
    ))
}

/// Wraps a check that must fail: passes exactly when `inner` fails.
pub fn expect_failure(name: &str, inner: &TestReport) -> TestReport {
    TestReport::new(name, inner.statistic, inner.target, inner.tolerance, inner.comparison.negated(), inner.fingerprint)
        .with_note(format!("planted fault must be detected by {}", inner.name))
}

/// Output format for report files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Writes `reports` to `path` with fixed formatting, so identical reports give identical bytes.
pub fn emit_report(reports: &[TestReport], format: ReportFormat, path: &FsPath) -> Result<()> {
    match format {
        ReportFormat::Json => write_json(reports, path),
        ReportFormat::Csv => write_bytes(path, reports_csv(reports).as_bytes()),
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn comparison_label(c: &Comparison) -> String {
    match c {
        Comparison::AtMost => "at_most".into(),
        Comparison::AtLeast => "at_least".into(),
        Comparison::WithinAbs => "within_abs".into(),
        Comparison::RatioBand { lo, hi } => format!("ratio_band[{}:{}]", fmt_num(*lo), fmt_num(*hi)),
        Comparison::Exceeds => "exceeds".into(),
        Comparison::Above => "above".into(),
        Comparison::Below => "below".into(),
        Comparison::OutsideBand { lo, hi } => format!("outside_band[{}:{}]", fmt_num(*lo), fmt_num(*hi)),
    }
}

pub fn reports_csv(reports: &[TestReport]) -> String {
    let mut out = String::from("name,statistic,target,tolerance,comparison,passed,seed,steps,outer_paths,inner_paths,bump,budget_paths,note\n");
    for r in reports {
        let f = &r.fingerprint;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            quote(&r.name),
            fmt_num(r.statistic),
            fmt_num(r.target),
            fmt_num(r.tolerance),
            comparison_label(&r.comparison),
            r.passed,
            f.seed,
            f.steps,
            f.outer_paths,
            f.inner_paths,
            fmt_num(f.bump),
            f.budget_paths,
            quote(&r.note)
        );
    }
    out
}

/// Human-readable summary, one line per report.
pub fn summary_table(reports: &[TestReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<6} {:<width$} {:>18}  {}\n", "status", "test", "statistic", "required");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<6} {:<width$} {:>18}  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            fmt_num(r.statistic),
            r.comparison.describe(r.target, r.tolerance)
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    let _ = writeln!(out, "{} checks, {} failed", reports.len(), failed);
    out
}

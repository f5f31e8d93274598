//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use optport::config::parse_config;
use optport::experiment::{gradient_z_score, plant_drift, Experiment};
use optport::funcalc::{horizontal_derivative, vertical_derivative, vertical_integrand, FnFunctional, IntegrandProcess, ItoSumFunctional};
use optport::market::{MarketModel, ScaledPolicy};
use optport::optimizer::{DeflatedWealthFunctional, OptimalPolicy};
use optport::paths::{simulate_brownian, Path, TimeGrid};
use optport::utility::{solve_multiplier, BudgetSample, EstimatorConfig, UtilitySpec};
use optport::verify::{
    brownian_functional, compensated_square_functional, convergence_study, expect_failure, likelihood_mean_test, martingale_flatness, moment_stability_test,
    replication_test, representation_suite, Comparison, Fingerprint, LikelihoodFunctional, TestReport, REPLICATION_TOLERANCE,
};
use optport::Result;

const LOG_ORACLE: &str = r#"{"estimator": {"steps": 64, "inner_paths": 10000, "bump": 0.05}}"#;
const POWER_ORACLE: &str = r#"{"utility": {"family": "power", "gamma": 0.5}, "estimator": {"steps": 64, "inner_paths": 10000, "bump": 0.05}}"#;
const POINTS: usize = 20;

fn experiment(json: &str) -> Result<Experiment> {
    Experiment::new(parse_config(json)?)
}

fn constants() -> Result<MarketModel> {
    experiment("{}").map(|e| e.market)
}

fn fp() -> Fingerprint {
    Fingerprint::from(&EstimatorConfig::default())
}

fn exactly(name: &str, statistic: f64, target: f64) -> TestReport {
    TestReport::new(name, statistic, target, 0.0, Comparison::WithinAbs, fp())
}

/// Exact up to floating-point rounding.
fn rounding(name: &str, statistic: f64, target: f64) -> TestReport {
    TestReport::new(name, statistic, target, 1e-12, Comparison::WithinAbs, fp())
}

fn runtime(name: &str, started: Instant, limit_secs: f64) -> TestReport {
    TestReport::new(name, started.elapsed().as_secs_f64(), 0.0, limit_secs, Comparison::AtMost, fp()).with_note("seconds")
}

fn log_oracle() -> Result<Vec<TestReport>> {
    let started = Instant::now();
    let exp = experiment(LOG_ORACLE)?;
    let solved = exp.solve()?;
    let f = exp.functional(&solved, exp.estimator.inner_paths)?;
    let points = exp.oracle_points(&f, POINTS, exp.estimator.bump)?;
    let fp = exp.fingerprint();
    let worst = points.iter().map(|p| p.relative_error(&exp.utility)).fold(0.0, f64::max);
    let grad = points.iter().map(|p| p.result.gradient.amax()).fold(0.0, f64::max);
    Ok(vec![
        TestReport::new("pi relative error vs x0 (a - r) / (s^2 H)", worst, 0.0, 0.02, Comparison::AtMost, fp),
        TestReport::new("max |grad M|", grad, 0.0, 0.0, Comparison::AtMost, fp),
        runtime("runtime", started, 60.0),
    ])
}

fn power_oracle() -> Result<Vec<TestReport>> {
    let started = Instant::now();
    let exp = experiment(POWER_ORACLE)?;
    let solved = exp.solve()?;
    let f = exp.functional(&solved, exp.estimator.inner_paths)?;
    let points = exp.oracle_points(&f, POINTS, exp.estimator.bump)?;
    let fp = exp.fingerprint();
    let worst = points.iter().map(|p| (p.result.pi[0] / p.result.wealth / 2.0 - 1.0).abs()).fold(0.0, f64::max);
    let mut z: f64 = 0.0;
    for p in &points {
        z = z.max(gradient_z_score(&exp.market, 0.5, p)?.0);
    }
    Ok(vec![
        TestReport::new("pi/X relative error vs 2", worst, 0.0, 0.05, Comparison::AtMost, fp),
        TestReport::new("grad M vs closed form, combined SEs", z, 0.0, 3.0, Comparison::AtMost, fp),
        runtime("runtime", started, 300.0),
    ])
}

fn multiplier() -> Result<Vec<TestReport>> {
    let market = constants()?;
    let cfg = EstimatorConfig::default();
    let budget = BudgetSample::simulate(&market, &cfg)?;
    let mut out = Vec::new();
    for x0 in [0.5, 1.0, 100.0] {
        let s = solve_multiplier(&UtilitySpec::Log, &budget, x0, 1e-10)?;
        out.push(TestReport::new(format!("log x0 = {x0}: y x0 - 1"), (s.multiplier * x0 - 1.0).abs(), 0.0, 1e-6, Comparison::AtMost, fp()));
    }
    let s = solve_multiplier(&UtilitySpec::power(0.5)?, &budget, 1.0, 1e-10)?;
    let exact = 0.05f64.exp().sqrt();
    out.push(
        TestReport::new("power x0 = 1: y vs sqrt(e^0.05)", (s.multiplier / exact - 1.0).abs(), 0.0, 1e-3, Comparison::AtMost, fp())
            .with_note(format!("y = {}", s.multiplier)),
    );
    Ok(out)
}

fn flatness() -> Result<Vec<TestReport>> {
    let mut out = Vec::new();
    for (name, json) in [
        ("log", r#"{"estimator": {"steps": 64}}"#),
        ("power", r#"{"utility": {"family": "power", "gamma": 0.5}, "estimator": {"steps": 64}}"#),
    ] {
        let exp = experiment(json)?;
        let solved = exp.solve()?;
        let f = exp.functional(&solved, 32)?;
        let samples = exp.martingale_samples(&f, 10_000)?;
        let fp = Fingerprint { outer_paths: 10_000, inner_paths: 32, ..exp.fingerprint() };
        out.push(martingale_flatness(&format!("{name}: nodes within 3 SE of x0"), &samples, exp.x0, solved.solve.budget_stderr, fp)?.report);
    }
    Ok(out)
}

fn representation() -> Result<Vec<TestReport>> {
    let market = constants()?;
    let fine = simulate_brownian(TimeGrid::new(1.0, 128)?, 1, 64, 20240607)?;
    let ensembles = vec![fine.coarsen(4)?, fine.coarsen(2)?, fine];
    let w = brownian_functional();
    let sq = compensated_square_functional();
    let z = LikelihoodFunctional::new(market.clone());
    let exp = experiment(r#"{"utility": {"family": "power", "gamma": 0.5}}"#)?;
    let y = exp.solve()?.solve.multiplier;
    let m = DeflatedWealthFunctional::new(market, UtilitySpec::power(0.5)?, y, 10_000, exp.estimator.seed)?;
    let fp = Fingerprint { outer_paths: 64, inner_paths: 10_000, ..fp() };
    representation_suite("residual", &[&w, &sq, &z, &m], &ensembles, 0.05, 0.25, fp)
}

fn replication() -> Result<Vec<TestReport>> {
    let exp = experiment(r#"{"utility": {"family": "power", "gamma": 0.5}}"#)?;
    let solved = exp.solve()?;
    let f = exp.functional(&solved, 2000)?;
    let fine = simulate_brownian(TimeGrid::new(1.0, 128)?, 1, 200, exp.estimator.seed)?;
    let fp = Fingerprint { outer_paths: 200, inner_paths: 2000, steps: 128, ..exp.fingerprint() };
    let mut finest = None;
    let study = convergence_study("K sweep", "K", &[32.0, 64.0, 128.0], -0.5, fp, |k| {
        let ensemble = fine.coarsen(128 / k as usize)?;
        let policy = OptimalPolicy { functional: &f, bump: exp.estimator.bump };
        let outcome = replication_test("relative RMSE at K = 128", &exp.market, &policy, &f, exp.x0, &ensemble, REPLICATION_TOLERANCE, fp)?;
        if k == 128.0 {
            finest = Some(outcome.report);
        }
        Ok(outcome.relative_rmse)
    })?;
    let mut out: Vec<TestReport> = finest.into_iter().collect();
    out.extend(study.reports);
    Ok(out)
}

fn funcalc_suite() -> Result<Vec<TestReport>> {
    let grid = TimeGrid::new(1.0, 4)?;
    let path = Path::scalar(grid, &[0.0, 0.7, 1.5, 1.1, 2.0])?;
    let mut out = Vec::new();

    let square = FnFunctional::new("x^2", |k, w: &Path| Ok(w.level(k, 0).powi(2)));
    out.push(rounding("d/dx x^2 at 1.5", vertical_derivative(&square, 2, &path, 0.05)?[0], 3.0));
    let at_two = Path::scalar(grid, &[0.0, 2.0, 2.0, 2.0, 2.0])?;
    let tx2 = FnFunctional::new("t x^2", |k, w: &Path| Ok(w.grid().time(k) * w.level(k, 0).powi(2)));
    out.push(rounding("d/dt t x^2 at x = 2", horizontal_derivative(&tx2, 1, &at_two)?, 4.0));

    let phi = IntegrandProcess::new(grid, 1, vec![1.0, -2.0, 0.5, 3.0])?;
    let integral = ItoSumFunctional::new(phi.clone());
    let recovered = vertical_integrand(&integral, &path, 0.1)?;
    let worst = (1..4).map(|k| (recovered.at(k)[0] - phi.at(k - 1)[0]).abs()).fold(0.0, f64::max);
    out.push(TestReport::new("step integrand recovery", worst, 0.0, 1e-12, Comparison::AtMost, fp()));

    // g(ω(t_1), ω(t)) = exp(ω(t_1)/2) sin(ω(t)) + ω(t)^3, differentiated at t_2
    let cylinder = FnFunctional::new("cylinder", |k, w: &Path| {
        let x = w.level(k, 0);
        Ok((0.5 * w.level(1.min(k), 0)).exp() * x.sin() + x.powi(3))
    });
    let x = path.level(2, 0);
    let exact = (0.5 * path.level(1, 0)).exp() * x.cos() + 3.0 * x * x;
    let errors: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|h| Ok((vertical_derivative(&cylinder, 2, &path, *h)?[0] - exact).abs())).collect::<Result<_>>()?;
    for (i, pair) in errors.windows(2).enumerate() {
        out.push(TestReport::new(format!("h-halving error ratio {}", i + 1), pair[0] / pair[1], 3.9, 0.0, Comparison::AtLeast, fp()));
    }
    Ok(out)
}

fn sanity() -> Result<Vec<TestReport>> {
    let market = constants()?;
    let ensemble = simulate_brownian(TimeGrid::new(1.0, 64)?, 1, 100_000, 20240607)?;
    let mut out = vec![likelihood_mean_test("E[Z(T)] within 3 SE of 1", &market, &ensemble, fp())?.0];
    let n = 1 << 18;
    let cfg = EstimatorConfig { budget_paths: 3 * n, ..EstimatorConfig::default() };
    let budget = BudgetSample::simulate(&market, &cfg)?;
    let spec = UtilitySpec::power(0.5)?;
    let y = solve_multiplier(&spec, &budget, 1.0, 1e-8)?.multiplier;
    let small = budget.second_moment(&spec, y, 0..n)?;
    let doubled = budget.second_moment(&spec, y, n..3 * n)?;
    out.push(moment_stability_test("second moment N vs 2N", small, doubled, fp()));
    Ok(out)
}

const SMALL_LOG: &str = r#""estimator": {"steps": 16, "outer_paths": 50, "inner_paths": 500, "budget_paths": 20000},
    "verify": {"oracle_points": 5, "flatness_paths": 200, "flatness_inner": 16, "replication_paths": 40, "replication_inner": 200, "sanity_paths": 10000}"#;

fn cli_exit(sabotage: &str) -> Result<i32> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("config.json");
    std::fs::write(&config, format!(r#"{{"run": {{"sabotage": "{sabotage}"}}, {SMALL_LOG}}}"#))?;
    let status = Command::new(env!("CARGO_BIN_EXE_optport"))
        .args(["verify", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()?
        .status;
    Ok(status.code().unwrap_or(-1))
}

fn sabotage() -> Result<Vec<TestReport>> {
    let mut out = Vec::new();
    let exp = experiment(r#"{"utility": {"family": "power", "gamma": 0.5}, "estimator": {"steps": 32}}"#)?;
    let solved = exp.solve()?;
    let f = exp.functional(&solved, 500)?;
    let ensemble = simulate_brownian(exp.grid()?, 1, 100, exp.estimator.seed)?;
    let doubled = ScaledPolicy { inner: OptimalPolicy { functional: &f, bump: exp.estimator.bump }, factor: 2.0 };
    let rep = replication_test("replication", &exp.market, &doubled, &f, exp.x0, &ensemble, REPLICATION_TOLERANCE, exp.fingerprint())?;
    out.push(expect_failure("doubled policy fails replication", &rep.report));

    let mut samples = exp.martingale_samples(&f, 500)?;
    plant_drift(&mut samples, exp.x0);
    let flat = martingale_flatness("flatness", &samples, exp.x0, solved.solve.budget_stderr, exp.fingerprint())?;
    out.push(expect_failure("drifted martingale fails flatness", &flat.report));

    out.push(exactly("cli exit, doubled policy", cli_exit("double-policy")? as f64, 1.0));
    out.push(exactly("cli exit, drifted martingale", cli_exit("drift-martingale")? as f64, 1.0));
    out.push(exactly("cli exit, clean control", cli_exit("none")? as f64, 0.0));
    Ok(out)
}

type Criterion = fn() -> Result<Vec<TestReport>>;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 9] = [
        ("log-utility oracle match", log_oracle),
        ("power-utility oracle match", power_oracle),
        ("multiplier solver", multiplier),
        ("martingale flatness", flatness),
        ("representation residual", representation),
        ("replication", replication),
        ("functional-calculus unit suite", funcalc_suite),
        ("probabilistic sanity", sanity),
        ("sabotage suite", sabotage),
    ];
    let mut failed = 0;
    for (i, (title, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(reports) => {
                let pass = !reports.is_empty() && reports.iter().all(|r| r.passed);
                failed += usize::from(!pass);
                println!("{} criterion {}: {title} ({secs:.1} s)", if pass { "PASS" } else { "FAIL" }, i + 1);
                for r in &reports {
                    println!(
                        "    {} {}: {} ({})",
                        if r.passed { "ok  " } else { "FAIL" },
                        r.name,
                        r.statistic,
                        r.comparison.describe(r.target, r.tolerance)
                    );
                }
            }
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {}: {title} ({secs:.1} s)\n    error: {e}", i + 1);
            }
        }
    }
    println!("{} criteria, {failed} failed", criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Command-line front end.
//!
//! Exit status is 0 when every executed check passes, 1 when a check fails and 2 on errors.

use std::fs;
use std::path::{Path as FsPath, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{emit_config, parse_config, ExperimentConfig};
use crate::error::Result;
use crate::experiment::Experiment;
use crate::optimizer::{write_portfolio_csv, ClosedForm, PortfolioResult};
use crate::report::{to_json_string, write_bytes, write_json};
use crate::verify::{emit_report, summary_table, ReportFormat, TestReport};

#[derive(Debug, Parser)]
#[command(name = "optport", version, about = "Optimal portfolios by nested Monte Carlo and vertical derivatives")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON experiment config; defaults are used for anything left out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Report format, overriding the config.
    #[arg(long, global = true, value_enum)]
    pub format: Option<ReportFormat>,

    /// Worker threads.
    #[arg(long, global = true, env = "OPTPORT_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Solve the budget multiplier and write it as JSON.
    SolveMultiplier,
    /// Optimal portfolio along one outer path, per node.
    Portfolio,
    /// Run the verification suite.
    Verify,
    /// Run the bump, inner-budget and time-step sweeps.
    Converge,
}

/// Loads the config file (or defaults) and applies command-line overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p)?,
        None => "{}".to_string(),
    };
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.estimator.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(format) = cli.format {
        cfg.run.format = format;
    }
    Ok(cfg)
}

fn extension(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Json => "json",
    }
}

fn portfolio_json(results: &[PortfolioResult], oracle: Option<&[ClosedForm]>) -> serde_json::Value {
    let rows: Vec<_> = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = json!({
                "node": r.node,
                "time": r.time,
                "X_star": r.wealth,
                "M": r.deflated_wealth,
                "pi": r.pi.as_slice(),
                "grad": r.gradient.as_slice(),
                "grad_stderr": r.gradient_stderr.as_slice(),
                "theta": r.theta.as_slice(),
                "H": r.state_price,
                "inner_stderr": r.inner_stderr,
                "bump": r.bump,
                "condition": r.condition,
            });
            if let Some(o) = oracle.and_then(|o| o.get(i)) {
                row["X_star_oracle"] = json!(o.wealth);
                row["pi_oracle"] = json!(o.pi.as_slice());
            }
            row
        })
        .collect();
    json!(rows)
}

fn finish_reports(reports: &[TestReport], format: ReportFormat, path: &FsPath) -> Result<bool> {
    emit_report(reports, format, path)?;
    print!("{}", summary_table(reports));
    println!("report written to {}", path.display());
    Ok(reports.iter().all(|r| r.passed))
}

/// Runs one subcommand; `Ok(true)` when every executed check passed.
pub fn run(command: Command, cfg: ExperimentConfig) -> Result<bool> {
    let out = PathBuf::from(&cfg.run.output_dir);
    let format = cfg.run.format;
    fs::create_dir_all(&out)?;
    write_bytes(&out.join("config.json"), emit_config(&cfg)?.as_bytes())?;
    let exp = Experiment::new(cfg)?;
    match command {
        Command::SolveMultiplier => {
            let solved = exp.solve()?;
            write_json(&solved.solve, &out.join("multiplier.json"))?;
            print!("{}", to_json_string(&solved.solve)?);
            Ok((solved.solve.budget - exp.x0).abs() <= solved.solve.rel_tol * exp.x0)
        }
        Command::Portfolio => {
            let solved = exp.solve()?;
            let (results, oracle) = exp.portfolio(&solved)?;
            let path = out.join(format!("portfolio.{}", extension(format)));
            match format {
                ReportFormat::Csv => {
                    let mut buf = Vec::new();
                    write_portfolio_csv(&results, exp.market.dim(), oracle.as_deref(), &mut buf)?;
                    write_bytes(&path, &buf)?;
                }
                ReportFormat::Json => write_json(&portfolio_json(&results, oracle.as_deref()), &path)?,
            }
            println!("portfolio for {} nodes written to {}", results.len(), path.display());
            Ok(true)
        }
        Command::Verify => {
            let reports = exp.verify()?;
            finish_reports(&reports, format, &out.join(format!("report.{}", extension(format))))
        }
        Command::Converge => {
            let output = exp.converge()?;
            write_json(&output.rows, &out.join("converge_rows.json"))?;
            finish_reports(&output.reports, format, &out.join(format!("converge.{}", extension(format))))
        }
    }
}

/// Parses arguments, runs, and maps the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not size the worker pool: {e}");
            return 2;
        }
    }
    let outcome = load_config(&cli).and_then(|cfg| run(cli.command, cfg));
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["optport", "verify", "--seed", "7", "--format", "csv", "--out", "x"]).unwrap();
        assert_eq!(cli.command, Command::Verify);
        let cfg = load_config(&cli).unwrap();
        assert_eq!(cfg.estimator.seed, 7);
        assert_eq!(cfg.run.format, ReportFormat::Csv);
        assert_eq!(cfg.run.output_dir, "x");
        assert!(Cli::try_parse_from(["optport", "frobnicate"]).is_err());
    }

    #[test]
    fn bad_config_exits_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"marekt": {}}"#).unwrap();
        assert_eq!(main_with_args(["optport", "solve-multiplier", "--config", p.to_str().unwrap()]), 2);
    }
}

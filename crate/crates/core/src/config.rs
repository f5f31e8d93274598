//! Experiment configuration: strict JSON schema, defaults and validation.
//!
//! Every key is checked against the schema before typed parsing, so a misspelt key is reported
//! with its full path and the closest valid name. After parsing, all defaults are written back
//! into the config, which is what gets echoed next to every run's output.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::funcalc::default_bump;
use crate::market::{Coefficients, ConstantCoefficients, MarketModel, RunningMaxVolatility, TimeVaryingCoefficients};
use crate::utility::{EstimatorConfig, UtilitySpec};
use crate::verify::ReportFormat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientFamily {
    Constant,
    TimeVarying,
    PathDependentDemo,
}

/// Coefficient rules. Slopes apply to `time-varying`, `sensitivity` to `path-dependent-demo`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientConfig {
    pub family: CoefficientFamily,
    pub rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<Vec<f64>>,
    /// Row-major `n x n` matrix.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volatility: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_slope: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volatility_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            family: CoefficientFamily::Constant,
            rate: 0.01,
            drift: None,
            volatility: None,
            rate_slope: None,
            drift_slope: None,
            volatility_slope: None,
            sensitivity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub n: usize,
    pub horizon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_prices: Option<Vec<f64>>,
    pub coefficients: CoefficientConfig,
    pub condition_cap: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self { n: 1, horizon: 1.0, initial_prices: None, coefficients: CoefficientConfig::default(), condition_cap: crate::market::DEFAULT_CONDITION_CAP }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityFamily {
    Log,
    Power,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilityConfig {
    pub family: UtilityFamily,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub x0: f64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self { family: UtilityFamily::Log, gamma: None, x0: 1.0 }
    }
}

/// Planted faults used to check that the harness can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sabotage {
    None,
    /// Replicate with twice the optimal portfolio.
    DoublePolicy,
    /// Add a drift reaching 10 standard errors at the horizon to the martingale samples.
    DriftMartingale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: String,
    /// Outer path used by `portfolio`.
    pub path_index: usize,
    pub sabotage: Sabotage,
    pub format: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { output_dir: "out".into(), path_index: 0, sabotage: Sabotage::None, format: ReportFormat::Json }
    }
}

/// Budgets of the `verify` suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random `(t, ω)` points compared with the closed form.
    pub oracle_points: usize,
    pub flatness_paths: usize,
    pub flatness_inner: usize,
    pub replication_paths: usize,
    pub replication_inner: usize,
    /// Paths behind `E[Z(T)]`.
    pub sanity_paths: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { oracle_points: 20, flatness_paths: 2000, flatness_inner: 32, replication_paths: 200, replication_inner: 1000, sanity_paths: 100_000 }
    }
}

/// Parameter lists of the `converge` sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    pub bumps: Vec<f64>,
    pub inner: Vec<usize>,
    pub steps: Vec<usize>,
    /// Evaluation points for the bump and inner sweeps.
    pub points: usize,
    /// Outer paths for the time-step sweep.
    pub paths: usize,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self { bumps: vec![0.2, 0.1, 0.05], inner: vec![100, 1000, 10_000], steps: vec![32, 64, 128], points: 5, paths: 200 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub market: MarketConfig,
    pub utility: UtilityConfig,
    pub estimator: EstimatorConfig,
    pub run: RunConfig,
    pub verify: VerifyConfig,
    pub converge: ConvergeConfig,
}

enum Schema {
    Leaf,
    Block(&'static [(&'static str, Schema)]),
}

use Schema::{Block, Leaf};

const SCHEMA: Schema = Block(&[
    (
        "market",
        Block(&[
            ("n", Leaf),
            ("horizon", Leaf),
            ("initial_prices", Leaf),
            (
                "coefficients",
                Block(&[
                    ("family", Leaf),
                    ("rate", Leaf),
                    ("drift", Leaf),
                    ("volatility", Leaf),
                    ("rate_slope", Leaf),
                    ("drift_slope", Leaf),
                    ("volatility_slope", Leaf),
                    ("sensitivity", Leaf),
                ]),
            ),
            ("condition_cap", Leaf),
        ]),
    ),
    ("utility", Block(&[("family", Leaf), ("gamma", Leaf), ("x0", Leaf)])),
    (
        "estimator",
        Block(&[
            ("steps", Leaf),
            ("outer_paths", Leaf),
            ("inner_paths", Leaf),
            ("bump", Leaf),
            ("seed", Leaf),
            ("budget_paths", Leaf),
            ("budget_rel_tol", Leaf),
        ]),
    ),
    ("run", Block(&[("output_dir", Leaf), ("path_index", Leaf), ("sabotage", Leaf), ("format", Leaf)])),
    (
        "verify",
        Block(&[
            ("oracle_points", Leaf),
            ("flatness_paths", Leaf),
            ("flatness_inner", Leaf),
            ("replication_paths", Leaf),
            ("replication_inner", Leaf),
            ("sanity_paths", Leaf),
        ]),
    ),
    ("converge", Block(&[("bumps", Leaf), ("inner", Leaf), ("steps", Leaf), ("points", Leaf), ("paths", Leaf)])),
]);

fn cfg_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn check_keys(value: &Value, schema: &Schema, prefix: &str) -> Result<()> {
    let (Block(fields), Value::Object(map)) = (schema, value) else {
        if let Block(_) = schema {
            let at = if prefix.is_empty() { "<root>" } else { prefix };
            return Err(cfg_err(at, "expected an object"));
        }
        return Ok(());
    };
    for (key, child) in map {
        match fields.iter().find(|(name, _)| name == key) {
            Some((_, sub)) => check_keys(child, sub, &join(prefix, key))?,
            None => {
                let best = fields
                    .iter()
                    .map(|(name, _)| (strsim::damerau_levenshtein(key, name), *name))
                    .min()
                    .filter(|(d, name)| *d <= 2.max(name.len() / 3));
                let hint = match best {
                    Some((_, name)) => format!("unknown key `{key}`; did you mean `{name}`?"),
                    None => {
                        let names: Vec<&str> = fields.iter().map(|(n, _)| *n).collect();
                        format!("unknown key `{key}`; expected one of {}", names.join(", "))
                    }
                };
                return Err(cfg_err(join(prefix, key), hint));
            }
        }
    }
    Ok(())
}

/// Parses, fills defaults and validates a JSON config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| cfg_err("<config>", format!("malformed JSON: {e}")))?;
    check_keys(&value, &SCHEMA, "")?;
    let bump_given = value.pointer("/estimator/bump").is_some();
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        cfg_err(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })?;
    if !bump_given {
        cfg.estimator.bump = if cfg.market.horizon > 0.0 { default_bump(cfg.market.horizon) } else { 0.05 };
    }
    cfg.materialize()?;
    cfg.validate()?;
    Ok(cfg)
}

/// The effective config as pretty JSON.
pub fn emit_config(cfg: &ExperimentConfig) -> Result<String> {
    let mut s = serde_json::to_string_pretty(cfg)?;
    s.push('\n');
    Ok(s)
}

fn family_name(f: CoefficientFamily) -> &'static str {
    match f {
        CoefficientFamily::Constant => "constant",
        CoefficientFamily::TimeVarying => "time-varying",
        CoefficientFamily::PathDependentDemo => "path-dependent-demo",
    }
}

impl ExperimentConfig {
    fn materialize(&mut self) -> Result<()> {
        let n = self.market.n;
        if n == 0 {
            return Err(cfg_err("market.n", "must be at least 1"));
        }
        self.market.initial_prices.get_or_insert_with(|| vec![1.0; n]);
        let c = &mut self.market.coefficients;
        c.drift.get_or_insert_with(|| vec![0.05; n]);
        c.volatility.get_or_insert_with(|| (0..n).map(|i| (0..n).map(|j| if i == j { 0.2 } else { 0.0 }).collect()).collect());
        let misplaced = |key: &str, family: &str| cfg_err(format!("market.coefficients.{key}"), format!("only used by family {family}"));
        match c.family {
            CoefficientFamily::Constant => {}
            CoefficientFamily::TimeVarying => {
                c.rate_slope.get_or_insert(0.0);
                c.drift_slope.get_or_insert_with(|| vec![0.0; n]);
                c.volatility_slope.get_or_insert(0.0);
            }
            CoefficientFamily::PathDependentDemo => {
                c.sensitivity.get_or_insert(0.5);
            }
        }
        if c.family != CoefficientFamily::TimeVarying {
            for (key, given) in [("rate_slope", c.rate_slope.is_some()), ("drift_slope", c.drift_slope.is_some()), ("volatility_slope", c.volatility_slope.is_some())] {
                if given {
                    return Err(misplaced(key, family_name(CoefficientFamily::TimeVarying)));
                }
            }
        }
        if c.family != CoefficientFamily::PathDependentDemo && c.sensitivity.is_some() {
            return Err(misplaced("sensitivity", family_name(CoefficientFamily::PathDependentDemo)));
        }
        match self.utility.family {
            UtilityFamily::Log if self.utility.gamma.is_some() => return Err(cfg_err("utility.gamma", "only used by family power")),
            UtilityFamily::Log => {}
            UtilityFamily::Power => {
                self.utility.gamma.get_or_insert(0.5);
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let m = &self.market;
        let n = m.n;
        if !(m.horizon.is_finite() && m.horizon > 0.0) {
            return Err(cfg_err("market.horizon", "must be positive"));
        }
        if !(m.condition_cap.is_finite() && m.condition_cap >= 1.0) {
            return Err(cfg_err("market.condition_cap", "must be at least 1"));
        }
        let prices = m.initial_prices.as_deref().unwrap_or_default();
        if prices.len() != n {
            return Err(cfg_err("market.initial_prices", format!("expected {n} entries, got {}", prices.len())));
        }
        if prices.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(cfg_err("market.initial_prices", "must be strictly positive"));
        }
        let c = &m.coefficients;
        let finite = |path: &str, xs: &[f64]| {
            if xs.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(cfg_err(path, "must be finite"))
            }
        };
        finite("market.coefficients.rate", &[c.rate])?;
        let drift = c.drift.as_deref().unwrap_or_default();
        if drift.len() != n {
            return Err(cfg_err("market.coefficients.drift", format!("expected {n} entries, got {}", drift.len())));
        }
        finite("market.coefficients.drift", drift)?;
        let vol = c.volatility.as_deref().unwrap_or_default();
        if vol.len() != n || vol.iter().any(|row| row.len() != n) {
            return Err(cfg_err("market.coefficients.volatility", format!("must be an {n}x{n} matrix")));
        }
        for row in vol {
            finite("market.coefficients.volatility", row)?;
        }
        if let Some(s) = &c.drift_slope {
            if s.len() != n {
                return Err(cfg_err("market.coefficients.drift_slope", format!("expected {n} entries, got {}", s.len())));
            }
            finite("market.coefficients.drift_slope", s)?;
        }
        if let Some(s) = c.rate_slope {
            finite("market.coefficients.rate_slope", &[s])?;
        }
        if let Some(s) = c.volatility_slope {
            if !(s.is_finite() && 1.0 + s * m.horizon > 0.0 && s > -1.0 / m.horizon) {
                return Err(cfg_err("market.coefficients.volatility_slope", "must keep 1 + slope * t positive on [0, horizon]"));
            }
        }
        if let Some(a) = c.sensitivity {
            if !(a.is_finite() && a.abs() < 1.0) {
                return Err(cfg_err("market.coefficients.sensitivity", "must satisfy |sensitivity| < 1"));
            }
        }
        let u = &self.utility;
        if let Some(g) = u.gamma {
            if !(g.is_finite() && g < 1.0 && g != 0.0) {
                return Err(cfg_err("utility.gamma", "must satisfy gamma < 1 and gamma != 0"));
            }
        }
        if !(u.x0.is_finite() && u.x0 > 0.0) {
            return Err(cfg_err("utility.x0", "must be positive"));
        }
        self.estimator.validate()?;
        let v = &self.verify;
        for (key, val) in [("oracle_points", v.oracle_points), ("replication_paths", v.replication_paths), ("replication_inner", v.replication_inner), ("flatness_inner", v.flatness_inner)] {
            if val == 0 {
                return Err(cfg_err(format!("verify.{key}"), "must be at least 1"));
            }
        }
        for (key, val) in [("flatness_paths", v.flatness_paths), ("sanity_paths", v.sanity_paths)] {
            if val < 2 {
                return Err(cfg_err(format!("verify.{key}"), "must be at least 2"));
            }
        }
        let cv = &self.converge;
        if cv.bumps.len() < 2 || cv.bumps.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(cfg_err("converge.bumps", "needs at least two positive values"));
        }
        if cv.inner.len() < 2 || cv.inner.contains(&0) {
            return Err(cfg_err("converge.inner", "needs at least two positive values"));
        }
        if cv.steps.len() < 2 || cv.steps.contains(&0) {
            return Err(cfg_err("converge.steps", "needs at least two positive values"));
        }
        let finest = *cv.steps.iter().max().unwrap_or(&1);
        if cv.steps.iter().any(|k| finest % k != 0) {
            return Err(cfg_err("converge.steps", "every value must divide the largest one"));
        }
        if cv.points == 0 || cv.paths == 0 {
            return Err(cfg_err(if cv.points == 0 { "converge.points" } else { "converge.paths" }, "must be at least 1"));
        }
        Ok(())
    }

    pub fn utility_spec(&self) -> Result<UtilitySpec> {
        match self.utility.family {
            UtilityFamily::Log => Ok(UtilitySpec::log()),
            UtilityFamily::Power => UtilitySpec::power(self.utility.gamma.unwrap_or(0.5)).map_err(|e| cfg_err("utility.gamma", e.to_string())),
        }
    }

    pub fn market_model(&self) -> Result<MarketModel> {
        let m = &self.market;
        let n = m.n;
        let c = &m.coefficients;
        let drift = DVector::from_vec(c.drift.clone().unwrap_or_else(|| vec![0.05; n]));
        let rows = c.volatility.clone().unwrap_or_default();
        let volatility = DMatrix::from_row_iterator(n, n, rows.into_iter().flatten());
        let coefficients: Arc<dyn Coefficients> = match c.family {
            CoefficientFamily::Constant => Arc::new(ConstantCoefficients { rate: c.rate, drift, volatility }),
            CoefficientFamily::TimeVarying => Arc::new(TimeVaryingCoefficients {
                rate: c.rate,
                rate_slope: c.rate_slope.unwrap_or(0.0),
                drift,
                drift_slope: DVector::from_vec(c.drift_slope.clone().unwrap_or_else(|| vec![0.0; n])),
                volatility,
                volatility_slope: c.volatility_slope.unwrap_or(0.0),
            }),
            CoefficientFamily::PathDependentDemo => Arc::new(RunningMaxVolatility { rate: c.rate, drift, volatility, sensitivity: c.sensitivity.unwrap_or(0.5) }),
        };
        let prices = m.initial_prices.clone().unwrap_or_else(|| vec![1.0; n]);
        Ok(MarketModel::new(m.horizon, prices, coefficients)?.with_condition_cap(m.condition_cap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn message(text: &str) -> String {
        parse_config(text).unwrap_err().to_string()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(r#"{"market": {"coefficients": {"family": "constant"}}, "utility": {"family": "log"}}"#).unwrap();
        assert_eq!(c.estimator.steps, 64);
        assert_eq!(c.estimator.inner_paths, 10_000);
        assert!((c.estimator.bump - 0.05).abs() < 1e-15);
        assert_eq!(c.market.coefficients.drift, Some(vec![0.05]));
        assert_eq!(parse_config("{}").unwrap(), c);
    }

    #[test]
    fn bump_default_scales_with_horizon() {
        let c = parse_config(r#"{"market": {"horizon": 4}}"#).unwrap();
        assert!((c.estimator.bump - 0.1).abs() < 1e-15);
        let c = parse_config(r#"{"market": {"horizon": 4}, "estimator": {"bump": 0.02}}"#).unwrap();
        assert_eq!(c.estimator.bump, 0.02);
    }

    #[test]
    fn gamma_out_of_range() {
        assert_eq!(message(r#"{"utility": {"family": "power", "gamma": 1.0}}"#), "utility.gamma: must satisfy gamma < 1 and gamma != 0");
        assert!(message(r#"{"utility": {"family": "power", "gamma": 0}}"#).starts_with("utility.gamma"));
        assert!(message(r#"{"utility": {"family": "log", "gamma": 0.5}}"#).starts_with("utility.gamma"));
    }

    #[test]
    fn unknown_keys_get_suggestions() {
        let m = message(r#"{"marekt": {}}"#);
        assert!(m.starts_with("marekt:") && m.contains("did you mean `market`"), "{m}");
        let m = message(r#"{"estimator": {"inner_path": 10}}"#);
        assert!(m.starts_with("estimator.inner_path:") && m.contains("`inner_paths`"), "{m}");
        let m = message(r#"{"market": {"coefficients": {"volatilty": [[0.2]]}}}"#);
        assert!(m.contains("market.coefficients.volatilty") && m.contains("`volatility`"), "{m}");
        assert!(message(r#"{"zzzzzzzz": 1}"#).contains("expected one of"));
    }

    #[test]
    fn malformed_and_mistyped() {
        let m = message("{\"market\": ");
        assert!(m.contains("malformed JSON") && m.contains("line 1"), "{m}");
        let m = message(r#"{"estimator": {"steps": "many"}}"#);
        assert!(m.starts_with("estimator.steps:"), "{m}");
        let m = message(r#"{"market": {"coefficients": {"family": "jumpy"}}}"#);
        assert!(m.starts_with("market.coefficients.family:"), "{m}");
    }

    #[test]
    fn shape_checks() {
        assert!(message(r#"{"market": {"n": 2, "coefficients": {"drift": [0.1]}}}"#).starts_with("market.coefficients.drift"));
        assert!(message(r#"{"market": {"n": 2, "coefficients": {"volatility": [[0.2, 0], [0.1]]}}}"#).starts_with("market.coefficients.volatility"));
        assert!(message(r#"{"market": {"coefficients": {"rate_slope": 0.1}}}"#).starts_with("market.coefficients.rate_slope"));
        assert!(message(r#"{"market": {"coefficients": {"family": "path-dependent-demo", "sensitivity": 1.5}}}"#).contains("sensitivity"));
        assert!(message(r#"{"converge": {"steps": [32, 48]}}"#).starts_with("converge.steps"));
        assert!(message(r#"{"utility": {"x0": -1}}"#).starts_with("utility.x0"));
    }

    #[test]
    fn builds_each_family() {
        for family in ["constant", "time-varying", "path-dependent-demo"] {
            let c = parse_config(&format!(r#"{{"market": {{"n": 2, "coefficients": {{"family": "{family}"}}}}}}"#)).unwrap();
            let m = c.market_model().unwrap();
            assert_eq!(m.dim(), 2);
            assert_eq!(m.is_deterministic(), family != "path-dependent-demo");
        }
    }

    #[test]
    fn sabotage_values() {
        let c = parse_config(r#"{"run": {"sabotage": "double-policy"}}"#).unwrap();
        assert_eq!(c.run.sabotage, Sabotage::DoublePolicy);
        assert!(parse_config(r#"{"run": {"sabotage": "drift-martingale", "format": "csv"}}"#).is_ok());
    }

    fn arb_config() -> impl Strategy<Value = String> {
        (
            1usize..4,
            0.25f64..4.0,
            prop_oneof![Just("constant"), Just("time-varying"), Just("path-dependent-demo")],
            prop_oneof![Just(None), (-3.0f64..0.9).prop_filter("nonzero", |g| g.abs() > 1e-3).prop_map(Some)],
            1usize..300,
            any::<u64>(),
            prop::option::of(0.001f64..0.5),
        )
            .prop_map(|(n, horizon, family, gamma, steps, seed, bump)| {
                let utility = match gamma {
                    Some(g) => format!(r#"{{"family": "power", "gamma": {g}, "x0": 2.5}}"#),
                    None => r#"{"family": "log"}"#.to_string(),
                };
                let bump = bump.map(|b| format!(r#", "bump": {b}"#)).unwrap_or_default();
                format!(
                    r#"{{"market": {{"n": {n}, "horizon": {horizon}, "coefficients": {{"family": "{family}"}}}},
                        "utility": {utility}, "estimator": {{"steps": {steps}, "seed": {seed}{bump}}}}}"#
                )
            })
    }

    proptest! {
        #[test]
        fn echo_round_trip(text in arb_config()) {
            let first = parse_config(&text).unwrap();
            let echoed = emit_config(&first).unwrap();
            let second = parse_config(&echoed).unwrap();
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(echoed, emit_config(&second).unwrap());
        }
    }
}

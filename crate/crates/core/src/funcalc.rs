//! Numerical functional calculus on discrete paths.
//!
//! Vertical derivatives are central differences under the bump `h 1_{[t,T]}`. A bump at node
//! `t_k` shifts the level at `t_k` and everything after it, so it lands on the increment that
//! arrives at `t_k`; the left-point sums used throughout weight that increment with the
//! integrand at `t_{k-1}`.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{invalid, numeric, Result};
use crate::paths::{bump_path, stop_path, Path, PathEnsemble, TimeGrid};
use crate::report::fmt_num;
use crate::stats::rms;

/// Default vertical bump for horizon `T`: `0.05 * sqrt(T)`.
pub fn default_bump(horizon: f64) -> f64 {
    0.05 * horizon.sqrt()
}

/// A map `(t, ω) -> F(t, ω)` that only looks at `ω` up to `t`.
pub trait PathFunctional: Sync {
    fn label(&self) -> &str;

    fn evaluate(&self, node: usize, path: &Path) -> Result<f64>;

    /// Evaluates several paths at the same node. Stochastic functionals override this to share
    /// their inner randomness across the batch.
    fn evaluate_batch(&self, node: usize, paths: &[Path]) -> Result<Vec<f64>> {
        paths.iter().map(|p| self.evaluate(node, p)).collect()
    }
}

/// Functional backed by a closure.
pub struct FnFunctional<F> {
    label: String,
    f: F,
}

impl<F> FnFunctional<F>
where
    F: Fn(usize, &Path) -> Result<f64> + Sync,
{
    pub fn new(label: impl Into<String>, f: F) -> Self {
        Self { label: label.into(), f }
    }
}

impl<F> PathFunctional for FnFunctional<F>
where
    F: Fn(usize, &Path) -> Result<f64> + Sync,
{
    fn label(&self) -> &str {
        &self.label
    }

    fn evaluate(&self, node: usize, path: &Path) -> Result<f64> {
        (self.f)(node, path)
    }
}

/// Integrand values `φ(t_k)` for `k = 0..K-1` (left-point convention).
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrandProcess {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl IntegrandProcess {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.steps() * dim {
            return Err(invalid(format!(
                "integrand needs {} values ({} nodes x {dim}), got {}",
                grid.steps() * dim,
                grid.steps(),
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let values = value.iter().copied().cycle().take(grid.steps() * value.len()).collect();
        Self { grid, dim: value.len(), values }
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(usize) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.steps() * dim);
        for k in 0..grid.steps() {
            let v = f(k);
            if v.len() != dim {
                return Err(invalid(format!("integrand at node {k} has length {}, expected {dim}", v.len())));
            }
            values.extend(v);
        }
        Self::new(grid, dim, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    fn partial_integral(&self, path: &Path, upto: usize) -> f64 {
        let mut acc = 0.0;
        for k in 0..upto {
            for (i, phi) in self.at(k).iter().enumerate() {
                acc += phi * path.increment(k, i);
            }
        }
        acc
    }
}

/// Left-point sum `Σ_{k<K} φ(t_k)' (ω(t_{k+1}) - ω(t_k))`.
pub fn discrete_stochastic_integral(phi: &IntegrandProcess, path: &Path) -> Result<f64> {
    if phi.grid != *path.grid() || phi.dim != path.dim() {
        return Err(invalid("integrand and path live on different grids or dimensions"));
    }
    Ok(phi.partial_integral(path, path.grid().steps()))
}

/// The running integral `t_k -> Σ_{j<k} φ(t_j)' ΔW_j` as a functional.
pub struct ItoSumFunctional {
    phi: IntegrandProcess,
}

impl ItoSumFunctional {
    pub fn new(phi: IntegrandProcess) -> Self {
        Self { phi }
    }
}

impl PathFunctional for ItoSumFunctional {
    fn label(&self) -> &str {
        "ito-sum"
    }

    fn evaluate(&self, node: usize, path: &Path) -> Result<f64> {
        if self.phi.grid != *path.grid() || self.phi.dim != path.dim() {
            return Err(invalid("integrand and path live on different grids or dimensions"));
        }
        path.grid().check_node(node)?;
        Ok(self.phi.partial_integral(path, node))
    }
}

/// Central-difference vertical derivative at `node`, one entry per coordinate.
///
/// All `2n` bumped paths go through one [`PathFunctional::evaluate_batch`] call, so stochastic
/// functionals that key their inner randomness on the path stream use common random numbers.
pub fn vertical_derivative<F: PathFunctional + ?Sized>(f: &F, node: usize, path: &Path, h: f64) -> Result<DVector<f64>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid(format!("bump size must be positive, got {h}")));
    }
    let stopped = stop_path(path, node)?;
    let n = path.dim();
    let mut batch = Vec::with_capacity(2 * n);
    for i in 0..n {
        batch.push(bump_path(&stopped, node, i, h)?);
        batch.push(bump_path(&stopped, node, i, -h)?);
    }
    let values = f.evaluate_batch(node, &batch)?;
    let mut grad = DVector::zeros(n);
    for i in 0..n {
        let (up, down) = (values[2 * i], values[2 * i + 1]);
        if !up.is_finite() {
            return Err(numeric(format!("{} non-finite under +h bump of coordinate {i} at node {node}", f.label())));
        }
        if !down.is_finite() {
            return Err(numeric(format!("{} non-finite under -h bump of coordinate {i} at node {node}", f.label())));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Forward difference along the frozen path: `[F(t_{k+1}, ω_{t_k}) - F(t_k, ω_{t_k})] / Δt`.
pub fn horizontal_derivative<F: PathFunctional + ?Sized>(f: &F, node: usize, path: &Path) -> Result<f64> {
    let grid = path.grid();
    if node >= grid.steps() {
        return Err(invalid("horizontal derivative is undefined at the horizon"));
    }
    let stopped = stop_path(path, node)?;
    let later = f.evaluate(node + 1, &stopped)?;
    let now = f.evaluate(node, &stopped)?;
    let d = (later - now) / grid.dt();
    if !d.is_finite() {
        return Err(numeric(format!("{} non-finite horizontal difference at node {node}", f.label())));
    }
    Ok(d)
}

/// Checks `F(t, ω) == F(t, ω_t)` bit-for-bit at every node of every path.
pub fn check_non_anticipative<F: PathFunctional + ?Sized>(f: &F, paths: &[Path]) -> Result<()> {
    for p in paths {
        for k in 0..=p.grid().steps() {
            let full = f.evaluate(k, p)?;
            let stopped = f.evaluate(k, &stop_path(p, k)?)?;
            if full.to_bits() != stopped.to_bits() {
                return Err(invalid(format!(
                    "{} anticipates: node {k} of path {} gives {full} on the full path and {stopped} on the stopped path",
                    f.label(),
                    p.stream()
                )));
            }
        }
    }
    Ok(())
}

/// Estimated integrand `∇_W Y(t_k)` along one path.
pub fn vertical_integrand<F: PathFunctional + ?Sized>(f: &F, path: &Path, h: f64) -> Result<IntegrandProcess> {
    let grid = *path.grid();
    let n = path.dim();
    let mut values = Vec::with_capacity(grid.steps() * n);
    for k in 0..grid.steps() {
        values.extend(vertical_derivative(f, k, path, h)?.iter());
    }
    IntegrandProcess::new(grid, n, values)
}

/// Per-path residuals of the discrete martingale representation.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    pub label: String,
    pub steps: usize,
    pub streams: Vec<u64>,
    pub residuals: Vec<f64>,
    pub rms: f64,
}

impl ResidualReport {
    /// Writes `path_id,residual` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path_id,residual")?;
        for (id, r) in self.streams.iter().zip(&self.residuals) {
            writeln!(w, "{id},{}", fmt_num(*r))?;
        }
        Ok(())
    }
}

/// `Y(T) - Y(0) - Σ ∇_W Y(t_k)' ΔW_k` on every member of the ensemble.
pub fn representation_residual<F: PathFunctional + ?Sized>(y: &F, ensemble: &PathEnsemble, h: f64) -> Result<ResidualReport> {
    let steps = ensemble.grid().steps();
    let residuals = ensemble
        .paths()
        .par_iter()
        .map(|p| {
            let phi = vertical_integrand(y, p, h)?;
            let r = y.evaluate(steps, p)? - y.evaluate(0, p)? - discrete_stochastic_integral(&phi, p)?;
            if !r.is_finite() {
                return Err(numeric(format!("{} residual non-finite on path {}", y.label(), p.stream())));
            }
            Ok(r)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ResidualReport {
        label: y.label().to_string(),
        steps,
        streams: ensemble.paths().iter().map(Path::stream).collect(),
        rms: rms(&residuals),
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::simulate_brownian;

    fn grid(k: usize) -> TimeGrid {
        TimeGrid::new(1.0, k).unwrap()
    }

    fn point_path() -> Path {
        // ω(t_2) = 1.5
        Path::scalar(grid(4), &[0.0, 0.7, 1.5, 1.1, 2.0]).unwrap()
    }

    #[test]
    fn projection_has_unit_derivative() {
        let g = grid(4);
        let p = Path::new(g, 2, vec![0.0, 0.0, 0.3, -0.2, 0.1, 0.5, 0.4, 0.4, 0.9, -1.0], 0).unwrap();
        for i in 0..2 {
            let f = FnFunctional::new("proj", move |k, w: &Path| Ok(w.level(k, i)));
            for k in 0..=4 {
                let d = vertical_derivative(&f, k, &p, 0.05).unwrap();
                let mut e = DVector::zeros(2);
                e[i] = 1.0;
                assert!((d - e).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn quadratic_cylinder_is_exact() {
        let f = FnFunctional::new("square", |k, w: &Path| Ok(w.level(k, 0).powi(2)));
        let d = vertical_derivative(&f, 2, &point_path(), 0.05).unwrap();
        assert!((d[0] - 3.0).abs() < 1e-13);
    }

    #[test]
    fn ito_sum_recovers_left_point_weight() {
        let g = grid(4);
        let f = ItoSumFunctional::new(IntegrandProcess::constant(g, &[0.7]));
        for k in 1..=4 {
            let d = vertical_derivative(&f, k, &point_path(), 0.05).unwrap();
            assert!((d[0] - 0.7).abs() < 1e-13, "node {k}: {}", d[0]);
        }
        let step = IntegrandProcess::new(g, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let f = ItoSumFunctional::new(step.clone());
        for k in 1..=4 {
            let d = vertical_derivative(&f, k, &point_path(), 0.1).unwrap();
            assert!((d[0] - step.at(k - 1)[0]).abs() < 1e-13);
        }
        // Nothing arrives at the first node.
        assert_eq!(vertical_derivative(&f, 0, &point_path(), 0.1).unwrap()[0], 0.0);
    }

    #[test]
    fn horizontal_examples() {
        let p = point_path();
        let time = FnFunctional::new("time", |k, w: &Path| Ok(w.grid().time(k)));
        assert!((horizontal_derivative(&time, 1, &p).unwrap() - 1.0).abs() < 1e-13);
        let proj = FnFunctional::new("proj", |k, w: &Path| Ok(w.level(k, 0)));
        assert_eq!(horizontal_derivative(&proj, 1, &p).unwrap(), 0.0);
        // ω(t_1)=2 with the function t x²
        let q = Path::scalar(grid(4), &[0.0, 2.0, 1.0, 0.0, 0.0]).unwrap();
        let f = FnFunctional::new("tx2", |k, w: &Path| Ok(w.grid().time(k) * w.level(k, 0).powi(2)));
        assert!((horizontal_derivative(&f, 1, &q).unwrap() - 4.0).abs() < 1e-12);
        assert!(horizontal_derivative(&f, 4, &q).is_err());
    }

    #[test]
    fn integral_examples() {
        let g = grid(4);
        let p = point_path();
        assert_eq!(discrete_stochastic_integral(&IntegrandProcess::constant(g, &[0.0]), &p).unwrap(), 0.0);
        let one = discrete_stochastic_integral(&IntegrandProcess::constant(g, &[1.0]), &p).unwrap();
        assert!((one - 2.0).abs() < 1e-14);
        let other = IntegrandProcess::constant(grid(2), &[1.0]);
        assert!(discrete_stochastic_integral(&other, &p).is_err());
    }

    #[test]
    fn non_finite_reports_sign() {
        let f = FnFunctional::new("blowup", |k, w: &Path| {
            let x = w.level(k, 0);
            Ok(if x > 1.5 { f64::INFINITY } else { x })
        });
        let err = vertical_derivative(&f, 2, &point_path(), 0.1).unwrap_err();
        assert!(err.to_string().contains("+h"), "{err}");
    }

    #[test]
    fn anticipating_functional_is_caught() {
        let g = grid(4);
        let peek = FnFunctional::new("peek", |_k, w: &Path| Ok(w.terminal()[0]));
        let e = simulate_brownian(g, 1, 3, 5).unwrap();
        assert!(check_non_anticipative(&peek, e.paths()).is_err());
        let fine = FnFunctional::new("fine", |k, w: &Path| Ok(w.level(k, 0)));
        check_non_anticipative(&fine, e.paths()).unwrap();
    }

    #[test]
    fn residual_of_wiener_and_constant_vanish() {
        let e = simulate_brownian(grid(16), 1, 50, 2).unwrap();
        let w = FnFunctional::new("W", |k, p: &Path| Ok(p.level(k, 0)));
        assert!(representation_residual(&w, &e, 0.05).unwrap().rms < 1e-13);
        let c = FnFunctional::new("const", |_k, _p: &Path| Ok(2.5));
        assert_eq!(representation_residual(&c, &e, 0.05).unwrap().rms, 0.0);
    }

    #[test]
    fn residual_csv() {
        let e = simulate_brownian(grid(4), 1, 2, 2).unwrap();
        let c = FnFunctional::new("const", |_k, _p: &Path| Ok(1.0));
        let r = representation_residual(&c, &e, 0.05).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "path_id,residual\n0,0\n1,0\n");
    }
}

//! Time grids, Wiener path simulation and path surgery.
//!
//! Paths are stored by node levels; increments are derived on demand. Stopping, bumping and
//! extending a path therefore only touch a suffix of the level array.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::report::fmt_num;
use crate::rng::{self, StreamRng};

/// Uniform grid `0 = t_0 < t_1 < ... < t_K = T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps == 0 {
            return Err(invalid("time grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `K`; node indices run over `0..=K`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of node `k`. The last node is exactly the horizon.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Node index of time `t`. Off-grid times are rejected.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let x = t / self.dt();
        let k = x.round();
        if !(t.is_finite()) || k < 0.0 || k > self.steps as f64 || (x - k).abs() > 1e-9 {
            return Err(invalid(format!("time {t} is not a node of a {}-step grid on [0, {}]", self.steps, self.horizon)));
        }
        Ok(k as usize)
    }

    pub(crate) fn check_node(&self, node: usize) -> Result<()> {
        if node > self.steps {
            return Err(invalid(format!("node {node} outside grid with {} steps", self.steps)));
        }
        Ok(())
    }

    /// Grid with `steps / factor` steps over the same horizon.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(invalid(format!("cannot coarsen {} steps by factor {factor}", self.steps)));
        }
        TimeGrid::new(self.horizon, self.steps / factor)
    }
}

/// Sampled `n`-dimensional path: one level vector per grid node.
///
/// `stream` identifies the random stream that produced the path (its ensemble member index).
/// Derived paths keep it, so estimators that key their inner randomness on it see the same
/// numbers for a path and for its bumps.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    stream: u64,
}

impl Path {
    /// Builds a path from a flat node-major level array of length `(K + 1) * dim`.
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>, stream: u64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("path dimension must be positive"));
        }
        if values.len() != (grid.steps + 1) * dim {
            return Err(invalid(format!(
                "expected {} levels for {} nodes x {} coordinates, got {}",
                (grid.steps + 1) * dim,
                grid.steps + 1,
                dim,
                values.len()
            )));
        }
        Ok(Self { grid, dim, values, stream })
    }

    /// One-dimensional path from its node levels.
    pub fn scalar(grid: TimeGrid, levels: &[f64]) -> Result<Self> {
        Self::new(grid, 1, levels.to_vec(), 0)
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Result<Self> {
        Self::new(grid, dim, vec![0.0; (grid.steps + 1) * dim.max(1)], 0)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    /// Level vector at node `k`.
    #[inline]
    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn level(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.dim + i]
    }

    /// Increment `ω(t_{k+1}) - ω(t_k)` in coordinate `i`.
    #[inline]
    pub fn increment(&self, k: usize, i: usize) -> f64 {
        self.values[(k + 1) * self.dim + i] - self.values[k * self.dim + i]
    }

    pub fn levels(&self) -> &[f64] {
        &self.values
    }

    pub fn terminal(&self) -> &[f64] {
        self.value(self.grid.steps)
    }

    /// Same path sampled on every `factor`-th node.
    pub fn coarsen(&self, factor: usize) -> Result<Path> {
        let grid = self.grid.coarsen(factor)?;
        let mut values = Vec::with_capacity((grid.steps + 1) * self.dim);
        for k in 0..=grid.steps {
            values.extend_from_slice(self.value(k * factor));
        }
        Path::new(grid, self.dim, values, self.stream)
    }
}

/// Path frozen after node `node`: `ω_t(s) = ω(t ∧ s)`.
pub fn stop_path(path: &Path, node: usize) -> Result<Path> {
    path.grid.check_node(node)?;
    let mut out = path.clone();
    let dim = path.dim;
    let frozen = node * dim;
    for k in node + 1..=path.grid.steps {
        out.values.copy_within(frozen..frozen + dim, k * dim);
    }
    Ok(out)
}

/// Adds `h` to coordinate `coord` at every node at or after `node` (the discrete `h 1_{[t,T]}`).
pub fn bump_path(path: &Path, node: usize, coord: usize, h: f64) -> Result<Path> {
    let mut out = path.clone();
    bump_in_place(&mut out, node, coord, h)?;
    Ok(out)
}

pub(crate) fn bump_in_place(path: &mut Path, node: usize, coord: usize, h: f64) -> Result<()> {
    path.grid.check_node(node)?;
    if coord >= path.dim {
        return Err(invalid(format!("coordinate {coord} out of range for dimension {}", path.dim)));
    }
    for k in node..=path.grid.steps {
        path.values[k * path.dim + coord] += h;
    }
    Ok(())
}

/// Continues `history` after `node` with the given increments.
///
/// `increments` is node-major and covers steps `node..K`, i.e. `(K - node) * dim` numbers.
/// Levels of `history` after `node` are ignored.
pub fn extend_path(history: &Path, node: usize, increments: &[f64]) -> Result<Path> {
    let mut out = history.clone();
    extend_in_place(&mut out, node, increments)?;
    Ok(out)
}

pub(crate) fn extend_in_place(path: &mut Path, node: usize, increments: &[f64]) -> Result<()> {
    path.grid.check_node(node)?;
    let dim = path.dim;
    let expected = (path.grid.steps - node) * dim;
    if increments.len() != expected {
        return Err(invalid(format!(
            "increment block has {} entries, expected {expected} for steps {node}..{}",
            increments.len(),
            path.grid.steps
        )));
    }
    for (j, block) in increments.chunks_exact(dim).enumerate() {
        let k = node + j;
        for i in 0..dim {
            path.values[(k + 1) * dim + i] = path.values[k * dim + i] + block[i];
        }
    }
    Ok(())
}

/// Fills `out` with `len` independent `N(0, dt)` draws.
pub(crate) fn fill_increments(rng: &mut StreamRng, sqrt_dt: f64, out: &mut [f64]) {
    for x in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = sqrt_dt * z;
    }
}

/// Monte Carlo population of Wiener paths on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    dim: usize,
    master_seed: u64,
    paths: Vec<Path>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Member `j` was drawn from stream `(master_seed, j)`.
    pub fn stream_of(&self, j: usize) -> u64 {
        self.paths[j].stream
    }

    /// Every member sampled on a coarser grid; the Brownian paths are shared.
    pub fn coarsen(&self, factor: usize) -> Result<PathEnsemble> {
        let paths = self.paths.iter().map(|p| p.coarsen(factor)).collect::<Result<Vec<_>>>()?;
        Ok(PathEnsemble { grid: self.grid.coarsen(factor)?, dim: self.dim, master_seed: self.master_seed, paths })
    }

    /// Writes `path_id,node_index,time,w_1..w_n` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "path_id,node_index,time")?;
        for i in 1..=self.dim {
            write!(w, ",w_{i}")?;
        }
        writeln!(w)?;
        for p in &self.paths {
            for k in 0..=self.grid.steps {
                write!(w, "{},{},{}", p.stream, k, fmt_num(self.grid.time(k)))?;
                for x in p.value(k) {
                    write!(w, ",{}", fmt_num(*x))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Single member `stream` of the ensemble `simulate_brownian(grid, dim, _, seed)`.
pub fn brownian_member(grid: TimeGrid, dim: usize, seed: u64, stream: u64) -> Path {
    let mut rng = rng::stream(seed, rng::OUTER_DOMAIN, &[stream]);
    let mut incs = vec![0.0; grid.steps * dim];
    fill_increments(&mut rng, grid.dt().sqrt(), &mut incs);
    let mut path = Path { grid, dim, values: vec![0.0; (grid.steps + 1) * dim], stream };
    extend_in_place(&mut path, 0, &incs).expect("block length matches grid");
    path
}

/// Simulates `n_paths` standard Wiener paths started at the origin.
pub fn simulate_brownian(grid: TimeGrid, dim: usize, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if dim == 0 {
        return Err(invalid("dimension must be positive"));
    }
    if n_paths == 0 {
        return Err(invalid("ensemble needs at least one path"));
    }
    let paths = (0..n_paths as u64)
        .into_par_iter()
        .map(|j| brownian_member(grid, dim, seed, j))
        .collect();
    Ok(PathEnsemble { grid, dim, master_seed: seed, paths })
}

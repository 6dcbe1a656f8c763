//! Time grids, the frozen backward noise `W`, and forward-noise structures
//! (recombining trees and Monte Carlo ensembles) under a piecewise-constant
//! volatility control.
//!
//! All random draws come from ChaCha8 streams keyed by `(seed, stream)`, so
//! results do not depend on how work is split across threads.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

/// Uniform partition of `[t0, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && horizon.is_finite()) || horizon <= t0 {
            return invalid(format!("time span [{t0}, {horizon}] is empty"));
        }
        if n_steps == 0 {
            return invalid("time grid needs at least one step");
        }
        Ok(Self {
            t0,
            horizon,
            n_steps,
            dt: (horizon - t0) / n_steps as f64,
        })
    }

    /// Time of node `i`. The last node is pinned to the horizon exactly.
    pub fn time(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.horizon
        } else {
            self.t0 + i as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }

    pub fn span(&self) -> f64 {
        self.horizon - self.t0
    }

    /// Same span with the step count multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.t0, self.horizon, self.n_steps * factor)
    }
}

pub fn build_time_grid(t0: f64, horizon: f64, n: usize) -> Result<TimeGrid> {
    TimeGrid::new(t0, horizon, n)
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One frozen trajectory of the backward Brownian motion `W`, stored at the
/// grid nodes. Component `k` of node `i` lives at `values[i * dim + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardPath {
    pub grid: TimeGrid,
    pub dim: usize,
    pub values: Vec<f64>,
    pub seed: u64,
}

impl BackwardPath {
    pub fn from_values(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return invalid("backward noise dimension must be >= 1");
        }
        if values.len() != (grid.n_steps + 1) * dim {
            return invalid(format!(
                "expected {} path values, got {}",
                (grid.n_steps + 1) * dim,
                values.len()
            ));
        }
        Ok(Self {
            grid,
            dim,
            values,
            seed: 0,
        })
    }

    /// The zero path: every backward integral vanishes.
    pub fn zero(grid: TimeGrid, dim: usize) -> Result<Self> {
        let len = (grid.n_steps + 1) * dim;
        Self::from_values(grid, dim, vec![0.0; len])
    }

    /// A smooth (linear) scalar path `W_t = slope (t - t0)`.
    pub fn linear(grid: TimeGrid, slope: f64) -> Result<Self> {
        let values = grid.nodes().iter().map(|t| slope * (t - grid.t0)).collect();
        Self::from_values(grid, 1, values)
    }

    /// Sampled path shifted by a linear drift so that `W_T - W_t0` equals
    /// `terminal` in every component.
    pub fn pinned(grid: TimeGrid, dim: usize, seed: u64, terminal: f64) -> Result<Self> {
        let mut path = sample_backward_path(&grid, dim, seed)?;
        let n = grid.n_steps;
        for k in 0..dim {
            let miss = terminal - path.values[n * dim + k];
            for i in 0..=n {
                let frac = (grid.time(i) - grid.t0) / grid.span();
                path.values[i * dim + k] += frac * miss;
            }
        }
        Ok(path)
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// First component at node `i`.
    pub fn value(&self, i: usize) -> f64 {
        self.values[i * self.dim]
    }

    /// First component of `W_{t_{i+1}} - W_{t_i}`.
    pub fn increment(&self, i: usize) -> f64 {
        self.values[(i + 1) * self.dim] - self.values[i * self.dim]
    }

    /// First component of `W_T - W_{t_i}`.
    pub fn remaining(&self, i: usize) -> f64 {
        self.values[self.grid.n_steps * self.dim] - self.values[i * self.dim]
    }

    /// Keep every `factor`-th node. Coarse and fine grids then see the same
    /// underlying trajectory.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.grid.n_steps % factor != 0 {
            return invalid(format!(
                "cannot coarsen {} steps by {factor}",
                self.grid.n_steps
            ));
        }
        let grid = TimeGrid::new(self.grid.t0, self.grid.horizon, self.grid.n_steps / factor)?;
        let mut values = Vec::with_capacity((grid.n_steps + 1) * self.dim);
        for i in 0..=grid.n_steps {
            values.extend_from_slice(self.at(i * factor));
        }
        Ok(Self {
            grid,
            dim: self.dim,
            values,
            seed: self.seed,
        })
    }

    /// Brownian-bridge midpoint refinement: doubles the step count while
    /// keeping every existing node.
    pub fn refine(&self, seed: u64) -> Result<Self> {
        let grid = self.grid.refined(2)?;
        let mut rng = stream_rng(seed, 0x5eed_0000 + self.grid.n_steps as u64);
        let sd = (self.grid.dt / 4.0).sqrt();
        let mut values = Vec::with_capacity((grid.n_steps + 1) * self.dim);
        for i in 0..self.grid.n_steps {
            values.extend_from_slice(self.at(i));
            for k in 0..self.dim {
                let mid = 0.5 * (self.at(i)[k] + self.at(i + 1)[k]);
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(mid + sd * z);
            }
        }
        values.extend_from_slice(self.at(self.grid.n_steps));
        Ok(Self {
            grid,
            dim: self.dim,
            values,
            seed: self.seed,
        })
    }
}

/// Sample `W` on the grid, `W(t0) = 0`, deterministic in `seed`.
pub fn sample_backward_path(grid: &TimeGrid, dim: usize, seed: u64) -> Result<BackwardPath> {
    if dim == 0 {
        return invalid("backward noise dimension must be >= 1");
    }
    let mut rng = stream_rng(seed, 0);
    let sd = grid.dt.sqrt();
    let mut values = vec![0.0; (grid.n_steps + 1) * dim];
    for i in 0..grid.n_steps {
        for k in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            values[(i + 1) * dim + k] = values[i * dim + k] + sd * z;
        }
    }
    Ok(BackwardPath {
        grid: grid.clone(),
        dim,
        values,
        seed,
    })
}

/// Finite ascending set of scalar volatilities `a` (the `d = 1` control set).
#[derive(Clone, Debug, PartialEq)]
pub struct VolatilityGrid {
    values: Vec<f64>,
}

impl VolatilityGrid {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("volatility grid is empty");
        }
        if let Some(a) = values.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return invalid(format!("volatility {a} is not positive definite"));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self { values })
    }

    pub fn uniform(a_low: f64, a_high: f64, n_points: usize) -> Result<Self> {
        if n_points == 0 || a_high < a_low {
            return invalid(format!(
                "bad volatility interval [{a_low}, {a_high}] with {n_points} points"
            ));
        }
        if n_points == 1 || a_high == a_low {
            return Self::new(vec![a_low]);
        }
        let step = (a_high - a_low) / (n_points - 1) as f64;
        let mut values: Vec<f64> = (0..n_points).map(|k| a_low + k as f64 * step).collect();
        values[n_points - 1] = a_high;
        Self::new(values)
    }

    pub fn singleton(a: f64) -> Result<Self> {
        Self::new(vec![a])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn a_low(&self) -> f64 {
        self.values[0]
    }

    pub fn a_high(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn spacing(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Sub-grid of the volatilities accepted by `keep`.
    pub fn restrict(&self, keep: impl Fn(f64) -> bool) -> Result<Self> {
        Self::new(self.values.iter().copied().filter(|a| keep(*a)).collect())
    }

    /// Grid extended by extra points (used for monotonicity-in-the-grid checks).
    pub fn union(&self, other: &VolatilityGrid) -> Result<Self> {
        let mut v = self.values.clone();
        v.extend_from_slice(&other.values);
        Self::new(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branching {
    Binomial,
    Trinomial,
}

impl Branching {
    pub fn from_count(count: usize) -> Result<Self> {
        match count {
            2 => Ok(Self::Binomial),
            3 => Ok(Self::Trinomial),
            other => invalid(format!("branching must be 2 or 3, got {other}")),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Self::Binomial => 2,
            Self::Trinomial => 3,
        }
    }
}

/// Recombining one-dimensional lattice for `X^a = x0 + a^{1/2} B`.
///
/// Binomial trees step by `±h` with `h = sqrt(a dt)`. Trinomial trees step by
/// `{-h, 0, h}`; their probabilities can be re-matched to any volatility
/// `a' <= h^2 / dt`, which lets a single trinomial tree carry every
/// volatility of a grid.
#[derive(Clone, Debug)]
pub struct BrownianTree {
    pub grid: TimeGrid,
    pub x0: f64,
    pub a: f64,
    pub branching: Branching,
    pub step: f64,
    nodes: Vec<Vec<f64>>,
}

impl BrownianTree {
    fn with_step(grid: &TimeGrid, x0: f64, a: f64, branching: Branching, step: f64) -> Self {
        let nodes = (0..=grid.n_steps)
            .map(|i| match branching {
                Branching::Binomial => (0..=i)
                    .map(|j| x0 + (2.0 * j as f64 - i as f64) * step)
                    .collect(),
                Branching::Trinomial => (0..=2 * i)
                    .map(|j| x0 + (j as f64 - i as f64) * step)
                    .collect(),
            })
            .collect();
        Self {
            grid: grid.clone(),
            x0,
            a,
            branching,
            step,
            nodes,
        }
    }

    /// Trinomial tree whose step `h = sqrt(3 a_max dt)` supports every
    /// volatility up to `a_max`.
    pub fn for_volatilities(grid: &TimeGrid, x0: f64, volgrid: &VolatilityGrid) -> Result<Self> {
        build_tree_at(grid, x0, volgrid.a_high(), 3)
    }

    pub fn nodes(&self, level: usize) -> &[f64] {
        &self.nodes[level]
    }

    pub fn levels(&self) -> usize {
        self.nodes.len()
    }

    /// Displacements of the children of any node.
    pub fn displacements(&self) -> Vec<f64> {
        match self.branching {
            Branching::Binomial => vec![-self.step, self.step],
            Branching::Trinomial => vec![-self.step, 0.0, self.step],
        }
    }

    /// Index (at `level + 1`) of the first child of node `j`.
    pub fn first_child(&self, j: usize) -> usize {
        j
    }

    /// Moment-matched transition probabilities for volatility `a`, ordered
    /// like [`BrownianTree::displacements`].
    pub fn transition(&self, a: f64) -> Result<Vec<f64>> {
        if !(a.is_finite() && a > 0.0) {
            return invalid(format!("volatility {a} is not positive definite"));
        }
        match self.branching {
            Branching::Binomial => {
                if (a - self.a).abs() > 1e-12 * self.a.max(1.0) {
                    return Err(Error::UnsupportedBackend(format!(
                        "binomial tree built for a = {} cannot carry a = {a}",
                        self.a
                    )));
                }
                Ok(vec![0.5, 0.5])
            }
            Branching::Trinomial => {
                let ratio = a * self.grid.dt / (self.step * self.step);
                if ratio > 1.0 + 1e-12 {
                    return Err(Error::UnsupportedBackend(format!(
                        "trinomial step {} too small for a = {a}",
                        self.step
                    )));
                }
                let side = 0.5 * ratio.min(1.0);
                Ok(vec![side, 1.0 - 2.0 * side, side])
            }
        }
    }

    /// Probability of every node at every level under volatility `a`.
    pub fn node_probabilities(&self, a: f64) -> Result<Vec<Vec<f64>>> {
        let p = self.transition(a)?;
        let mut out = vec![vec![1.0]];
        for level in 0..self.grid.n_steps {
            let cur = &out[level];
            let mut next = vec![0.0; self.nodes[level + 1].len()];
            for (j, mass) in cur.iter().enumerate() {
                for (k, pk) in p.iter().enumerate() {
                    next[self.first_child(j) + k] += mass * pk;
                }
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Moment-matched tree started at 0.
pub fn build_tree(grid: &TimeGrid, a: f64, branching: usize) -> Result<BrownianTree> {
    build_tree_at(grid, 0.0, a, branching)
}

pub fn build_tree_at(grid: &TimeGrid, x0: f64, a: f64, branching: usize) -> Result<BrownianTree> {
    if !(a.is_finite() && a > 0.0) {
        return invalid(format!("volatility {a} is not positive definite"));
    }
    let branching = Branching::from_count(branching)?;
    let step = match branching {
        Branching::Binomial => (a * grid.dt).sqrt(),
        Branching::Trinomial => (3.0 * a * grid.dt).sqrt(),
    };
    Ok(BrownianTree::with_step(grid, x0, a, branching, step))
}

/// Matrix-volatility entry point: recombination is only available in `d = 1`.
pub fn build_tree_matrix(grid: &TimeGrid, a: &DMatrix<f64>, branching: usize) -> Result<BrownianTree> {
    if a.nrows() != a.ncols() {
        return invalid("volatility matrix must be square");
    }
    if a.nrows() > 1 {
        return Err(Error::UnsupportedBackend(format!(
            "recombining tree needs d = 1, got d = {}",
            a.nrows()
        )));
    }
    build_tree(grid, a[(0, 0)], branching)
}

/// Monte Carlo ensemble of `X = x0 + ∫ a^{1/2} dB` under a piecewise-constant
/// control. Flat storage: `states[(p * (n + 1) + i) * dim + k]`,
/// `increments[(p * n + i) * dim + k]`.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub seed: u64,
    pub control: Vec<DMatrix<f64>>,
    increments: Vec<f64>,
    states: Vec<f64>,
}

impl PathEnsemble {
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * (self.grid.n_steps + 1) + step) * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.grid.n_steps + step) * self.dim;
        &self.increments[off..off + self.dim]
    }

    /// First state component; the usual accessor in `d = 1`.
    pub fn x(&self, path: usize, step: usize) -> f64 {
        self.state(path, step)[0]
    }

    pub fn dx(&self, path: usize, step: usize) -> f64 {
        self.increment(path, step)[0]
    }

    /// Scalar volatility of step `i` (first diagonal entry).
    pub fn a(&self, step: usize) -> f64 {
        self.control[step][(0, 0)]
    }

    /// Realized `Tr Σ ΔX ΔX^T` along one path.
    pub fn realized_quadratic_variation(&self, path: usize) -> f64 {
        (0..self.grid.n_steps)
            .map(|i| self.increment(path, i).iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// `∫ Tr a dt` for the control.
    pub fn expected_quadratic_variation(&self) -> f64 {
        self.control.iter().map(|a| a.trace() * self.grid.dt).sum()
    }
}

/// Sample paths in parallel; path `p` draws from stream `p` of `seed`, so the
/// output is independent of the worker count.
pub fn sample_forward_ensemble(
    grid: &TimeGrid,
    n_paths: usize,
    x0: &[f64],
    control: &[DMatrix<f64>],
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return invalid("ensemble needs at least one path");
    }
    if control.len() != grid.n_steps {
        return invalid(format!(
            "control has {} steps, grid has {}",
            control.len(),
            grid.n_steps
        ));
    }
    let dim = x0.len();
    if dim == 0 {
        return invalid("state dimension must be >= 1");
    }
    let mut roots = Vec::with_capacity(control.len());
    for (i, a) in control.iter().enumerate() {
        if a.nrows() != dim || a.ncols() != dim {
            return invalid(format!(
                "control at step {i} is {}x{}, expected {dim}x{dim}",
                a.nrows(),
                a.ncols()
            ));
        }
        let chol = a.clone().cholesky().ok_or_else(|| {
            Error::InvalidArgument(format!("control at step {i} is not positive definite"))
        })?;
        roots.push(chol.l());
    }
    let n = grid.n_steps;
    let sd = grid.dt.sqrt();
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(seed, p as u64);
            let mut incs = Vec::with_capacity(n * dim);
            let mut states = Vec::with_capacity((n + 1) * dim);
            states.extend_from_slice(x0);
            let mut normal = vec![0.0; dim];
            for (i, root) in roots.iter().enumerate() {
                for v in normal.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                for r in 0..dim {
                    let mut s = 0.0;
                    for c in 0..=r {
                        s += root[(r, c)] * normal[c];
                    }
                    let inc = sd * s;
                    incs.push(inc);
                    states.push(states[i * dim + r] + inc);
                }
            }
            (incs, states)
        })
        .collect();
    let mut increments = Vec::with_capacity(n_paths * n * dim);
    let mut states = Vec::with_capacity(n_paths * (n + 1) * dim);
    for (inc, st) in per_path {
        increments.extend(inc);
        states.extend(st);
    }
    Ok(PathEnsemble {
        grid: grid.clone(),
        n_paths,
        dim,
        seed,
        control: control.to_vec(),
        increments,
        states,
    })
}

/// Scalar convenience wrapper: one volatility per step.
pub fn sample_scalar_ensemble(
    grid: &TimeGrid,
    n_paths: usize,
    x0: f64,
    a_per_step: &[f64],
    seed: u64,
) -> Result<PathEnsemble> {
    let control: Vec<DMatrix<f64>> = a_per_step
        .iter()
        .map(|a| DMatrix::from_element(1, 1, *a))
        .collect();
    sample_forward_ensemble(grid, n_paths, &[x0], &control, seed)
}

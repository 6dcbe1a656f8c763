//! Second-order BDSDE by dynamic programming over a finite volatility grid.
//!
//! At each node the value is the largest of the one-step BDSDE operators
//! `T_a`, one per volatility `a`. The increasing process `K` of a measure is
//! the defect `Y_i − E_a[Y_{i+1} + g ΔW] − G(Y_i, Z^a_i, a) dt`, which is zero
//! for the maximizing volatility and nonnegative for every other one.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::bdsde::{
    check_path, check_step, one_step, solve_stepper, terminal_z, BdsdeProblem, Convention,
    SolverOptions, StepData, Terminal,
};
use crate::error::{invalid, Error, Result};
use crate::generators::{biconjugate, ConjugatePair, Fn1, Fn2, Point};
use crate::paths::{BackwardPath, BrownianTree, PathEnsemble, TimeGrid, VolatilityGrid};
use crate::quadrature::gauss_hermite;
use crate::stepper::{LatticeQuadrature, SpatialLattice, Stepper};

#[derive(Clone)]
pub struct TbdsdeProblem {
    pub terminal: Terminal,
    /// Driver `G(t, x, y, z, a)` of the equation
    /// `Y = ξ + ∫ G ds + ∫ g d←W − ∫ Z dB + K_T − K_t`.
    pub driver: Fn2,
    pub g: Fn1,
    pub volgrid: VolatilityGrid,
    pub lipschitz: f64,
}

impl fmt::Debug for TbdsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TbdsdeProblem")
            .field("volgrid", &self.volgrid)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl TbdsdeProblem {
    pub fn new(terminal: Terminal, driver: Fn2, g: Fn1, volgrid: VolatilityGrid, lipschitz: f64) -> Self {
        Self {
            terminal,
            driver,
            g,
            volgrid,
            lipschitz,
        }
    }

    /// Driver `F̂` taken from a conjugate pair; volatilities where `F` is
    /// infinite at any probe point are dropped from the grid.
    pub fn from_pair(
        terminal: Terminal,
        pair: &ConjugatePair,
        g: Fn1,
        probes: &[Point],
        lipschitz: f64,
    ) -> Result<Self> {
        let mut keep: Vec<f64> = pair.domain.values().to_vec();
        for p in probes {
            let finite = pair.finite_at(p);
            keep.retain(|a| finite.contains(a));
        }
        if keep.is_empty() {
            return invalid("conjugate is infinite on the whole volatility grid");
        }
        let f = pair.f.clone();
        Ok(Self::new(
            terminal,
            Arc::new(move |p, a| f(p, a)),
            g,
            VolatilityGrid::new(keep)?,
            lipschitz,
        ))
    }

    /// Classical problem at a fixed volatility.
    pub fn at_volatility(&self, a: f64) -> BdsdeProblem {
        let d = self.driver.clone();
        BdsdeProblem::new(
            self.terminal.clone(),
            Arc::new(move |p: &Point| d(p, a)),
            self.g.clone(),
            a,
            self.lipschitz,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DpBackend {
    /// Trinomial tree whose step carries every volatility of the grid.
    Tree,
    /// Uniform lattice, spacing `factor · dt`, half-width
    /// `width · sqrt(a_high T)`.
    Lattice {
        factor: f64,
        width: f64,
        quadrature: LatticeQuadrature,
    },
}

impl DpBackend {
    pub fn lattice() -> Self {
        DpBackend::Lattice {
            factor: 2.0,
            width: 6.0,
            quadrature: LatticeQuadrature::ExactKernel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpOptions {
    pub solver: SolverOptions,
    pub backend: DpBackend,
    pub x0: f64,
}

impl Default for DpOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            backend: DpBackend::lattice(),
            x0: 0.0,
        }
    }
}

/// Owned stepper built for a problem.
pub enum DpStepper {
    Tree(BrownianTree),
    Lattice(SpatialLattice),
}

impl DpStepper {
    pub fn build(grid: &TimeGrid, volgrid: &VolatilityGrid, opts: &DpOptions) -> Result<Self> {
        Ok(match opts.backend {
            DpBackend::Tree => DpStepper::Tree(BrownianTree::for_volatilities(grid, opts.x0, volgrid)?),
            DpBackend::Lattice {
                factor,
                width,
                quadrature,
            } => DpStepper::Lattice(SpatialLattice::new(grid, opts.x0, volgrid, factor, width, quadrature)?),
        })
    }

    pub fn as_stepper(&self) -> &dyn Stepper {
        match self {
            DpStepper::Tree(t) => t,
            DpStepper::Lattice(l) => l,
        }
    }
}

/// `ΔK` of one measure at every node, with forward expectations.
#[derive(Clone, Debug, PartialEq)]
pub struct KTrace {
    /// Per level `i < n`, per node: `ΔK_i ≥ 0` after clamping dust.
    pub dk: Vec<Vec<f64>>,
    /// `E[K_{t_i}]` for `i = 0..=n` under the measure; `K_0 = 0`.
    pub expected: Vec<f64>,
    pub expected_sq_terminal: f64,
    /// Number of negative increments clamped to zero.
    pub clamped: usize,
    pub most_negative: f64,
}

impl KTrace {
    pub fn k_terminal(&self) -> f64 {
        *self.expected.last().unwrap_or(&0.0)
    }

    pub fn max_increment(&self) -> f64 {
        self.dk.iter().flatten().fold(0.0, |a, b| a.max(*b))
    }

    /// `Σ_i max_j ΔK_i`: bounds `K_T` along every path.
    pub fn pathwise_bound(&self) -> f64 {
        self.dk
            .iter()
            .map(|level| level.iter().fold(0.0f64, |a, b| a.max(*b)))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TbdsdeSolution {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// Index into `a_values` of the maximizing volatility per node, `i < n`.
    pub argmax: Vec<Vec<usize>>,
    pub a_values: Vec<f64>,
    /// `K` relative to the maximizing volatility.
    pub k: KTrace,
    /// Per step: max defect of the discrete equation under the argmax.
    pub residual: Vec<f64>,
    pub minimality_gap: Option<Vec<f64>>,
    pub root: usize,
}

impl TbdsdeSolution {
    pub fn y0(&self) -> f64 {
        self.y[0][self.root]
    }

    pub fn argmax_a(&self, level: usize, node: usize) -> f64 {
        self.a_values[self.argmax[level][node]]
    }

    /// Share of nodes with mass above `threshold` (under the argmax control)
    /// whose maximizer is `a`.
    pub fn argmax_share(&self, stepper: &dyn Stepper, a: f64, threshold: f64) -> Result<f64> {
        let masses = stepper.node_masses(&|i, j| self.argmax_a(i, j))?;
        let (mut hit, mut total) = (0usize, 0usize);
        for (i, level) in masses.iter().enumerate().take(self.argmax.len()) {
            for (j, m) in level.iter().enumerate() {
                if *m > threshold {
                    total += 1;
                    if self.argmax_a(i, j) == a {
                        hit += 1;
                    }
                }
            }
        }
        Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
    }
}

fn dust(scale: f64) -> f64 {
    1e-9 * (1.0 + scale)
}

/// Which one-step operator defines `K` increments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GapOperator {
    /// The solver's own conditional expectations.
    Scheme,
    /// Gaussian expectations of the cubic interpolant of the next level
    /// (Gauss–Hermite, 20 nodes), independent of the scheme.
    Exact,
}

fn cubic_at(xs: &[f64], values: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n < 4 {
        let h = xs[1] - xs[0];
        let k = (((x - xs[0]) / h).floor().max(0.0) as usize).min(n - 2);
        let fr = (x - xs[k]) / h;
        return values[k] + fr * (values[k + 1] - values[k]);
    }
    let h = xs[1] - xs[0];
    let pos = (x - xs[0]) / h;
    let k = (pos.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
    let s = pos - k as f64;
    let (v0, v1, v2, v3) = (values[k], values[k + 1], values[k + 2], values[k + 3]);
    -v0 * (s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0 + v1 * s * (s - 2.0) * (s - 3.0) / 2.0
        - v2 * s * (s - 1.0) * (s - 3.0) / 2.0
        + v3 * s * (s - 1.0) * (s - 2.0) / 6.0
}

fn exact_moments(
    stepper: &dyn Stepper,
    level: usize,
    a: f64,
    next: &[f64],
    rule: &(Vec<f64>, Vec<f64>),
) -> (Vec<f64>, Vec<f64>) {
    let sd = (a * stepper.grid().dt).sqrt();
    let xs = stepper.states(level + 1);
    stepper
        .states(level)
        .par_iter()
        .map(|x| {
            let (mut m, mut c) = (0.0, 0.0);
            for (u, w) in rule.0.iter().zip(&rule.1) {
                let v = cubic_at(xs, next, x + sd * u);
                m += w * v;
                c += w * v * sd * u;
            }
            (m, c)
        })
        .unzip()
}

fn continuation(
    problem: &TbdsdeProblem,
    stepper: &dyn Stepper,
    level: usize,
    y_next: &[f64],
    z_next: &[f64],
    dw: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_next = stepper.grid().time(level + 1);
    let gn: Vec<f64> = stepper
        .states(level + 1)
        .iter()
        .zip(y_next)
        .zip(z_next)
        .map(|((x, y), z)| (problem.g)(&Point::new(t_next, *x, *y, *z)))
        .collect();
    let cont = y_next.iter().zip(&gn).map(|(y, g)| y + g * dw).collect();
    (cont, gn)
}

/// `ΔK^a` at every node of `level` given the solved `Y` and `Z` at
/// `level + 1`, for the operator `op`.
#[allow(clippy::too_many_arguments)]
fn k_increments(
    problem: &TbdsdeProblem,
    stepper: &dyn Stepper,
    sol: &TbdsdeSolution,
    w: &BackwardPath,
    level: usize,
    a: f64,
    op: GapOperator,
    opts: &SolverOptions,
    rule: &(Vec<f64>, Vec<f64>),
) -> Result<Vec<f64>> {
    let grid = stepper.grid();
    let dt = grid.dt;
    let t = grid.time(level);
    let dw = w.increment(level);
    let (cont, gn) = continuation(problem, stepper, level, &sol.y[level + 1], &sol.z[level + 1], dw);
    let (mean, cross, ey, eg) = match op {
        GapOperator::Scheme => {
            let (m, c) = stepper.moments(level, a, &cont)?;
            let (ey, eg) = if opts.convention == Convention::Stratonovich {
                (
                    stepper.expect(level, a, &sol.y[level + 1])?,
                    stepper.expect(level, a, &gn)?,
                )
            } else {
                (Vec::new(), Vec::new())
            };
            (m, c, ey, eg)
        }
        GapOperator::Exact => {
            let (m, c) = exact_moments(stepper, level, a, &cont, rule);
            let (ey, eg) = if opts.convention == Convention::Stratonovich {
                (
                    exact_moments(stepper, level, a, &sol.y[level + 1], rule).0,
                    exact_moments(stepper, level, a, &gn, rule).0,
                )
            } else {
                (Vec::new(), Vec::new())
            };
            (m, c, ey, eg)
        }
    };
    Ok(stepper
        .states(level)
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let yv = sol.y[level][j];
            let q = Point::new(t, *x, yv, cross[j] / (a * dt));
            let drift = (problem.driver)(&q, a) * dt;
            match opts.convention {
                Convention::Ito => yv - mean[j] - drift,
                Convention::Stratonovich => yv - ey[j] - 0.5 * ((problem.g)(&q) + eg[j]) * dw - drift,
            }
        })
        .collect())
}

fn expected_k(stepper: &dyn Stepper, dk: &[Vec<f64>], control: &dyn Fn(usize, usize) -> f64) -> Result<(Vec<f64>, f64)> {
    let n = dk.len();
    let masses = stepper.node_masses(control)?;
    let mut expected = vec![0.0; n + 1];
    for i in 0..n {
        let inc: f64 = masses[i].iter().zip(&dk[i]).map(|(m, d)| m * d).sum();
        expected[i + 1] = expected[i] + inc;
    }
    // E[K_T^2] by the backward Markov recursion on remaining K
    let mut m1 = vec![0.0; stepper.states(n).len()];
    let mut m2 = m1.clone();
    for i in (0..n).rev() {
        let count = stepper.states(i).len();
        let mut e1 = vec![0.0; count];
        let mut e2 = vec![0.0; count];
        let mut values: Vec<f64> = (0..count).map(|j| control(i, j)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for a in values {
            let c1 = stepper.expect(i, a, &m1)?;
            let c2 = stepper.expect(i, a, &m2)?;
            for j in 0..count {
                if control(i, j) == a {
                    e1[j] = c1[j];
                    e2[j] = c2[j];
                }
            }
        }
        m2 = (0..count)
            .map(|j| dk[i][j] * dk[i][j] + 2.0 * dk[i][j] * e1[j] + e2[j])
            .collect();
        m1 = (0..count).map(|j| dk[i][j] + e1[j]).collect();
    }
    Ok((expected, m2[stepper.root()]))
}

/// Which measure to extract `K` under.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KMeasure {
    Argmax,
    Constant(f64),
}

/// `K` increments under `measure` using the scheme's operator. Negative dust
/// above `-10 ε` is clamped; anything below is a consistency error.
pub fn extract_k(
    problem: &TbdsdeProblem,
    solution: &TbdsdeSolution,
    stepper: &dyn Stepper,
    w: &BackwardPath,
    measure: KMeasure,
    opts: &SolverOptions,
) -> Result<KTrace> {
    let n = stepper.grid().n_steps;
    let scale = solution.y.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    let eps = dust(scale);
    let rule = (Vec::new(), Vec::new());
    let mut dk = Vec::with_capacity(n);
    let mut clamped = 0;
    let mut most_negative = 0.0f64;
    for i in 0..n {
        let raw = match measure {
            KMeasure::Constant(a) => {
                k_increments(problem, stepper, solution, w, i, a, GapOperator::Scheme, opts, &rule)?
            }
            KMeasure::Argmax => {
                let mut out = vec![0.0; stepper.states(i).len()];
                for (idx, &a) in solution.a_values.iter().enumerate() {
                    if !solution.argmax[i].contains(&idx) {
                        continue;
                    }
                    let v = k_increments(problem, stepper, solution, w, i, a, GapOperator::Scheme, opts, &rule)?;
                    for (j, o) in out.iter_mut().enumerate() {
                        if solution.argmax[i][j] == idx {
                            *o = v[j];
                        }
                    }
                }
                out
            }
        };
        let mut level = Vec::with_capacity(raw.len());
        for d in raw {
            most_negative = most_negative.min(d);
            if d < -10.0 * eps {
                return Err(Error::Consistency(format!(
                    "K decreases by {d:e} at step {i}"
                )));
            }
            if d < 0.0 {
                clamped += 1;
                level.push(0.0);
            } else {
                level.push(d);
            }
        }
        dk.push(level);
    }
    let control = |i: usize, j: usize| match measure {
        KMeasure::Constant(a) => a,
        KMeasure::Argmax => solution.argmax_a(i, j),
    };
    let (expected, sq) = expected_k(stepper, &dk, &control)?;
    Ok(KTrace {
        dk,
        expected,
        expected_sq_terminal: sq,
        clamped,
        most_negative,
    })
}

/// DP on a caller-supplied stepper.
pub fn solve_dp_on(
    problem: &TbdsdeProblem,
    stepper: &dyn Stepper,
    w: &BackwardPath,
    opts: &SolverOptions,
) -> Result<TbdsdeSolution> {
    let grid = stepper.grid().clone();
    check_path(&grid, w)?;
    check_step(grid.dt, problem.lipschitz)?;
    let a_values = problem.volgrid.values().to_vec();
    for &a in &a_values {
        if !stepper.supports(a) {
            return Err(Error::Resolution(format!("stepper cannot carry volatility {a}")));
        }
    }
    let n = grid.n_steps;
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n + 1];
    let mut argmax = vec![Vec::new(); n];
    let mut residual = vec![0.0; n];
    y[n] = stepper.states(n).iter().map(|x| (problem.terminal)(*x)).collect();
    z[n] = terminal_z(stepper, problem.volgrid.a_high(), &problem.terminal)?;
    for i in (0..n).rev() {
        let data = StepData {
            level: i,
            t: grid.time(i),
            t_next: grid.time(i + 1),
            dw: w.increment(i),
            dv: 0.0,
            x: stepper.states(i),
            x_next: stepper.states(i + 1),
            y_next: &y[i + 1],
            z_next: &z[i + 1],
        };
        let outs: Vec<Result<_>> = a_values
            .par_iter()
            .map(|&a| {
                let d = problem.driver.clone();
                let f = move |p: &Point| d(p, a);
                one_step(stepper, &data, a, &f, &*problem.g, opts)
            })
            .collect();
        let mut outs_ok = Vec::with_capacity(outs.len());
        for o in outs {
            outs_ok.push(o?);
        }
        let count = data.x.len();
        let mut yi = vec![0.0; count];
        let mut zi = vec![0.0; count];
        let mut ai = vec![0usize; count];
        for j in 0..count {
            let best = outs_ok.iter().fold(f64::NEG_INFINITY, |m, o| m.max(o.y[j]));
            let tie = best - 1e-12 * (1.0 + best.abs());
            let k = outs_ok.iter().position(|o| o.y[j] >= tie).unwrap_or(0);
            yi[j] = outs_ok[k].y[j];
            zi[j] = outs_ok[k].z[j];
            ai[j] = k;
        }
        residual[i] = outs_ok.iter().fold(0.0f64, |m, o| m.max(o.residual));
        y[i] = yi;
        z[i] = zi;
        argmax[i] = ai;
    }
    let mut sol = TbdsdeSolution {
        y,
        z,
        argmax,
        a_values,
        k: KTrace {
            dk: Vec::new(),
            expected: vec![0.0; n + 1],
            expected_sq_terminal: 0.0,
            clamped: 0,
            most_negative: 0.0,
        },
        residual,
        minimality_gap: None,
        root: stepper.root(),
    };
    sol.k = extract_k(problem, &sol, stepper, w, KMeasure::Argmax, opts)?;
    Ok(sol)
}

/// Build the backend from `opts` and solve.
pub fn solve_dp(
    problem: &TbdsdeProblem,
    grid: &TimeGrid,
    w: &BackwardPath,
    opts: &DpOptions,
) -> Result<(TbdsdeSolution, DpStepper)> {
    let stepper = DpStepper::build(grid, &problem.volgrid, opts)?;
    let sol = solve_dp_on(problem, stepper.as_stepper(), w, &opts.solver)?;
    Ok((sol, stepper))
}

/// Minimality diagnostic for the constant-volatility measures.
#[derive(Clone, Debug, PartialEq)]
pub struct MinimalityGap {
    /// `min_a E^a[K_T − K_{t_i}]` for `i = 0..n`.
    pub gap: Vec<f64>,
    /// Minimizing volatility per step.
    pub argmin: Vec<f64>,
    /// `E^a[K_T − K_{t_i}]` for every `a` of the grid.
    pub per_volatility: Vec<(f64, Vec<f64>)>,
}

pub fn minimality_gap(
    problem: &TbdsdeProblem,
    solution: &TbdsdeSolution,
    stepper: &dyn Stepper,
    w: &BackwardPath,
    operator: GapOperator,
    opts: &SolverOptions,
) -> Result<MinimalityGap> {
    let n = stepper.grid().n_steps;
    let rule = gauss_hermite(20)?;
    let mut per = Vec::new();
    let p0 = Point::new(stepper.grid().t0, stepper.states(0)[stepper.root()], 0.0, 0.0);
    for &a in &solution.a_values {
        if !(problem.driver)(&p0, a).is_finite() {
            continue;
        }
        let mut dk = Vec::with_capacity(n);
        for i in 0..n {
            dk.push(k_increments(problem, stepper, solution, w, i, a, operator, opts, &rule)?);
        }
        let (expected, _) = expected_k(stepper, &dk, &|_, _| a)?;
        let total = expected[n];
        per.push((a, expected.iter().map(|e| total - e).collect::<Vec<f64>>()));
    }
    if per.is_empty() {
        return invalid("no volatility with a finite driver");
    }
    let mut gap = vec![f64::INFINITY; n + 1];
    let mut argmin = vec![0.0; n + 1];
    for (a, rem) in &per {
        for i in 0..=n {
            if rem[i] < gap[i] {
                gap[i] = rem[i];
                argmin[i] = *a;
            }
        }
    }
    Ok(MinimalityGap {
        gap,
        argmin,
        per_volatility: per,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationReport {
    pub y0: f64,
    /// `(a, y_0^a)` for every constant volatility.
    pub constant_values: Vec<(f64, f64)>,
    pub best_constant: f64,
    /// `Y_0 − max_a y_0^a`.
    pub surplus: f64,
}

/// Compare the DP value with the best constant-volatility BDSDE value.
pub fn representation_check(
    problem: &TbdsdeProblem,
    stepper: &dyn Stepper,
    w: &BackwardPath,
    opts: &SolverOptions,
) -> Result<RepresentationReport> {
    let sol = solve_dp_on(problem, stepper, w, opts)?;
    let y0 = sol.y0();
    let mut constant_values = Vec::new();
    for &a in problem.volgrid.values() {
        let s = solve_stepper(&problem.at_volatility(a), stepper, w, opts)?;
        constant_values.push((a, s.y0()));
    }
    let best = constant_values
        .iter()
        .fold(f64::NEG_INFINITY, |m, (_, v)| m.max(*v));
    let eps = dust(y0.abs());
    if y0 < best - 10.0 * eps {
        return Err(Error::Consistency(format!(
            "DP value {y0} below constant-control value {best}"
        )));
    }
    Ok(RepresentationReport {
        y0,
        constant_values,
        best_constant: best,
        surplus: y0 - best,
    })
}

/// Classical solution `u` with the derivatives needed along paths.
#[derive(Clone)]
pub struct ClassicalSolution {
    pub u: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub ux: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub uxx: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeynmanKacReport {
    pub k_min: f64,
    pub k_max: f64,
    pub k_mean: f64,
    /// Mean over paths of the summed one-step defects.
    pub mean_residual: f64,
    /// Mean over paths of the absolute summed defect.
    pub mean_abs_residual: f64,
    pub samples: usize,
}

/// Along the ensemble, set `Y = u(t, X)`, `Z = u_x`, `Γ = u_xx` and check
/// `k = ĥ(Γ) − ½ a Γ + F(a) ≥ 0` and the defect of
/// `Y_i − Y_{i+1} = −F(a) dt + g ΔW − Z ΔX + k dt`.
pub fn feynman_kac_residual(
    u: &ClassicalSolution,
    pair: &ConjugatePair,
    g: &Fn1,
    ensemble: &PathEnsemble,
    w: &BackwardPath,
) -> Result<FeynmanKacReport> {
    if ensemble.dim != 1 {
        return Err(Error::UnsupportedBackend("scalar forward state required".into()));
    }
    let grid = &ensemble.grid;
    check_path(grid, w)?;
    let n = grid.n_steps;
    let dt = grid.dt;
    let per_path: Vec<Result<(f64, f64, f64, f64)>> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|p| {
            let (mut kmin, mut kmax, mut ksum, mut total) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0.0);
            for i in 0..n {
                let a = ensemble.a(i);
                let (t, tn) = (grid.time(i), grid.time(i + 1));
                let (x, xn) = (ensemble.x(p, i), ensemble.x(p, i + 1));
                let y = (u.u)(t, x);
                let z = (u.ux)(t, x);
                let gam = (u.uxx)(t, x);
                let pt = Point::new(t, x, y, z);
                let fa = pair.eval(&pt, a);
                let k = biconjugate(pair, &pt, gam)? - 0.5 * a * gam + fa;
                let yn = (u.u)(tn, xn);
                let zn = (u.ux)(tn, xn);
                let gn = g(&Point::new(tn, xn, yn, zn));
                let defect = (y - yn) - (-fa * dt + gn * w.increment(i) - z * (xn - x) + k * dt);
                kmin = kmin.min(k);
                kmax = kmax.max(k);
                ksum += k;
                total += defect;
            }
            Ok((kmin, kmax, ksum, total))
        })
        .collect();
    let mut rep = FeynmanKacReport {
        k_min: f64::INFINITY,
        k_max: f64::NEG_INFINITY,
        k_mean: 0.0,
        mean_residual: 0.0,
        mean_abs_residual: 0.0,
        samples: ensemble.n_paths * n,
    };
    for r in per_path {
        let (kmin, kmax, ksum, total) = r?;
        rep.k_min = rep.k_min.min(kmin);
        rep.k_max = rep.k_max.max(kmax);
        rep.k_mean += ksum;
        rep.mean_residual += total;
        rep.mean_abs_residual += total.abs();
    }
    let np = ensemble.n_paths as f64;
    rep.k_mean /= np * n as f64;
    rep.mean_residual /= np;
    rep.mean_abs_residual /= np;
    let eps = 1e-9;
    if rep.k_min < -10.0 * eps {
        return Err(Error::Verification(format!(
            "k reaches {} < 0: u is not a supersolution on this domain",
            rep.k_min
        )));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bdsde::solve_tree;
    use crate::paths::{build_time_grid, build_tree, sample_backward_path};

    fn bsb(xi: Terminal, lo: f64, hi: f64, n: usize) -> TbdsdeProblem {
        TbdsdeProblem::new(
            xi,
            Arc::new(|_, _| 0.0),
            Arc::new(|_| 0.0),
            VolatilityGrid::uniform(lo, hi, n).unwrap(),
            0.0,
        )
    }

    #[test]
    fn singleton_grid_reduces_to_bdsde() {
        let g = build_time_grid(0.0, 1.0, 16).unwrap();
        let w = sample_backward_path(&g, 1, 5).unwrap();
        let problem = TbdsdeProblem::new(
            Arc::new(|x: f64| x.cos()),
            Arc::new(|p: &Point, _| 0.3 * p.y - 0.2 * p.z),
            Arc::new(|p: &Point| 0.2 * p.y),
            VolatilityGrid::singleton(1.0).unwrap(),
            0.3,
        );
        let opts = DpOptions {
            backend: DpBackend::Tree,
            ..DpOptions::default()
        };
        let (dp, st) = solve_dp(&problem, &g, &w, &opts).unwrap();
        let tree = build_tree(&g, 1.0, 3).unwrap();
        let classical = solve_tree(&problem.at_volatility(1.0), &tree, &w, &opts.solver).unwrap();
        assert_eq!(dp.y, classical.y);
        assert!(dp.k.k_terminal().abs() < 1e-9);
        assert!(dp.k.pathwise_bound() < 1e-9);
        let _ = st;
    }

    #[test]
    fn bsb_quadratic_on_lattice() {
        let g = build_time_grid(0.0, 1.0, 32).unwrap();
        let w = BackwardPath::zero(g.clone(), 1).unwrap();
        let opts = DpOptions {
            x0: 1.0,
            ..DpOptions::default()
        };
        let (sol, st) = solve_dp(&bsb(Arc::new(|x| x * x), 0.5, 2.0, 4), &g, &w, &opts).unwrap();
        let err = sol.y0() - 3.0;
        assert!(err > 0.0 && err < 4.0 * g.dt, "{err}");
        assert_eq!(sol.argmax_share(st.as_stepper(), 2.0, 1e-12).unwrap(), 1.0);
        let (neg, _) = solve_dp(&bsb(Arc::new(|x| -x * x), 0.5, 2.0, 4), &g, &w, &opts).unwrap();
        assert!((neg.y0() + 1.5 + 4.0 * g.dt / 6.0).abs() < 1e-9);
        assert!(neg.argmax.iter().flatten().all(|k| *k == 0));
    }

    #[test]
    fn k_under_suboptimal_measure() {
        let g = build_time_grid(0.0, 1.0, 16).unwrap();
        let w = BackwardPath::zero(g.clone(), 1).unwrap();
        let problem = bsb(Arc::new(|x| x * x), 0.5, 2.0, 2);
        let opts = DpOptions {
            backend: DpBackend::Tree,
            x0: 1.0,
            ..DpOptions::default()
        };
        let (sol, st) = solve_dp(&problem, &g, &w, &opts).unwrap();
        let k = extract_k(&problem, &sol, st.as_stepper(), &w, KMeasure::Constant(0.5), &opts.solver).unwrap();
        assert!((k.k_terminal() - 1.5).abs() < 1e-9);
        let lin = bsb(Arc::new(|x| x), 0.5, 2.0, 4);
        let (sol, st) = solve_dp(&lin, &g, &w, &opts).unwrap();
        for a in [0.5, 1.0, 2.0] {
            let k = extract_k(&lin, &sol, st.as_stepper(), &w, KMeasure::Constant(a), &opts.solver).unwrap();
            assert!(k.k_terminal().abs() < 1e-9);
        }
    }

    #[test]
    fn infinite_conjugate_is_excluded() {
        let pair = ConjugatePair::new(
            Arc::new(|_, a| if a > 1.5 { f64::INFINITY } else { 0.0 }),
            VolatilityGrid::new(vec![1.0, 2.0]).unwrap(),
        );
        let p = TbdsdeProblem::from_pair(
            Arc::new(|x| x * x),
            &pair,
            Arc::new(|_| 0.0),
            &[Point::new(0.0, 0.0, 0.0, 0.0)],
            0.0,
        )
        .unwrap();
        assert_eq!(p.volgrid.values(), &[1.0]);
    }

    #[test]
    fn feynman_kac_examples() {
        use crate::paths::sample_scalar_ensemble;
        let g = build_time_grid(0.0, 1.0, 20).unwrap();
        let w = BackwardPath::zero(g.clone(), 1).unwrap();
        let pair = ConjugatePair::zero(VolatilityGrid::uniform(0.5, 2.0, 4).unwrap());
        let u = ClassicalSolution {
            u: Arc::new(|t, x| x * x + 2.0 * (1.0 - t)),
            ux: Arc::new(|_, x| 2.0 * x),
            uxx: Arc::new(|_, _| 2.0),
        };
        let zero: Fn1 = Arc::new(|_| 0.0);
        let hi = sample_scalar_ensemble(&g, 200, 1.0, &[2.0; 20], 3).unwrap();
        let r = feynman_kac_residual(&u, &pair, &zero, &hi, &w).unwrap();
        assert!(r.k_min.abs() < 1e-12 && r.k_max.abs() < 1e-12);
        let lo = sample_scalar_ensemble(&g, 200, 1.0, &[0.5; 20], 3).unwrap();
        let r = feynman_kac_residual(&u, &pair, &zero, &lo, &w).unwrap();
        assert!((r.k_min - 1.5).abs() < 1e-12 && (r.k_max - 1.5).abs() < 1e-12);
        let lin = ClassicalSolution {
            u: Arc::new(|_, x| 3.0 * x),
            ux: Arc::new(|_, _| 3.0),
            uxx: Arc::new(|_, _| 0.0),
        };
        let r = feynman_kac_residual(&lin, &pair, &zero, &lo, &w).unwrap();
        assert_eq!(r.k_max, 0.0);
        assert!(r.mean_abs_residual < 1e-12);
        let outside = sample_scalar_ensemble(&g, 10, 1.0, &[3.0; 20], 3).unwrap();
        assert!(matches!(
            feynman_kac_residual(&u, &pair, &zero, &outside, &w),
            Err(Error::Verification(_))
        ));
    }
}

//! Classical BDSDE
//! `y_t = ξ + ∫ f ds + ∫ g d←W − ∫ z dB (+ V_T − V_t)`
//! conditional on one frozen `W` path.
//!
//! Backward-Itô convention: `g` is taken at the right end of each step and
//! multiplies `ΔW_i = W_{t_{i+1}} − W_{t_i}`. The Stratonovich variant uses
//! the trapezoid `½(g_i + E_i g_{i+1}) ΔW_i`, implicit in `y_i`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::generators::{Fn1, Point};
use crate::paths::{BackwardPath, BrownianTree, PathEnsemble, TimeGrid};
use crate::stepper::Stepper;

pub type Terminal = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type PathTerminal = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct BdsdeProblem {
    pub terminal: Terminal,
    /// Whole-path terminal condition, honoured by the regression backend.
    pub path_terminal: Option<PathTerminal>,
    pub f: Fn1,
    pub g: Fn1,
    /// `V` at every grid node.
    pub forcing: Option<Vec<f64>>,
    pub a: f64,
    /// Lipschitz constant of `f` in `y`, used for the step-size guard.
    pub lipschitz: f64,
}

impl fmt::Debug for BdsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BdsdeProblem")
            .field("a", &self.a)
            .field("lipschitz", &self.lipschitz)
            .field("forcing", &self.forcing.is_some())
            .finish()
    }
}

impl BdsdeProblem {
    pub fn new(terminal: Terminal, f: Fn1, g: Fn1, a: f64, lipschitz: f64) -> Self {
        Self {
            terminal,
            path_terminal: None,
            f,
            g,
            forcing: None,
            a,
            lipschitz,
        }
    }

    pub fn with_forcing(mut self, v: Vec<f64>) -> Self {
        self.forcing = Some(v);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    Ito,
    Stratonovich,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub convention: Convention,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 50,
            convention: Convention::Ito,
        }
    }
}

impl SolverOptions {
    pub fn stratonovich() -> Self {
        Self {
            convention: Convention::Stratonovich,
            ..Self::default()
        }
    }
}

/// `y[i][j]`, `z[i][j]` at level `i`, node (tree) or path (Monte Carlo) `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct BdsdeSolution {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// Per step: max defect of the discrete equation (tree) or the
    /// orthogonality defect of the projection (Monte Carlo).
    pub residual: Vec<f64>,
    pub picard_iters: Vec<usize>,
    pub root: usize,
    /// Standard error of `y_0` (Monte Carlo only).
    pub std_error: Option<f64>,
}

impl BdsdeSolution {
    pub fn y0(&self) -> f64 {
        self.y[0][self.root]
    }

    pub fn z0(&self) -> f64 {
        self.z[0][self.root]
    }
}

/// Scalar fixed point `y = rhs(y)`. Falls back to bracketing bisection on
/// `y − rhs(y)` when plain iteration stalls.
pub(crate) fn fixed_point(
    rhs: &dyn Fn(f64) -> f64,
    start: f64,
    opts: &SolverOptions,
    step: usize,
) -> Result<(f64, usize)> {
    let mut y = start;
    let mut change = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        let next = rhs(y);
        change = (next - y).abs();
        y = next;
        if change <= opts.tolerance * (1.0 + y.abs()) {
            return Ok((y, it));
        }
        if !y.is_finite() {
            break;
        }
    }
    let phi = |v: f64| v - rhs(v);
    let mut width = 1.0 + start.abs();
    let (mut lo, mut hi) = (start - width, start + width);
    let mut tries = 0;
    while phi(lo) * phi(hi) > 0.0 {
        width *= 4.0;
        lo = start - width;
        hi = start + width;
        tries += 1;
        if tries > 40 {
            return Err(Error::Convergence {
                step,
                iterations: opts.max_iterations,
                last_change: change,
            });
        }
    }
    let mut iters = opts.max_iterations;
    let flo = phi(lo);
    if !(flo.is_finite() && phi(hi).is_finite()) {
        return Err(Error::Convergence {
            step,
            iterations: iters,
            last_change: change,
        });
    }
    for _ in 0..400 {
        iters += 1;
        let mid = 0.5 * (lo + hi);
        let fm = phi(mid);
        if fm == 0.0 || (hi - lo) <= opts.tolerance * (1.0 + mid.abs()) {
            return Ok((mid, iters));
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Convergence {
        step,
        iterations: iters,
        last_change: hi - lo,
    })
}

pub(crate) fn check_step(dt: f64, lipschitz: f64) -> Result<()> {
    if dt * lipschitz >= 1.0 {
        return Err(Error::StepSize {
            reason: format!("dt * C = {} >= 1, fixed point is not a contraction", dt * lipschitz),
            suggested_dt: 0.5 / lipschitz,
        });
    }
    Ok(())
}

/// Inputs for one backward step at `level`.
pub(crate) struct StepData<'a> {
    pub level: usize,
    pub t: f64,
    pub t_next: f64,
    pub dw: f64,
    pub dv: f64,
    pub x: &'a [f64],
    pub x_next: &'a [f64],
    pub y_next: &'a [f64],
    pub z_next: &'a [f64],
}

pub(crate) struct StepOut {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// One step of the scheme under volatility `a` with driver `f`.
pub(crate) fn one_step(
    stepper: &dyn Stepper,
    data: &StepData,
    a: f64,
    f: &(dyn Fn(&Point) -> f64 + Sync),
    g: &(dyn Fn(&Point) -> f64 + Sync),
    opts: &SolverOptions,
) -> Result<StepOut> {
    let dt = data.t_next - data.t;
    let g_next: Vec<f64> = data
        .x_next
        .iter()
        .zip(data.y_next)
        .zip(data.z_next)
        .map(|((x, y), z)| g(&Point::new(data.t_next, *x, *y, *z)))
        .collect();
    let cont: Vec<f64> = data
        .y_next
        .iter()
        .zip(&g_next)
        .map(|(y, g)| y + g * data.dw)
        .collect();
    let (mean, cross) = stepper.moments(data.level, a, &cont)?;
    let (ey, eg) = match opts.convention {
        Convention::Ito => (mean.clone(), None),
        Convention::Stratonovich => (
            stepper.expect(data.level, a, data.y_next)?,
            Some(stepper.expect(data.level, a, &g_next)?),
        ),
    };
    let solved: Vec<Result<(f64, f64, usize, f64)>> = (0..data.x.len())
        .into_par_iter()
        .map(|j| {
            let z = cross[j] / (a * dt);
            let p = Point::new(data.t, data.x[j], 0.0, z);
            let rhs = |y: f64| {
                let q = p.with_y(y);
                match &eg {
                    None => mean[j] + f(&q) * dt + data.dv,
                    Some(eg) => ey[j] + 0.5 * (g(&q) + eg[j]) * data.dw + f(&q) * dt + data.dv,
                }
            };
            let (y, it) = fixed_point(&rhs, mean[j], opts, data.level)?;
            Ok((y, z, it, (y - rhs(y)).abs()))
        })
        .collect();
    let mut out = StepOut {
        y: Vec::with_capacity(data.x.len()),
        z: Vec::with_capacity(data.x.len()),
        iterations: 0,
        residual: 0.0,
    };
    for r in solved {
        let (y, z, it, res) = r?;
        out.y.push(y);
        out.z.push(z);
        out.iterations = out.iterations.max(it);
        out.residual = out.residual.max(res);
    }
    Ok(out)
}

/// Terminal `z` by a virtual projection step past the horizon.
pub(crate) fn terminal_z(stepper: &dyn Stepper, a: f64, terminal: &Terminal) -> Result<Vec<f64>> {
    let dt = stepper.grid().dt;
    let phi = |x: f64| terminal(x);
    let (_, cross) = stepper.virtual_moments(a, &phi)?;
    Ok(cross.iter().map(|c| c / (a * dt)).collect())
}

pub(crate) fn check_path(grid: &TimeGrid, w: &BackwardPath) -> Result<()> {
    if w.grid.n_steps != grid.n_steps
        || (w.grid.t0 - grid.t0).abs() > 1e-14
        || (w.grid.horizon - grid.horizon).abs() > 1e-14
    {
        return invalid("backward path and solver grid differ");
    }
    Ok(())
}

/// Backward induction on any [`Stepper`] with the problem's volatility.
pub fn solve_stepper(
    problem: &BdsdeProblem,
    stepper: &dyn Stepper,
    w: &BackwardPath,
    opts: &SolverOptions,
) -> Result<BdsdeSolution> {
    if problem.forcing.is_some() {
        return solve_with_forcing_stepper(problem, stepper, w, opts);
    }
    let grid = stepper.grid().clone();
    check_path(&grid, w)?;
    check_step(grid.dt, problem.lipschitz)?;
    if !stepper.supports(problem.a) {
        return Err(Error::UnsupportedBackend(format!(
            "stepper cannot carry volatility {}",
            problem.a
        )));
    }
    let n = grid.n_steps;
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n + 1];
    y[n] = stepper.states(n).iter().map(|x| (problem.terminal)(*x)).collect();
    z[n] = terminal_z(stepper, problem.a, &problem.terminal)?;
    let mut residual = vec![0.0; n];
    let mut iters = vec![0; n];
    let f = problem.f.clone();
    let g = problem.g.clone();
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
        let out = one_step(stepper, &data, problem.a, &*f, &*g, opts)?;
        y[i] = out.y;
        z[i] = out.z;
        residual[i] = out.residual;
        iters[i] = out.iterations;
    }
    Ok(BdsdeSolution {
        y,
        z,
        residual,
        picard_iters: iters,
        root: stepper.root(),
        std_error: None,
    })
}

/// Exact tree conditional expectations.
pub fn solve_tree(
    problem: &BdsdeProblem,
    tree: &BrownianTree,
    w: &BackwardPath,
    opts: &SolverOptions,
) -> Result<BdsdeSolution> {
    solve_stepper(problem, tree, w, opts)
}

fn forcing_values(problem: &BdsdeProblem, n: usize) -> Result<Vec<f64>> {
    let v = problem.forcing.clone().unwrap_or_else(|| vec![0.0; n + 1]);
    if v.len() != n + 1 {
        return invalid(format!("forcing has {} values, grid has {} nodes", v.len(), n + 1));
    }
    Ok(v)
}

/// Problem for `ȳ = y + V` with `V` frozen at the nodes: terminal
/// `ξ + V_T`, generators evaluated at `ȳ − V_t`.
fn shifted_problem(problem: &BdsdeProblem, grid: &TimeGrid, v: &[f64]) -> BdsdeProblem {
    let v_at = {
        let v = v.to_vec();
        let grid = grid.clone();
        Arc::new(move |t: f64| {
            let k = ((t - grid.t0) / grid.dt).round().clamp(0.0, grid.n_steps as f64) as usize;
            v[k]
        })
    };
    let vt = v[v.len() - 1];
    let xi = problem.terminal.clone();
    let f = problem.f.clone();
    let g = problem.g.clone();
    let (vf, vg) = (v_at.clone(), v_at);
    BdsdeProblem {
        terminal: Arc::new(move |x| xi(x) + vt),
        path_terminal: problem.path_terminal.clone().map(|pt| {
            let pt: PathTerminal = Arc::new(move |p: &[f64]| pt(p) + vt);
            pt
        }),
        f: Arc::new(move |p: &Point| f(&p.with_y(p.y - vf(p.t)))),
        g: Arc::new(move |p: &Point| g(&p.with_y(p.y - vg(p.t)))),
        forcing: None,
        a: problem.a,
        lipschitz: problem.lipschitz,
    }
}

fn unshift(mut sol: BdsdeSolution, v: &[f64]) -> BdsdeSolution {
    for (level, ys) in sol.y.iter_mut().enumerate() {
        for y in ys.iter_mut() {
            *y -= v[level];
        }
    }
    sol
}

fn solve_with_forcing_stepper(
    problem: &BdsdeProblem,
    stepper: &dyn Stepper,
    w: &BackwardPath,
    opts: &SolverOptions,
) -> Result<BdsdeSolution> {
    let grid = stepper.grid().clone();
    let v = forcing_values(problem, grid.n_steps)?;
    if v.iter().all(|x| *x == 0.0) {
        let mut plain = problem.clone();
        plain.forcing = None;
        return solve_stepper(&plain, stepper, w, opts);
    }
    let shifted = shifted_problem(problem, &grid, &v);
    Ok(unshift(solve_stepper(&shifted, stepper, w, opts)?, &v))
}

/// Backend selector for [`solve_with_forcing`].
pub enum Backend<'a> {
    Stepper(&'a dyn Stepper),
    Regression {
        ensemble: &'a PathEnsemble,
        basis: &'a Basis,
    },
}

/// Solve with the forcing `V` through the substitution `ȳ = y + V`.
pub fn solve_with_forcing(
    problem: &BdsdeProblem,
    backend: Backend,
    w: &BackwardPath,
    opts: &SolverOptions,
) -> Result<BdsdeSolution> {
    match backend {
        Backend::Stepper(s) => solve_with_forcing_stepper(problem, s, w, opts),
        Backend::Regression { ensemble, basis } => {
            let v = forcing_values(problem, ensemble.grid.n_steps)?;
            let shifted = shifted_problem(problem, &ensemble.grid, &v);
            Ok(unshift(solve_regression(&shifted, ensemble, w, basis, opts)?, &v))
        }
    }
}

/// Polynomial basis in the standardized state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Basis {
    pub degree: usize,
    pub ridge: f64,
    pub max_condition: f64,
}

impl Basis {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            degree,
            ridge: 1e-10,
            max_condition: 1e12,
        }
    }
}

const CHUNK: usize = 2048;

/// Least-squares projection of `targets` on the basis of `x`: returns the
/// fitted values for each target column, in path order.
fn project(
    x: &[f64],
    targets: &[&[f64]],
    basis: &Basis,
    step: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = x.len();
    let k = basis.degree + 1;
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    let features = |v: f64| {
        let u = (v - mean) / sd;
        let mut row = Vec::with_capacity(k);
        let mut p = 1.0;
        for _ in 0..k {
            row.push(p);
            p *= u;
        }
        row
    };
    let m = targets.len();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut gram = vec![0.0; k * k];
            let mut rhs = vec![0.0; k * m];
            for idx in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let row = features(x[idx]);
                for a in 0..k {
                    for b in 0..k {
                        gram[a * k + b] += row[a] * row[b];
                    }
                    for (t, target) in targets.iter().enumerate() {
                        rhs[t * k + a] += row[a] * target[idx];
                    }
                }
            }
            (gram, rhs)
        })
        .collect();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k * m];
    for (g, r) in partials {
        gram.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        rhs.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let mut gram = DMatrix::from_row_slice(k, k, &gram) / n as f64;
    let eig = SymmetricEigen::new(gram.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let lmin = eig.eigenvalues.iter().fold(f64::INFINITY, |a, b| a.min(b.abs()));
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if condition > basis.max_condition {
        return Err(Error::Regression { step, condition });
    }
    for d in 0..k {
        gram[(d, d)] += basis.ridge;
    }
    let chol = gram
        .cholesky()
        .ok_or(Error::Regression { step, condition })?;
    let mut fitted = Vec::with_capacity(m);
    for t in 0..m {
        let b = DVector::from_iterator(k, (0..k).map(|a| rhs[t * k + a] / n as f64));
        let coef = chol.solve(&b);
        let values: Vec<f64> = x
            .par_iter()
            .map(|v| {
                let row = features(*v);
                row.iter().zip(coef.iter()).map(|(r, c)| r * c).sum()
            })
            .collect();
        fitted.push(values);
    }
    Ok(fitted)
}

/// Least-squares Monte Carlo: the tree recursion with conditional
/// expectations replaced by projections on a polynomial basis of `X_i`.
/// The first step, where all paths share `X_0`, uses sample means.
pub fn solve_regression(
    problem: &BdsdeProblem,
    ensemble: &PathEnsemble,
    w: &BackwardPath,
    basis: &Basis,
    opts: &SolverOptions,
) -> Result<BdsdeSolution> {
    if problem.forcing.is_some() {
        return solve_with_forcing(problem, Backend::Regression { ensemble, basis }, w, opts);
    }
    if ensemble.dim != 1 {
        return Err(Error::UnsupportedBackend(
            "regression backend is scalar in the forward state".into(),
        ));
    }
    let grid = ensemble.grid.clone();
    check_path(&grid, w)?;
    check_step(grid.dt, problem.lipschitz)?;
    let n = grid.n_steps;
    let np = ensemble.n_paths;
    let dt = grid.dt;
    let xs: Vec<Vec<f64>> = (0..=n)
        .map(|i| (0..np).map(|p| ensemble.x(p, i)).collect())
        .collect();
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n + 1];
    y[n] = match &problem.path_terminal {
        Some(pt) => (0..np)
            .into_par_iter()
            .map(|p| {
                let path: Vec<f64> = (0..=n).map(|i| ensemble.x(p, i)).collect();
                pt(&path)
            })
            .collect(),
        None => xs[n].iter().map(|x| (problem.terminal)(*x)).collect(),
    };
    let a_last = ensemble.a(n - 1);
    let h = (a_last * dt).sqrt();
    z[n] = xs[n]
        .iter()
        .map(|x| ((problem.terminal)(x + h) - (problem.terminal)(x - h)) / (2.0 * h))
        .collect();
    let mut residual = vec![0.0; n];
    let mut iters = vec![0; n];
    let mut std_error = None;
    for i in (0..n).rev() {
        let a = ensemble.a(i);
        let (t, t_next) = (grid.time(i), grid.time(i + 1));
        let dw = w.increment(i);
        let cont: Vec<f64> = (0..np)
            .map(|p| {
                let q = Point::new(t_next, xs[i + 1][p], y[i + 1][p], z[i + 1][p]);
                y[i + 1][p] + (problem.g)(&q) * dw
            })
            .collect();
        let gnext: Vec<f64> = (0..np)
            .map(|p| (problem.g)(&Point::new(t_next, xs[i + 1][p], y[i + 1][p], z[i + 1][p])))
            .collect();
        let zt: Vec<f64> = (0..np)
            .map(|p| cont[p] * ensemble.dx(p, i) / (a * dt))
            .collect();
        let (mean, zfit, ey, eg) = if i == 0 {
            let avg = |v: &[f64]| v.iter().sum::<f64>() / np as f64;
            let (m, zm) = (avg(&cont), avg(&zt));
            let ym = avg(&y[1]);
            let gm = avg(&gnext);
            let var = cont.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (np as f64 - 1.0).max(1.0);
            std_error = Some((var / np as f64).sqrt());
            (vec![m; np], vec![zm; np], vec![ym; np], vec![gm; np])
        } else {
            let mut fits = project(&xs[i], &[&cont, &zt, &y[i + 1], &gnext], basis, i)?;
            let eg = fits.pop().unwrap();
            let ey = fits.pop().unwrap();
            let zf = fits.pop().unwrap();
            let m = fits.pop().unwrap();
            let scale = 1.0 + cont.iter().map(|c| c.abs()).sum::<f64>() / np as f64;
            let mx = xs[i].iter().sum::<f64>() / np as f64;
            let sx = (xs[i].iter().map(|v| (v - mx).powi(2)).sum::<f64>() / np as f64)
                .sqrt()
                .max(1e-300);
            let mut defect: f64 = 0.0;
            for pw in 1..=2 {
                let d = (0..np)
                    .map(|p| (cont[p] - m[p]) * ((xs[i][p] - mx) / sx).powi(pw))
                    .sum::<f64>()
                    / np as f64;
                defect = defect.max(d.abs() / scale);
            }
            residual[i] = defect;
            (m, zf, ey, eg)
        };
        let solved: Vec<Result<(f64, usize)>> = (0..np)
            .into_par_iter()
            .map(|p| {
                let base = Point::new(t, xs[i][p], 0.0, zfit[p]);
                let rhs = |yy: f64| {
                    let q = base.with_y(yy);
                    match opts.convention {
                        Convention::Ito => mean[p] + (problem.f)(&q) * dt,
                        Convention::Stratonovich => {
                            ey[p] + 0.5 * ((problem.g)(&q) + eg[p]) * dw + (problem.f)(&q) * dt
                        }
                    }
                };
                fixed_point(&rhs, mean[p], opts, i)
            })
            .collect();
        let mut yi = Vec::with_capacity(np);
        for r in solved {
            let (v, it) = r?;
            iters[i] = iters[i].max(it);
            yi.push(v);
        }
        y[i] = yi;
        z[i] = zfit;
    }
    Ok(BdsdeSolution {
        y,
        z,
        residual,
        picard_iters: iters,
        root: 0,
        std_error,
    })
}

/// Node-by-node comparison of two solutions on the same structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    /// `ξ₁ ≥ ξ₂`, `f₁ ≥ f₂` along solution 1, `g₁ = g₂` and `V¹ − V²`
    /// nondecreasing, all up to `epsilon`.
    pub hypotheses_hold: bool,
    /// `y¹ ≥ y² − epsilon` everywhere.
    pub ordered: bool,
    /// `min (y¹ − y²)` over all nodes.
    pub worst_margin: f64,
    pub epsilon: f64,
}

impl ComparisonReport {
    pub fn violation(&self) -> bool {
        self.hypotheses_hold && !self.ordered
    }
}

pub fn check_comparison(
    sol1: &BdsdeSolution,
    sol2: &BdsdeSolution,
    data1: &BdsdeProblem,
    data2: &BdsdeProblem,
    stepper: &dyn Stepper,
    opts: &SolverOptions,
) -> Result<ComparisonReport> {
    let grid = stepper.grid();
    let n = grid.n_steps;
    if sol1.y.len() != n + 1 || sol2.y.len() != n + 1 {
        return invalid("solutions do not live on this stepper");
    }
    let eps = 10.0 * opts.tolerance * (1.0 + sol1.y[0][sol1.root].abs());
    let mut hyp = true;
    for x in stepper.states(n) {
        if (data1.terminal)(*x) < (data2.terminal)(*x) - eps {
            hyp = false;
        }
    }
    for i in 0..=n {
        let t = grid.time(i);
        for (j, x) in stepper.states(i).iter().enumerate() {
            let p = Point::new(t, *x, sol1.y[i][j], sol1.z[i][j]);
            if i < n && (data1.f)(&p) < (data2.f)(&p) - eps {
                hyp = false;
            }
            if ((data1.g)(&p) - (data2.g)(&p)).abs() > eps {
                hyp = false;
            }
        }
    }
    let v1 = forcing_values(data1, n)?;
    let v2 = forcing_values(data2, n)?;
    for i in 0..n {
        if (v1[i + 1] - v2[i + 1]) - (v1[i] - v2[i]) < -eps {
            hyp = false;
        }
    }
    let mut worst = f64::INFINITY;
    for i in 0..=n {
        for (a, b) in sol1.y[i].iter().zip(&sol2.y[i]) {
            worst = worst.min(a - b);
        }
    }
    Ok(ComparisonReport {
        hypotheses_hold: hyp,
        ordered: worst >= -eps,
        worst_margin: worst,
        epsilon: eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{build_time_grid, build_tree, sample_backward_path};

    fn zero() -> Fn1 {
        Arc::new(|_| 0.0)
    }

    #[test]
    fn martingale_identity() {
        let g = build_time_grid(0.0, 1.0, 16).unwrap();
        let tree = build_tree(&g, 1.0, 2).unwrap();
        let w = sample_backward_path(&g, 1, 3).unwrap();
        let p = BdsdeProblem::new(Arc::new(|x| x), zero(), zero(), 1.0, 0.0);
        let s = solve_tree(&p, &tree, &w, &SolverOptions::default()).unwrap();
        for i in 0..=16 {
            for (j, x) in tree.nodes(i).iter().enumerate() {
                assert!((s.y[i][j] - x).abs() < 1e-13);
                assert!((s.z[i][j] - 1.0).abs() < 1e-12);
            }
        }
        assert!(s.residual.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn additive_noise() {
        let g = build_time_grid(0.0, 1.0, 32).unwrap();
        let tree = build_tree(&g, 1.5, 3).unwrap();
        let w = sample_backward_path(&g, 1, 8).unwrap();
        let beta = 0.3;
        let p = BdsdeProblem::new(Arc::new(|x| x * x), zero(), Arc::new(move |_| beta), 1.5, 0.0);
        let s = solve_tree(&p, &tree, &w, &SolverOptions::default()).unwrap();
        for i in [0, 5, 31] {
            for (j, x) in tree.nodes(i).iter().enumerate() {
                let exact = x * x + 1.5 * (1.0 - g.time(i)) + beta * w.remaining(i);
                assert!((s.y[i][j] - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forcing_examples() {
        let g = build_time_grid(0.0, 2.0, 8).unwrap();
        let tree = build_tree(&g, 1.0, 2).unwrap();
        let w = sample_backward_path(&g, 1, 1).unwrap();
        let base = BdsdeProblem::new(Arc::new(|_| 0.0), zero(), zero(), 1.0, 0.0);
        let v: Vec<f64> = g.nodes();
        let s = solve_tree(&base.clone().with_forcing(v), &tree, &w, &SolverOptions::default()).unwrap();
        for i in 0..=8 {
            for y in &s.y[i] {
                assert!((y - (2.0 - g.time(i))).abs() < 1e-14);
            }
        }
        let lin = BdsdeProblem::new(
            Arc::new(|x: f64| x.sin()),
            Arc::new(|p: &Point| 0.5 * p.y + 0.1 * p.z),
            Arc::new(|p: &Point| 0.2 * p.y),
            1.0,
            0.5,
        );
        let plain = solve_tree(&lin, &tree, &w, &SolverOptions::default()).unwrap();
        let forced = solve_tree(&lin.clone().with_forcing(vec![0.0; 9]), &tree, &w, &SolverOptions::default()).unwrap();
        assert_eq!(plain, forced);
    }

    #[test]
    fn step_size_guard() {
        let g = build_time_grid(0.0, 1.0, 2).unwrap();
        let tree = build_tree(&g, 1.0, 2).unwrap();
        let w = sample_backward_path(&g, 1, 1).unwrap();
        let p = BdsdeProblem::new(Arc::new(|_| 1.0), Arc::new(|p: &Point| 3.0 * p.y), zero(), 1.0, 3.0);
        assert!(matches!(
            solve_tree(&p, &tree, &w, &SolverOptions::default()),
            Err(Error::StepSize { .. })
        ));
    }

    #[test]
    fn fixed_point_fallback() {
        let opts = SolverOptions::default();
        let (y, _) = fixed_point(&|y| 2.0 - 1.5 * y, 0.0, &opts, 0).unwrap();
        assert!((y - 0.8).abs() < 1e-11);
    }
}

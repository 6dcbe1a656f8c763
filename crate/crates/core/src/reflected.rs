//! Reflected BDSDE with a lower barrier `S`: projection scheme, penalization
//! and the Snell-envelope oracle.

use std::fmt;
use std::sync::Arc;

use crate::bdsde::{
    check_path, check_step, one_step, solve_stepper, terminal_z, BdsdeProblem, BdsdeSolution,
    SolverOptions, StepData,
};
use crate::error::{Error, Result};
use crate::generators::Point;
use crate::paths::BackwardPath;
use crate::stepper::Stepper;

pub type BarrierFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Lower barrier `S(t, x)` sampled at grid nodes.
#[derive(Clone)]
pub struct Barrier {
    pub s: BarrierFn,
    /// Time-Lipschitz scale used to tell barrier jumps from drift.
    pub lipschitz_scale: f64,
}

impl fmt::Debug for Barrier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Barrier")
            .field("lipschitz_scale", &self.lipschitz_scale)
            .finish()
    }
}

impl Barrier {
    pub fn new(s: BarrierFn) -> Self {
        Self {
            s,
            lipschitz_scale: 1.0,
        }
    }

    /// `S ≡ level` on `[0, T)` and `S_T = terminal`.
    pub fn constant_until(level: f64, terminal: f64, horizon: f64) -> Self {
        Self::new(Arc::new(move |t, _| if t < horizon { level } else { terminal }))
    }

    pub fn at(&self, t: f64, x: f64) -> f64 {
        (self.s)(t, x)
    }

    fn check_terminal(&self, problem: &BdsdeProblem, stepper: &dyn Stepper) -> Result<()> {
        let grid = stepper.grid();
        let n = grid.n_steps;
        for x in stepper.states(n) {
            let (s, xi) = (self.at(grid.horizon, *x), (problem.terminal)(*x));
            if s > xi + 1e-12 * (1.0 + xi.abs()) {
                return Err(Error::InvalidBarrier(format!(
                    "S_T = {s} exceeds ξ = {xi} at x = {x}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectedSolution {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// Per level `i < n`: `ΔK_i = Y_i − (pre-projection value)`.
    pub dk: Vec<Vec<f64>>,
    /// Part of `ΔK` attributed to barrier jumps.
    pub dk_jump: Vec<Vec<f64>>,
    /// Barrier at every node.
    pub barrier: Vec<Vec<f64>>,
    /// `E[K_{t_i}]` under the problem's volatility.
    pub expected_k: Vec<f64>,
    pub expected_k_jump: Vec<f64>,
    pub skorokhod_sum: f64,
    pub root: usize,
}

impl ReflectedSolution {
    pub fn y0(&self) -> f64 {
        self.y[0][self.root]
    }

    pub fn k_terminal(&self) -> f64 {
        *self.expected_k.last().unwrap_or(&0.0)
    }
}

/// Penalized generator `f + n (y − S)^−`. When `dt (C + n) ≥ 1` each step
/// is solved by bracketing instead of fixed-point iteration.
pub fn solve_penalized(
    problem: &BdsdeProblem,
    barrier: &Barrier,
    penalty: f64,
    stepper: &dyn Stepper,
    w: &BackwardPath,
    opts: &SolverOptions,
) -> Result<BdsdeSolution> {
    if !(penalty >= 0.0) {
        return Err(Error::InvalidArgument(format!("penalty {penalty} must be >= 0")));
    }
    let dt = stepper.grid().dt;
    check_step(dt, problem.lipschitz)?;
    let mut p = problem.clone();
    let f = problem.f.clone();
    let s = barrier.s.clone();
    p.f = Arc::new(move |q: &Point| f(q) + penalty * (s(q.t, q.x) - q.y).max(0.0));
    let mut o = *opts;
    if dt * (problem.lipschitz + penalty) >= 1.0 {
        o.max_iterations = 0;
    }
    solve_stepper(&p, stepper, w, &o)
}

/// `Y_0` of the penalized solutions for each penalty level.
pub fn penalization_trace(
    problem: &BdsdeProblem,
    barrier: &Barrier,
    penalties: &[f64],
    stepper: &dyn Stepper,
    w: &BackwardPath,
    opts: &SolverOptions,
) -> Result<Vec<(f64, f64)>> {
    penalties
        .iter()
        .map(|&n| Ok((n, solve_penalized(problem, barrier, n, stepper, w, opts)?.y0())))
        .collect()
}

/// Projection scheme `Y_i = max(S_i, T(Y_{i+1}))`.
pub fn solve_reflected(
    problem: &BdsdeProblem,
    barrier: &Barrier,
    stepper: &dyn Stepper,
    w: &BackwardPath,
    opts: &SolverOptions,
) -> Result<ReflectedSolution> {
    let grid = stepper.grid().clone();
    check_path(&grid, w)?;
    check_step(grid.dt, problem.lipschitz)?;
    barrier.check_terminal(problem, stepper)?;
    let n = grid.n_steps;
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n + 1];
    let mut dk = vec![Vec::new(); n];
    let mut dk_jump = vec![Vec::new(); n];
    let barrier_at = |i: usize| -> Vec<f64> {
        stepper
            .states(i)
            .iter()
            .map(|x| barrier.at(grid.time(i), *x))
            .collect()
    };
    let bars: Vec<Vec<f64>> = (0..=n).map(barrier_at).collect();
    y[n] = stepper.states(n).iter().map(|x| (problem.terminal)(*x)).collect();
    z[n] = terminal_z(stepper, problem.a, &problem.terminal)?;
    let jump_threshold = 10.0 * grid.dt * barrier.lipschitz_scale;
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
        let out = one_step(stepper, &data, problem.a, &*problem.f, &*problem.g, opts)?;
        let mut yi = Vec::with_capacity(out.y.len());
        let mut ki = Vec::with_capacity(out.y.len());
        let mut ji = Vec::with_capacity(out.y.len());
        for (j, pre) in out.y.iter().enumerate() {
            let s = bars[i][j];
            let v = pre.max(s);
            let push = v - pre;
            let x = data.x[j];
            let barrier_move = (barrier.at(grid.time(i + 1), x) - s).abs();
            yi.push(v);
            ki.push(push);
            ji.push(if push > 0.0 && barrier_move > jump_threshold { push } else { 0.0 });
        }
        y[i] = yi;
        z[i] = out.z;
        dk[i] = ki;
        dk_jump[i] = ji;
    }
    let masses = stepper.node_masses(&|_, _| problem.a)?;
    let mut expected_k = vec![0.0; n + 1];
    let mut expected_k_jump = vec![0.0; n + 1];
    let mut sk = 0.0;
    for i in 0..n {
        let mut inc = 0.0;
        let mut inc_j = 0.0;
        for j in 0..dk[i].len() {
            inc += masses[i][j] * dk[i][j];
            inc_j += masses[i][j] * dk_jump[i][j];
            sk += masses[i][j] * (y[i][j] - bars[i][j]) * dk[i][j];
        }
        expected_k[i + 1] = expected_k[i] + inc;
        expected_k_jump[i + 1] = expected_k_jump[i] + inc_j;
    }
    Ok(ReflectedSolution {
        y,
        z,
        dk,
        dk_jump,
        barrier: bars,
        expected_k,
        expected_k_jump,
        skorokhod_sum: sk,
        root: stepper.root(),
    })
}

/// `Σ_i Σ_j p_ij (Y_ij − S_ij) ΔK_ij` with node masses under volatility `a`.
pub fn skorokhod_diagnostic(solution: &ReflectedSolution, stepper: &dyn Stepper, a: f64) -> Result<f64> {
    let masses = stepper.node_masses(&|_, _| a)?;
    let mut sum = 0.0;
    for (i, level) in solution.dk.iter().enumerate() {
        for (j, d) in level.iter().enumerate() {
            sum += masses[i][j] * (solution.y[i][j] - solution.barrier[i][j]) * d;
        }
    }
    Ok(sum)
}

/// Optimal stopping by backward `max(payoff, continuation)`.
pub fn snell_envelope(
    stepper: &dyn Stepper,
    a: f64,
    payoff: &dyn Fn(usize, usize) -> f64,
    terminal: &dyn Fn(usize) -> f64,
) -> Result<Vec<Vec<f64>>> {
    let n = stepper.grid().n_steps;
    let mut v = vec![Vec::new(); n + 1];
    v[n] = (0..stepper.states(n).len()).map(terminal).collect();
    for i in (0..n).rev() {
        let cont = stepper.expect(i, a, &v[i + 1])?;
        v[i] = cont
            .iter()
            .enumerate()
            .map(|(j, c)| c.max(payoff(i, j)))
            .collect();
    }
    Ok(v)
}

/// `G_i = Σ_{j<i} g(t_{j+1}) ΔW_j` for a time-only `g`; the shift that turns
/// the reflected equation with `f = 0` into optimal stopping.
pub fn backward_shift(g: &dyn Fn(f64) -> f64, w: &BackwardPath) -> Vec<f64> {
    let n = w.grid.n_steps;
    let mut out = vec![0.0; n + 1];
    for i in 0..n {
        out[i + 1] = out[i] + g(w.grid.time(i + 1)) * w.increment(i);
    }
    out
}

//! Doss–Sussmann flow `η(t, x, y) = y + ∫_t^T g(s, x, η) ∘ d←W_s`, its
//! y-inverse `E`, and the transform between the doubly stochastic equation
//! and the plain second-order BSDE with generator `f̃`.
//!
//! The flow is integrated with Heun steps on the frozen `W` increments. The
//! second-order jet in `(x, y)` is carried through the same steps, so the
//! tabulated derivatives are the exact derivatives of the discrete flow.

use std::fmt;
use std::ops::{Add, Mul};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::generators::{Fn2, Point};
use crate::paths::{BackwardPath, TimeGrid};
use crate::tbdsde::TbdsdeProblem;

/// Value and partials up to second order in `(x, y)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub x: f64,
    pub y: f64,
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Jet {
    pub fn identity(y: f64) -> Self {
        Self { v: y, y: 1.0, ..Self::default() }
    }

    fn is_finite(&self) -> bool {
        [self.v, self.x, self.y, self.xx, self.xy, self.yy]
            .iter()
            .all(|c| c.is_finite())
    }

    /// Jet of `(x, y) ↦ g(x, η(x, y))` from the partials of `g` in `(x, η)`.
    fn compose(g: &Jet, e: &Jet) -> Jet {
        Jet {
            v: g.v,
            x: g.x + g.y * e.x,
            y: g.y * e.y,
            xx: g.xx + 2.0 * g.xy * e.x + g.yy * e.x * e.x + g.y * e.xx,
            xy: g.xy * e.y + g.yy * e.x * e.y + g.y * e.xy,
            yy: g.yy * e.y * e.y + g.y * e.yy,
        }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            x: self.x + o.x,
            y: self.y + o.y,
            xx: self.xx + o.xx,
            xy: self.xy + o.xy,
            yy: self.yy + o.yy,
        }
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, s: f64) -> Jet {
        Jet {
            v: self.v * s,
            x: self.x * s,
            y: self.y * s,
            xx: self.xx * s,
            xy: self.xy * s,
            yy: self.yy * s,
        }
    }
}

pub type NoiseFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type NoiseJetFn = Arc<dyn Fn(f64, f64, f64) -> Jet + Send + Sync>;

/// `g(t, x, y)` with optional analytic partials; central differences of `g`
/// are used otherwise.
#[derive(Clone)]
pub struct NoiseCoefficient {
    pub g: NoiseFn,
    pub jet: Option<NoiseJetFn>,
    pub fd_step: f64,
}

impl fmt::Debug for NoiseCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NoiseCoefficient")
            .field("analytic_jet", &self.jet.is_some())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

impl NoiseCoefficient {
    pub fn new(g: NoiseFn) -> Self {
        Self { g, jet: None, fd_step: 1e-4 }
    }

    pub fn with_jet(mut self, jet: NoiseJetFn) -> Self {
        self.jet = Some(jet);
        self
    }

    pub fn zero() -> Self {
        Self::new(Arc::new(|_, _, _| 0.0)).with_jet(Arc::new(|_, _, _| Jet::default()))
    }

    /// `g(y) = β y`.
    pub fn linear(beta: f64) -> Self {
        Self::new(Arc::new(move |_, _, y| beta * y)).with_jet(Arc::new(move |_, _, y| Jet {
            v: beta * y,
            y: beta,
            ..Jet::default()
        }))
    }

    /// `g(y) = β sin y`.
    pub fn sine(beta: f64) -> Self {
        Self::new(Arc::new(move |_, _, y| beta * y.sin())).with_jet(Arc::new(move |_, _, y| Jet {
            v: beta * y.sin(),
            y: beta * y.cos(),
            yy: -beta * y.sin(),
            ..Jet::default()
        }))
    }

    pub fn eval(&self, t: f64, x: f64, y: f64) -> f64 {
        (self.g)(t, x, y)
    }

    /// Partials of `g` in `(x, y)` at fixed `t`.
    pub fn jet(&self, t: f64, x: f64, y: f64) -> Jet {
        if let Some(j) = &self.jet {
            return j(t, x, y);
        }
        let h = self.fd_step;
        let g = |dx: f64, dy: f64| self.eval(t, x + dx, y + dy);
        let c = g(0.0, 0.0);
        Jet {
            v: c,
            x: (g(h, 0.0) - g(-h, 0.0)) / (2.0 * h),
            y: (g(0.0, h) - g(0.0, -h)) / (2.0 * h),
            xx: (g(h, 0.0) - 2.0 * c + g(-h, 0.0)) / (h * h),
            xy: (g(h, h) - g(h, -h) - g(-h, h) + g(-h, -h)) / (4.0 * h * h),
            yy: (g(0.0, h) - 2.0 * c + g(0.0, -h)) / (h * h),
        }
    }
}

/// Uniform axis `lo + k h`, `k < n`. A single point means "no dependence".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub h: f64,
    pub n: usize,
}

impl Axis {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 4 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return invalid(format!("axis [{lo}, {hi}] with {n} points: need hi > lo and n >= 4"));
        }
        Ok(Self { lo, h: (hi - lo) / (n - 1) as f64, n })
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, h: 0.0, n: 1 }
    }

    pub fn value(&self, k: usize) -> f64 {
        self.lo + self.h * k as f64
    }

    pub fn hi(&self) -> f64 {
        self.value(self.n - 1)
    }

    /// Stencil start and cubic Lagrange weights at `x`.
    fn stencil(&self, x: f64, what: &str) -> Result<(usize, [f64; 4])> {
        let slack = 1e-12 * (1.0 + x.abs());
        if !(x >= self.lo - slack && x <= self.hi() + slack) {
            return Err(Error::Range(format!(
                "{what} = {x} outside lattice [{}, {}]",
                self.lo,
                self.hi()
            )));
        }
        let s = (x - self.lo) / self.h;
        let k0 = (s.floor() as isize - 1).clamp(0, self.n as isize - 4) as usize;
        let u = s - k0 as f64;
        let w = [
            -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0,
            u * (u - 2.0) * (u - 3.0) / 2.0,
            -u * (u - 1.0) * (u - 3.0) / 2.0,
            u * (u - 1.0) * (u - 2.0) / 6.0,
        ];
        Ok((k0, w))
    }
}

/// `(x, y)` lattice on which the flow is tabulated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowLattice {
    pub x: Axis,
    pub y: Axis,
}

impl FlowLattice {
    pub fn new(x: Axis, y: Axis) -> Result<Self> {
        if y.n < 4 {
            return invalid("y axis needs at least 4 points");
        }
        Ok(Self { x, y })
    }

    /// `y`-range `[lo − 3 span, hi + 3 span]` around expected solution values.
    pub fn around(x: Axis, y_min: f64, y_max: f64, n: usize) -> Result<Self> {
        let span = (y_max - y_min).max(1e-3 * (1.0 + y_max.abs()));
        Self::new(x, Axis::uniform(y_min - 3.0 * span, y_max + 3.0 * span, n)?)
    }
}

#[derive(Clone, Debug)]
pub struct FlowField {
    pub grid: TimeGrid,
    pub lattice: FlowLattice,
    /// `jets[(i · nx + ix) · ny + iy]`.
    pub jets: Vec<Jet>,
    pub w: BackwardPath,
}

fn interp(axis: &Axis, x: f64, what: &str, at: &dyn Fn(usize) -> Jet) -> Result<Jet> {
    if axis.n == 1 {
        return Ok(at(0));
    }
    let (k0, w) = axis.stencil(x, what)?;
    let mut out = Jet::default();
    for (m, wm) in w.iter().enumerate() {
        out = out + at(k0 + m) * *wm;
    }
    Ok(out)
}

impl FlowField {
    fn index(&self, i: usize, ix: usize, iy: usize) -> usize {
        (i * self.lattice.x.n + ix) * self.lattice.y.n + iy
    }

    pub fn node(&self, i: usize, ix: usize, iy: usize) -> Jet {
        self.jets[self.index(i, ix, iy)]
    }

    /// Jet of `η(t_i, ·, ·)` at `(x, y)` by cubic interpolation of the table.
    pub fn eval(&self, i: usize, x: f64, y: f64) -> Result<Jet> {
        if i > self.grid.n_steps {
            return invalid(format!("level {i} beyond the grid"));
        }
        let column = |ix: usize| -> Result<Jet> {
            interp(&self.lattice.y, y, "y", &|iy| self.node(i, ix, iy))
        };
        if self.lattice.x.n == 1 {
            return column(0);
        }
        let (k0, w) = self.lattice.x.stencil(x, "x")?;
        let mut out = Jet::default();
        for (m, wm) in w.iter().enumerate() {
            out = out + column(k0 + m)? * *wm;
        }
        Ok(out)
    }

    pub fn level_of(&self, t: f64) -> Result<usize> {
        let s = (t - self.grid.t0) / self.grid.dt;
        let i = s.round();
        if (s - i).abs() > 1e-6 || i < 0.0 || i > self.grid.n_steps as f64 {
            return invalid(format!("t = {t} is not a node of the flow grid"));
        }
        Ok(i as usize)
    }

    pub fn min_dy(&self) -> f64 {
        self.jets.iter().map(|j| j.y).fold(f64::INFINITY, f64::min)
    }
}

/// Heun steps backward from `η(T) = y` on every lattice point.
pub fn solve_flow(g: &NoiseCoefficient, w: &BackwardPath, lattice: &FlowLattice) -> Result<FlowField> {
    if w.dim != 1 {
        return Err(Error::UnsupportedBackend("flow needs a scalar backward path".into()));
    }
    let grid = w.grid.clone();
    let n = grid.n_steps;
    let (nx, ny) = (lattice.x.n, lattice.y.n);
    let columns: Vec<Result<Vec<Jet>>> = (0..nx * ny)
        .into_par_iter()
        .map(|p| {
            let (x, y0) = (lattice.x.value(p / ny), lattice.y.value(p % ny));
            let mut traj = vec![Jet::default(); n + 1];
            let mut j = Jet::identity(y0);
            traj[n] = j;
            for i in (0..n).rev() {
                let dw = w.increment(i);
                let k1 = Jet::compose(&g.jet(grid.time(i + 1), x, j.v), &j) * dw;
                let pred = j + k1;
                let k2 = Jet::compose(&g.jet(grid.time(i), x, pred.v), &pred) * dw;
                j = j + (k1 + k2) * 0.5;
                if !j.is_finite() || j.y <= 0.0 {
                    return Err(Error::StepSize {
                        reason: format!(
                            "flow step at level {i} lost monotonicity (D_y η = {}) at x = {x}, y = {y0}",
                            j.y
                        ),
                        suggested_dt: 0.5 * grid.dt,
                    });
                }
                traj[i] = j;
            }
            Ok(traj)
        })
        .collect();
    let mut jets = vec![Jet::default(); (n + 1) * nx * ny];
    for (p, col) in columns.into_iter().enumerate() {
        for (i, j) in col?.into_iter().enumerate() {
            jets[i * nx * ny + p] = j;
        }
    }
    Ok(FlowField {
        grid,
        lattice: *lattice,
        jets,
        w: w.clone(),
    })
}

/// `E(t, x, ·)`, the y-inverse of the flow.
#[derive(Clone, Debug)]
pub struct InverseField {
    pub flow: Arc<FlowField>,
    /// `E` jets at the lattice targets `(t_i, x, y_k)`; `None` where `y_k`
    /// lies outside the range of `η(t_i, x, ·)` on the lattice.
    pub eps: Vec<Option<Jet>>,
}

pub const ROOT_TOLERANCE: f64 = 1e-12;

/// `E` jet from the flow jet at the preimage.
fn inverse_jet(u: f64, e: &Jet) -> Jet {
    let ey = 1.0 / e.y;
    let eyy = -e.yy * ey / (e.y * e.y);
    let exy = -(eyy * e.x * e.y + ey * e.xy) / e.y;
    Jet {
        v: u,
        x: -e.x * ey,
        y: ey,
        xx: -(2.0 * exy * e.x + eyy * e.x * e.x + ey * e.xx),
        xy: exy,
        yy: eyy,
    }
}

impl InverseField {
    /// Preimage `u` with `η(t_i, x, u) = y`, by bracketed Newton steps.
    pub fn preimage(&self, i: usize, x: f64, y: f64) -> Result<f64> {
        let flow = &self.flow;
        let ax = &flow.lattice.y;
        let (mut lo, mut hi) = (ax.lo, ax.hi());
        let (elo, ehi) = (flow.eval(i, x, lo)?.v, flow.eval(i, x, hi)?.v);
        if !(y >= elo && y <= ehi) {
            return Err(Error::Range(format!(
                "target {y} outside the flow range [{elo}, {ehi}] at level {i}, x = {x}"
            )));
        }
        let mut u = lo + (y - elo) / (ehi - elo) * (hi - lo);
        for _ in 0..200 {
            let e = flow.eval(i, x, u)?;
            let r = e.v - y;
            if r == 0.0 {
                return Ok(u);
            }
            if r > 0.0 {
                hi = u;
            } else {
                lo = u;
            }
            let mut next = u - r / e.y;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - u).abs() <= 1e-15 * (1.0 + u.abs()) || hi - lo <= 1e-15 * (1.0 + u.abs()) {
                u = next;
                break;
            }
            u = next;
        }
        let e = flow.eval(i, x, u)?;
        let r = e.v - y;
        // interpolation rounds relative to node values, which scale with the axis extent
        let extent = ax.lo.abs().max(ax.hi().abs());
        let floor = 64.0 * f64::EPSILON * (1.0 + extent) * e.y.abs();
        if r.abs() > ROOT_TOLERANCE * (1.0 + y.abs()) + floor {
            return Err(Error::Convergence {
                step: i,
                iterations: 200,
                last_change: r.abs(),
            });
        }
        Ok(u)
    }

    /// Jet of `E(t_i, ·, ·)` at `(x, y)`.
    pub fn eval(&self, i: usize, x: f64, y: f64) -> Result<Jet> {
        let u = self.preimage(i, x, y)?;
        let e = self.flow.eval(i, x, u)?;
        if e.y < 1e-10 {
            return Err(Error::SingularFlow(e.y));
        }
        Ok(inverse_jet(u, &e))
    }

    pub fn node(&self, i: usize, ix: usize, iy: usize) -> Option<Jet> {
        self.eps[self.flow.index(i, ix, iy)]
    }
}

pub fn invert_flow(flow: Arc<FlowField>) -> Result<InverseField> {
    let min = flow.min_dy();
    if !(min > 0.0) {
        return Err(Error::SingularFlow(min));
    }
    let (nx, ny) = (flow.lattice.x.n, flow.lattice.y.n);
    let mut inv = InverseField { flow: flow.clone(), eps: Vec::new() };
    let eps: Vec<Result<Option<Jet>>> = (0..flow.jets.len())
        .into_par_iter()
        .map(|p| {
            let (i, rest) = (p / (nx * ny), p % (nx * ny));
            let (x, y) = (flow.lattice.x.value(rest / ny), flow.lattice.y.value(rest % ny));
            match inv.eval(i, x, y) {
                Ok(j) => Ok(Some(j)),
                Err(Error::Range(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    inv.eps = eps.into_iter().collect::<Result<_>>()?;
    Ok(inv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub max_violation: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn max_violation(&self) -> f64 {
        self.checks.iter().map(|c| c.max_violation).fold(0.0, f64::max)
    }

    pub fn check(&self, name: &str) -> Option<&IdentityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tally(Vec<IdentityCheck>);

impl Tally {
    fn add(&mut self, name: &'static str, v: f64) {
        let v = if v.is_nan() { f64::INFINITY } else { v.abs() };
        match self.0.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                c.max_violation = c.max_violation.max(v);
                c.samples += 1;
            }
            None => self.0.push(IdentityCheck { name, max_violation: v, samples: 1 }),
        }
    }
}

/// Tangent jets against differences of the `η` table, the inverse
/// identities with `E`-derivatives differenced from the `E` table, and the
/// chain rule for `ψ(x) = η(t, x, φ(x))` with a quadratic test function `φ`.
/// All differences are central on the lattice spacing, so violations are
/// second order in the spacing.
pub fn derivative_identity_report(flow: &FlowField, inv: &InverseField) -> Result<IdentityReport> {
    let lat = flow.lattice;
    let (hx, hy) = (lat.x.h, lat.y.h);
    let mut t = Tally(Vec::new());
    let has_x = lat.x.n >= 3;
    let ix_range = if has_x { 1..lat.x.n - 1 } else { 0..1 };
    for i in 0..=flow.grid.n_steps {
        for ix in ix_range.clone() {
            for iy in 1..lat.y.n - 1 {
                let c = flow.node(i, ix, iy);
                let (d, u) = (flow.node(i, ix, iy - 1), flow.node(i, ix, iy + 1));
                let s = 1.0 + c.v.abs();
                t.add("tangent_y", (c.y - (u.v - d.v) / (2.0 * hy)) / s);
                t.add("tangent_yy", (c.yy - (u.v - 2.0 * c.v + d.v) / (hy * hy)) / s);
                if has_x {
                    let (l, r) = (flow.node(i, ix - 1, iy), flow.node(i, ix + 1, iy));
                    t.add("tangent_x", (c.x - (r.v - l.v) / (2.0 * hx)) / s);
                    t.add("tangent_xx", (c.xx - (r.v - 2.0 * c.v + l.v) / (hx * hx)) / s);
                    t.add("tangent_xy", (c.xy - (r.y - l.y) / (2.0 * hx)) / s);
                }

                let (Some(e), Some(ed), Some(eu)) =
                    (inv.node(i, ix, iy), inv.node(i, ix, iy - 1), inv.node(i, ix, iy + 1))
                else {
                    continue;
                };
                let x = lat.x.value(ix);
                let n = flow.eval(i, x, e.v)?;
                let ey = (eu.v - ed.v) / (2.0 * hy);
                let eyy = (eu.v - 2.0 * e.v + ed.v) / (hy * hy);
                t.add("inverse_y", ey * n.y - 1.0);
                t.add("inverse_yy", eyy * n.y * n.y + ey * n.yy);
                if has_x {
                    let (Some(el), Some(er)) = (inv.node(i, ix - 1, iy), inv.node(i, ix + 1, iy)) else {
                        continue;
                    };
                    let ex = (er.v - el.v) / (2.0 * hx);
                    let exx = (er.v - 2.0 * e.v + el.v) / (hx * hx);
                    let (Some(eld), Some(elu), Some(erd), Some(eru)) = (
                        inv.node(i, ix - 1, iy - 1),
                        inv.node(i, ix - 1, iy + 1),
                        inv.node(i, ix + 1, iy - 1),
                        inv.node(i, ix + 1, iy + 1),
                    ) else {
                        continue;
                    };
                    let exy = (eru.v - erd.v - elu.v + eld.v) / (4.0 * hx * hy);
                    t.add("inverse_x", ex + ey * n.x);
                    t.add("inverse_xx", exx + 2.0 * exy * n.x + eyy * n.x * n.x + ey * n.xx);
                    t.add("inverse_xy", exy * n.y + eyy * n.x * n.y + ey * n.xy);
                }
            }
        }
        // composite ψ(x) = η(t_i, x, φ(x))
        let (ymid, yspan) = (0.5 * (lat.y.lo + lat.y.hi()), lat.y.hi() - lat.y.lo);
        let phi = |x: f64| ymid + 0.05 * yspan * x + 0.02 * yspan * x * x;
        let (dphi, ddphi) = (|x: f64| 0.05 * yspan + 0.04 * yspan * x, 0.04 * yspan);
        let h = if has_x { hx } else { 1e-2 };
        let xs: Vec<f64> = if has_x {
            (2..lat.x.n - 2).map(|k| lat.x.value(k)).collect()
        } else {
            vec![-0.5, 0.0, 0.5]
        };
        for x in xs {
            let psi = |x: f64| flow.eval(i, x, phi(x)).map(|j| j.v);
            let (Ok(pl), Ok(pc), Ok(pr)) = (psi(x - h), psi(x), psi(x + h)) else {
                continue;
            };
            let e = flow.eval(i, x, phi(x))?;
            let s = 1.0 + pc.abs();
            let p = dphi(x);
            t.add("chain_x", ((pr - pl) / (2.0 * h) - (e.x + e.y * p)) / s);
            let formula = e.xx + 2.0 * e.xy * p + e.yy * p * p + e.y * ddphi;
            t.add("chain_xx", ((pr - 2.0 * pc + pl) / (h * h) - formula) / s);
        }
    }
    Ok(IdentityReport { checks: t.0 })
}

/// `f̃(t_i, x, y, z, a)` for the Stratonovich driver `f` (entering the
/// equation with a minus sign).
pub fn transformed_generator(f: &Fn2, flow: &FlowField, level: usize, p: &Point, a: f64) -> Result<f64> {
    let e = flow.eval(level, p.x, p.y)?;
    if e.y < 1e-10 {
        return Err(Error::SingularFlow(e.y));
    }
    let q = Point::new(p.t, p.x, e.v, e.y * p.z + e.x);
    let fv = f(&q, a);
    Ok((fv - 0.5 * a * e.xx - p.z * a * e.xy - 0.5 * e.yy * a * p.z * p.z) / e.y)
}

/// The plain second-order BSDE solved by `U = E(t, B, Y)`. The problem's
/// driver is read as the Stratonovich driver and its `g` is replaced by 0.
/// Driver evaluations that leave the flow lattice return NaN, which the
/// solvers reject.
pub fn transformed_problem(problem: &TbdsdeProblem, flow: Arc<FlowField>) -> TbdsdeProblem {
    let driver = problem.driver.clone();
    let f: Fn2 = Arc::new(move |p: &Point, a: f64| -driver(p, a));
    let ft: Fn2 = Arc::new(move |p: &Point, a: f64| {
        let level = match flow.level_of(p.t) {
            Ok(l) => l,
            Err(_) => return f64::NAN,
        };
        transformed_generator(&f, &flow, level, p, a).map(|v| -v).unwrap_or(f64::NAN)
    });
    let mut out = problem.clone();
    out.driver = ft;
    out.g = Arc::new(|_| 0.0);
    out
}

/// Per-level node traces aligned on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionTraces {
    pub states: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// `ΔK` between levels `i` and `i + 1`, attached to level `i`.
    pub dk: Vec<Vec<f64>>,
}

impl SolutionTraces {
    fn check(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 || self.y.len() != n || self.z.len() != n || self.dk.len() + 1 != n {
            return invalid("traces are not aligned on one grid");
        }
        for i in 0..n {
            let m = self.states[i].len();
            if self.y[i].len() != m || self.z[i].len() != m || (i + 1 < n && self.dk[i].len() != m) {
                return invalid(format!("traces at level {i} have mismatched lengths"));
            }
        }
        Ok(())
    }
}

fn map_traces(
    tr: &SolutionTraces,
    jet: &(dyn Fn(usize, f64, f64) -> Result<Jet> + Sync),
) -> Result<SolutionTraces> {
    tr.check()?;
    let n = tr.states.len();
    let mut out = SolutionTraces {
        states: tr.states.clone(),
        y: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        dk: Vec::with_capacity(n - 1),
    };
    for i in 0..n {
        let jets: Vec<Jet> = tr.states[i]
            .par_iter()
            .zip(&tr.y[i])
            .map(|(x, y)| jet(i, *x, *y))
            .collect::<Result<_>>()?;
        out.y.push(jets.iter().map(|j| j.v).collect());
        out.z.push(jets.iter().zip(&tr.z[i]).map(|(j, z)| j.y * z + j.x).collect());
        if i + 1 < n {
            out.dk.push(jets.iter().zip(&tr.dk[i]).map(|(j, k)| j.y * k).collect());
        }
    }
    Ok(out)
}

/// `(Y, Z, K) ↦ (U, V, K̃)` with `U = E(Y)`, `V = D_yE Z + D_xE`,
/// `ΔK̃ = D_yE ΔK`.
pub fn transform_solution(tr: &SolutionTraces, inv: &InverseField) -> Result<SolutionTraces> {
    if tr.states.len() != inv.flow.grid.n_steps + 1 {
        return invalid("traces and flow use different grids");
    }
    map_traces(tr, &|i, x, y| inv.eval(i, x, y))
}

/// `(U, V, K̃) ↦ (Y, Z, K)` with `Y = η(U)`, `Z = D_yη V + D_xη`,
/// `ΔK = D_yη ΔK̃`.
pub fn inverse_transform(tr: &SolutionTraces, flow: &FlowField) -> Result<SolutionTraces> {
    if tr.states.len() != flow.grid.n_steps + 1 {
        return invalid("traces and flow use different grids");
    }
    map_traces(tr, &|i, x, u| flow.eval(i, x, u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub max_discrepancy: f64,
    pub samples: usize,
}

/// Both sides of `H(Y, Z) = f̃(U, V)` on every trace node, with
/// `H = D_yE f + ½ D_xxE a + ½ D_yyE a z² + D_xyE z a`.
pub fn consistency_check(
    f: &Fn2,
    inv: &InverseField,
    tr: &SolutionTraces,
    a: f64,
) -> Result<ConsistencyReport> {
    let flow = &inv.flow;
    let uv = transform_solution(tr, inv)?;
    let mut worst = 0.0f64;
    let mut samples = 0;
    for i in 0..tr.states.len() {
        let t = flow.grid.time(i);
        for j in 0..tr.states[i].len() {
            let (x, y, z) = (tr.states[i][j], tr.y[i][j], tr.z[i][j]);
            let e = inv.eval(i, x, y)?;
            let h = e.y * f(&Point::new(t, x, y, z), a)
                + 0.5 * e.xx * a
                + 0.5 * e.yy * a * z * z
                + e.xy * z * a;
            let ft = transformed_generator(f, flow, i, &Point::new(t, x, uv.y[i][j], uv.z[i][j]), a)?;
            worst = worst.max((h - ft).abs() / (1.0 + h.abs()));
            samples += 1;
        }
    }
    Ok(ConsistencyReport { max_discrepancy: worst, samples })
}

/// What stands in for `|W_t|` in the growth bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathNorm {
    /// `|W_t|` as stated.
    Value,
    /// `sup_{s ∈ [t, T]} |W_T − W_s|`, the noise the flow actually sees.
    IncrementSup,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthFit {
    pub field: &'static str,
    pub norm: PathNorm,
    /// Smallest `C` with `|ζ| ≤ |y| + C m`; `None` past the cap.
    pub value_c: Option<f64>,
    /// Smallest `C` with `Σ |D ζ| ≤ C exp(C m)`; `None` past the cap.
    pub derivative_c: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthReport {
    pub fits: Vec<GrowthFit>,
}

impl GrowthReport {
    pub fn fit(&self, field: &str, norm: PathNorm) -> Option<&GrowthFit> {
        self.fits.iter().find(|f| f.field == field && f.norm == norm)
    }

    /// Some norm admits finite constants for both fields.
    pub fn passed(&self) -> bool {
        [PathNorm::Value, PathNorm::IncrementSup].iter().any(|n| {
            self.fits
                .iter()
                .filter(|f| f.norm == *n)
                .all(|f| f.value_c.is_some() && f.derivative_c.is_some())
        })
    }
}

pub const GROWTH_CAP: f64 = 1e6;

fn fit_value(samples: &[(f64, f64, f64)]) -> Option<f64> {
    let mut c = 0.0f64;
    for &(m, y, z) in samples {
        let excess = z.abs() - y.abs();
        if excess <= 1e-12 * (1.0 + y.abs()) {
            continue;
        }
        if m <= 0.0 {
            return None;
        }
        c = c.max(excess / m);
    }
    (c <= GROWTH_CAP).then_some(c)
}

fn fit_derivative(samples: &[(f64, f64)]) -> Option<f64> {
    let ok = |c: f64| samples.iter().all(|&(m, d)| d <= c * (c * m).exp() * (1.0 + 1e-12));
    if !ok(GROWTH_CAP) {
        return None;
    }
    if ok(0.0) {
        return Some(0.0);
    }
    let (mut lo, mut hi) = (0.0, GROWTH_CAP);
    while hi - lo > 1e-9 * (1.0 + hi) {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Smallest constants of the growth bounds over the lattice, for `η` and
/// `E`, under both readings of `|W_t|`.
pub fn growth_check(flow: &FlowField, inv: &InverseField) -> GrowthReport {
    let n = flow.grid.n_steps;
    let w = &flow.w;
    let wt = w.value(n);
    let mut sup = vec![0.0f64; n + 1];
    for i in (0..n).rev() {
        sup[i] = sup[i + 1].max((wt - w.value(i)).abs());
    }
    let lat = flow.lattice;
    let deriv = |j: &Jet| j.x.abs() + j.y.abs() + j.xx.abs() + j.xy.abs() + j.yy.abs();
    let mut fits = Vec::new();
    for norm in [PathNorm::Value, PathNorm::IncrementSup] {
        let m = |i: usize| match norm {
            PathNorm::Value => w.value(i).abs(),
            PathNorm::IncrementSup => sup[i],
        };
        for field in ["eta", "inverse"] {
            let mut vals = Vec::new();
            let mut ders = Vec::new();
            for i in 0..=n {
                for ix in 0..lat.x.n {
                    for iy in 0..lat.y.n {
                        let j = if field == "eta" {
                            Some(flow.node(i, ix, iy))
                        } else {
                            inv.node(i, ix, iy)
                        };
                        if let Some(j) = j {
                            vals.push((m(i), lat.y.value(iy), j.v));
                            ders.push((m(i), deriv(&j)));
                        }
                    }
                }
            }
            fits.push(GrowthFit {
                field,
                norm,
                value_c: fit_value(&vals),
                derivative_c: fit_derivative(&ders),
            });
        }
    }
    GrowthReport { fits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{build_time_grid, sample_backward_path};

    fn path_with_total(n: usize, total: f64, seed: u64) -> BackwardPath {
        let g = build_time_grid(0.0, 1.0, n).unwrap();
        BackwardPath::pinned(g, 1, seed, total).unwrap()
    }

    fn y_lattice() -> FlowLattice {
        FlowLattice::new(Axis::point(0.0), Axis::uniform(-4.0, 4.0, 161).unwrap()).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let w = path_with_total(16, 0.3, 1);
        let flow = Arc::new(solve_flow(&NoiseCoefficient::zero(), &w, &y_lattice()).unwrap());
        assert!(flow.jets.iter().enumerate().all(|(p, j)| *j == Jet::identity(y_lattice().y.value(p % 161))));
        let inv = invert_flow(flow.clone()).unwrap();
        assert!(inv.eps.iter().all(|e| e.is_some()));
        let r = derivative_identity_report(&flow, &inv).unwrap();
        assert!(r.max_violation() < 1e-9, "{r:?}");
        let f: Fn2 = Arc::new(|p: &Point, a| p.y * p.z + a);
        let p = Point::new(0.0, 0.3, 1.2, -0.7);
        assert!((transformed_generator(&f, &flow, 0, &p, 0.5).unwrap() - f(&p, 0.5)).abs() < 1e-14);
    }

    #[test]
    fn linear_flow_closed_form() {
        let beta = 0.5;
        for n in [16, 64] {
            let w = path_with_total(n, 0.3, 7);
            let flow = solve_flow(&NoiseCoefficient::linear(beta), &w, &y_lattice()).unwrap();
            let j = flow.eval(0, 0.0, 1.0).unwrap();
            let exact = (0.15f64).exp();
            assert!((j.v - exact).abs() < 0.2 / n as f64, "{n}: {}", j.v - exact);
            assert!((j.y - j.v).abs() < 1e-14);
            for i in 0..=n {
                let r = flow.eval(i, 0.0, 1.0).unwrap();
                assert!((r.v - r.y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn smooth_path_order_two() {
        let beta = 0.5;
        let err = |n: usize| {
            let g = build_time_grid(0.0, 1.0, n).unwrap();
            let w = BackwardPath::linear(g, 0.3).unwrap();
            let f = solve_flow(&NoiseCoefficient::linear(beta), &w, &y_lattice()).unwrap();
            (f.eval(0, 0.0, 1.0).unwrap().v - 0.15f64.exp()).abs()
        };
        let (e1, e2, e3) = (err(8), err(16), err(32));
        assert!((e1 / e2 - 4.0).abs() < 0.4 && (e2 / e3 - 4.0).abs() < 0.4, "{e1} {e2} {e3}");
    }

    #[test]
    fn linear_inverse_and_roundtrip() {
        let w = path_with_total(32, 0.3, 3);
        let flow = Arc::new(solve_flow(&NoiseCoefficient::linear(0.5), &w, &y_lattice()).unwrap());
        let inv = invert_flow(flow.clone()).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=32 {
            let factor = flow.node(i, 0, 100).v / flow.lattice.y.value(100);
            for iy in 0..161 {
                let y = flow.lattice.y.value(iy);
                if let Some(e) = inv.node(i, 0, iy) {
                    assert!((e.v - y / factor).abs() < 1e-11);
                    worst = worst.max((flow.eval(i, 0.0, e.v).unwrap().v - y).abs());
                }
            }
        }
        assert!(worst < 1e-10);
        let r = derivative_identity_report(&flow, &inv).unwrap();
        assert!(r.max_violation() < 1e-8, "{r:?}");
        let f: Fn2 = Arc::new(|p: &Point, _| p.y.sin() + p.z);
        let p = Point::new(0.0, 0.0, 0.8, 0.4);
        let c = flow.eval(0, 0.0, 1.0).unwrap().v;
        let expect = (1.0 / c) * f(&Point::new(0.0, 0.0, 0.8 * c, c * 0.4), 1.0);
        assert!((transformed_generator(&f, &flow, 0, &p, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn nonlinear_identities_converge_with_spacing() {
        let g = build_time_grid(0.0, 1.0, 32).unwrap();
        let w = sample_backward_path(&g, 1, 5).unwrap();
        let viol = |ny: usize| {
            let lat = FlowLattice::new(Axis::point(0.0), Axis::uniform(-3.0, 3.0, ny).unwrap()).unwrap();
            let flow = Arc::new(solve_flow(&NoiseCoefficient::sine(0.4), &w, &lat).unwrap());
            let inv = invert_flow(flow.clone()).unwrap();
            derivative_identity_report(&flow, &inv).unwrap()
        };
        let (a, b) = (viol(61), viol(121));
        for name in ["tangent_y", "tangent_yy", "inverse_y", "inverse_yy"] {
            let (x, y) = (a.check(name).unwrap().max_violation, b.check(name).unwrap().max_violation);
            assert!(x / y > 3.0, "{name}: {x} {y}");
        }
    }

    #[test]
    fn x_dependent_flow_identities() {
        let g = build_time_grid(0.0, 1.0, 16).unwrap();
        let w = sample_backward_path(&g, 1, 9).unwrap();
        let coef = NoiseCoefficient::new(Arc::new(|_, x: f64, y: f64| 0.3 * (x + y).sin()));
        let report = |n: usize| {
            let lat = FlowLattice::new(
                Axis::uniform(-1.0, 1.0, n).unwrap(),
                Axis::uniform(-3.0, 3.0, 3 * n).unwrap(),
            )
            .unwrap();
            let flow = Arc::new(solve_flow(&coef, &w, &lat).unwrap());
            let inv = invert_flow(flow.clone()).unwrap();
            derivative_identity_report(&flow, &inv).unwrap()
        };
        let (a, b) = (report(21), report(41));
        for name in ["tangent_x", "tangent_xx", "tangent_xy", "inverse_x", "inverse_xx", "inverse_xy", "chain_x", "chain_xx"] {
            let (x, y) = (a.check(name).unwrap().max_violation, b.check(name).unwrap().max_violation);
            assert!(y < 1e-2 && x / y > 2.5, "{name}: {x} {y}");
        }
    }

    #[test]
    fn transform_roundtrip_and_consistency() {
        let w = path_with_total(16, 0.3, 3);
        let flow = Arc::new(solve_flow(&NoiseCoefficient::linear(0.5), &w, &y_lattice()).unwrap());
        let inv = invert_flow(flow.clone()).unwrap();
        let states: Vec<Vec<f64>> = (0..=16).map(|i| (0..=i).map(|j| j as f64 * 0.1).collect()).collect();
        let tr = SolutionTraces {
            y: states.iter().map(|s| s.iter().map(|x| 1.0 + x * x).collect()).collect(),
            z: states.iter().map(|s| s.iter().map(|x| 2.0 * x).collect()).collect(),
            dk: states[..16].iter().map(|s| s.iter().map(|x| 0.01 * x).collect()).collect(),
            states,
        };
        let uv = transform_solution(&tr, &inv).unwrap();
        let back = inverse_transform(&uv, &flow).unwrap();
        for (a, b) in [(&tr.y, &back.y), (&tr.z, &back.z)] {
            for (p, q) in a.iter().flatten().zip(b.iter().flatten()) {
                assert!((p - q).abs() < 1e-8);
            }
        }
        for (p, q) in tr.dk.iter().flatten().zip(back.dk.iter().flatten()) {
            assert!((p - q).abs() < 1e-8 && *q >= 0.0);
        }
        let constant = SolutionTraces {
            y: tr.states.iter().map(|s| vec![1.0; s.len()]).collect(),
            ..tr.clone()
        };
        let u = transform_solution(&constant, &inv).unwrap();
        for i in 0..=16 {
            let factor = flow.node(i, 0, 100).v / flow.lattice.y.value(100);
            assert!((u.y[i][0] - 1.0 / factor).abs() < 1e-11);
        }
        let f: Fn2 = Arc::new(|p: &Point, a| p.y.cos() * a + 0.3 * p.z);
        let r = consistency_check(&f, &inv, &tr, 1.5).unwrap();
        assert!(r.max_discrepancy < 1e-8, "{r:?}");
    }

    #[test]
    fn growth_fits() {
        let w = path_with_total(16, 0.3, 3);
        let zero = Arc::new(solve_flow(&NoiseCoefficient::zero(), &w, &y_lattice()).unwrap());
        let r = growth_check(&zero, &invert_flow(zero.clone()).unwrap());
        assert_eq!(r.fit("eta", PathNorm::Value).unwrap().value_c, Some(0.0));
        let beta = 0.7;
        let coef = NoiseCoefficient::new(Arc::new(move |_, _, _| beta));
        let flow = Arc::new(solve_flow(&coef, &w, &y_lattice()).unwrap());
        let r = growth_check(&flow, &invert_flow(flow.clone()).unwrap());
        let c = r.fit("eta", PathNorm::IncrementSup).unwrap().value_c.unwrap();
        assert!((c - beta).abs() < 1e-9, "{c}");
        assert_eq!(r.fit("eta", PathNorm::Value).unwrap().value_c, None);
        assert!(r.passed());
    }
}

//! Ground truth: Gaussian semigroup, Black–Scholes–Barenblatt and linear
//! SPDE closed forms, an explicit finite-difference solver for the PDE with
//! random coefficients, and a Monte Carlo check of the forward/backward
//! product rule.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::doss::{transformed_generator, FlowField, NoiseCoefficient};
use crate::error::{invalid, Error, Result};
use crate::generators::{ConjugatePair, Fn2, Point};
use crate::paths::{stream_rng, BackwardPath, TimeGrid};
use crate::quadrature::gauss_hermite;

/// Terminal data for the oracles.
#[derive(Clone)]
pub enum TerminalFn {
    /// `Σ c_k x^k`.
    Polynomial(Vec<f64>),
    General(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for TerminalFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalFn::Polynomial(c) => f.debug_tuple("Polynomial").field(c).finish(),
            TerminalFn::General(_) => f.write_str("General"),
        }
    }
}

impl TerminalFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TerminalFn::Polynomial(c) => c.iter().rev().fold(0.0, |acc, ck| acc * x + ck),
            TerminalFn::General(f) => f(x),
        }
    }

    pub fn square() -> Self {
        TerminalFn::Polynomial(vec![0.0, 0.0, 1.0])
    }
}

const GENERAL_NODES: usize = 40;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// `E[N^j]` for standard normal `N`.
fn normal_moment(j: usize) -> f64 {
    if j % 2 == 1 {
        0.0
    } else {
        (1..j).step_by(2).map(|k| k as f64).product()
    }
}

/// `(P_τ φ)(x) = E[φ(x + √(aτ) N)]`.
pub fn heat_semigroup(phi: &TerminalFn, a: f64, tau: f64) -> Result<Arc<dyn Fn(f64) -> f64 + Send + Sync>> {
    if !(a >= 0.0 && tau >= 0.0) {
        return invalid(format!("heat semigroup needs a >= 0 and tau >= 0, got {a}, {tau}"));
    }
    let s = (a * tau).sqrt();
    match phi {
        TerminalFn::Polynomial(c) => {
            let c = c.clone();
            Ok(Arc::new(move |x| {
                let mut out = 0.0;
                for (k, ck) in c.iter().enumerate() {
                    let mut m = 0.0;
                    for j in (0..=k).step_by(2) {
                        m += binomial(k, j) * x.powi((k - j) as i32) * s.powi(j as i32) * normal_moment(j);
                    }
                    out += ck * m;
                }
                out
            }))
        }
        TerminalFn::General(f) => {
            let (nodes, weights) = gauss_hermite(GENERAL_NODES)?;
            let f = f.clone();
            Ok(Arc::new(move |x| nodes.iter().zip(&weights).map(|(n, w)| w * f(x + s * n)).sum()))
        }
    }
}

/// Sign of `φ''` over the line for polynomials of degree `≤ 4`.
fn curvature_sign(c: &[f64]) -> Option<f64> {
    let mut c = c.to_vec();
    while c.len() > 1 && *c.last().unwrap() == 0.0 {
        c.pop();
    }
    if c.len() > 5 {
        return None;
    }
    c.resize(5, 0.0);
    // φ'' = 2 c2 + 6 c3 x + 12 c4 x²
    let (p0, p1, p2) = (2.0 * c[2], 6.0 * c[3], 12.0 * c[4]);
    if p2 == 0.0 {
        return if p1 != 0.0 { None } else { Some(p0.signum() * (p0 != 0.0) as u8 as f64) };
    }
    if p1 * p1 - 4.0 * p0 * p2 > 0.0 {
        return None;
    }
    Some(p2.signum())
}

/// Value of the Black–Scholes–Barenblatt problem with `F ≡ 0` on
/// `[a_low, a_high]` for convex or concave polynomial data.
pub fn bsb_closed_form(phi: &TerminalFn, a_low: f64, a_high: f64, tau: f64, x: f64) -> Result<f64> {
    if !(0.0 < a_low && a_low <= a_high) {
        return invalid(format!("volatility interval [{a_low}, {a_high}] is empty"));
    }
    let TerminalFn::Polynomial(c) = phi else {
        return Err(Error::UnsupportedOracle("terminal data is not a polynomial".into()));
    };
    let a = match curvature_sign(c) {
        Some(s) if s > 0.0 => a_high,
        Some(s) if s < 0.0 => a_low,
        Some(_) => a_low,
        None => {
            return Err(Error::UnsupportedOracle(
                "terminal data has mixed convexity; use the finite-difference oracle".into(),
            ))
        }
    };
    Ok(heat_semigroup(phi, a, tau)?(x))
}

/// `u(t_i, x) = exp(β (W_T − W_{t_i})) (P_{T − t_i} φ)(x)` for
/// `du + ½ u_xx dt + β u ∘ d←W = 0`.
pub fn linear_spde_closed_form(beta: f64, phi: &TerminalFn, w: &BackwardPath, level: usize, x: f64) -> Result<f64> {
    if level > w.grid.n_steps {
        return invalid(format!("level {level} beyond the path"));
    }
    let tau = w.grid.horizon - w.grid.time(level);
    Ok((beta * w.remaining(level)).exp() * heat_semigroup(phi, 1.0, tau)?(x))
}

pub type PdeHamiltonian = Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>;
pub type BoundaryFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Boundary {
    /// Dirichlet values `(t, x) ↦ v`.
    Oracle(BoundaryFn),
    LinearExtrapolation,
}

/// `∂_t v + h̃(t, x, v, Dv, D²v) = 0`, `v(T) = φ`, on `[x_lo, x_hi]`.
#[derive(Clone)]
pub struct RandomPdeProblem {
    pub hhat: PdeHamiltonian,
    pub terminal: TerminalFn,
    pub x_lo: f64,
    pub x_hi: f64,
    pub boundary: Boundary,
    /// Bound on `2 ∂_γ h̃`, used for the stability condition.
    pub max_diffusivity: f64,
}

impl fmt::Debug for RandomPdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RandomPdeProblem")
            .field("terminal", &self.terminal)
            .field("x_lo", &self.x_lo)
            .field("x_hi", &self.x_hi)
            .field("max_diffusivity", &self.max_diffusivity)
            .finish()
    }
}

impl RandomPdeProblem {
    /// Domain `x0 ± 6 √(a_high T)`.
    pub fn centered(hhat: PdeHamiltonian, terminal: TerminalFn, x0: f64, a_high: f64, horizon: f64) -> Self {
        let half = 6.0 * (a_high * horizon).sqrt();
        Self {
            hhat,
            terminal,
            x_lo: x0 - half,
            x_hi: x0 + half,
            boundary: Boundary::LinearExtrapolation,
            max_diffusivity: a_high,
        }
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }
}

/// `h̃(γ) = sup_a {½ a γ − F(a)}` with `F` constant in the state.
pub fn pde_hamiltonian(pair: &ConjugatePair) -> PdeHamiltonian {
    let pair = pair.clone();
    Arc::new(move |t, x, y, z, gamma| {
        let p = Point::new(t, x, y, z);
        pair.domain
            .values()
            .iter()
            .map(|a| 0.5 * a * gamma - pair.eval(&p, *a))
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

/// `h̃` of the transformed equation: `sup_a {½ a γ − f̃(a)}` over the
/// domain of `F`. With `literal_correction` the term `½ g D_y g` at
/// `η(t, x, y)` is added as well.
pub fn doss_pde_hamiltonian(
    pair: &ConjugatePair,
    flow: Arc<FlowField>,
    noise: &NoiseCoefficient,
    literal_correction: bool,
) -> PdeHamiltonian {
    let pair = pair.clone();
    let noise = noise.clone();
    let f: Fn2 = {
        let pair = pair.clone();
        Arc::new(move |p: &Point, a| pair.eval(p, a))
    };
    Arc::new(move |t, x, y, z, gamma| {
        let Ok(level) = flow.level_of(t) else {
            return f64::NAN;
        };
        let p = Point::new(t, x, y, z);
        let mut best = f64::NEG_INFINITY;
        for a in pair.domain.values() {
            match transformed_generator(&f, &flow, level, &p, *a) {
                Ok(ft) => best = best.max(0.5 * a * gamma - ft),
                Err(_) => return f64::NAN,
            }
        }
        if literal_correction {
            let Ok(e) = flow.eval(level, x, y) else {
                return f64::NAN;
            };
            let j = noise.jet(t, x, e.v);
            best += 0.5 * j.v * j.y;
        }
        best
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdSolution {
    pub grid: TimeGrid,
    pub xs: Vec<f64>,
    pub dx: f64,
    /// `v[i][k] = v(t_i, xs[k])`.
    pub v: Vec<Vec<f64>>,
}

impl FdSolution {
    /// Linear interpolation at level `i`.
    pub fn value_at(&self, i: usize, x: f64) -> Result<f64> {
        let (lo, hi) = (self.xs[0], *self.xs.last().unwrap());
        if !(x >= lo && x <= hi) || i >= self.v.len() {
            return Err(Error::Range(format!("({i}, {x}) outside the FD lattice")));
        }
        let s = ((x - lo) / self.dx).min((self.xs.len() - 1) as f64);
        let k = (s.floor() as usize).min(self.xs.len() - 2);
        let u = s - k as f64;
        Ok((1.0 - u) * self.v[i][k] + u * self.v[i][k + 1])
    }
}

/// Explicit backward scheme: central second difference, first difference
/// upwinded on the sign of `∂_z h̃`.
pub fn fd_random_pde(problem: &RandomPdeProblem, grid: &TimeGrid, x_steps: usize) -> Result<FdSolution> {
    if x_steps < 4 || !(problem.x_hi > problem.x_lo) {
        return invalid("FD lattice needs x_hi > x_lo and at least 4 steps");
    }
    let dx = (problem.x_hi - problem.x_lo) / x_steps as f64;
    let dt = grid.dt;
    let ratio = dt * problem.max_diffusivity / (dx * dx);
    if ratio > 1.0 {
        let needed = (grid.span() * problem.max_diffusivity / (dx * dx)).ceil() as usize;
        return Err(Error::Stability {
            reason: format!("dt a / dx² = {ratio} > 1"),
            suggested_steps: needed.max(grid.n_steps + 1),
        });
    }
    let xs: Vec<f64> = (0..=x_steps).map(|k| problem.x_lo + dx * k as f64).collect();
    check_parabolic(problem, grid, &xs)?;
    let n = grid.n_steps;
    let mut v = vec![Vec::new(); n + 1];
    v[n] = xs.iter().map(|x| problem.terminal.eval(*x)).collect();
    for i in (0..n).rev() {
        let t_next = grid.time(i + 1);
        let prev = &v[i + 1];
        let interior: Vec<f64> = (1..x_steps)
            .into_par_iter()
            .map(|k| {
                let x = xs[k];
                let (l, c, r) = (prev[k - 1], prev[k], prev[k + 1]);
                let gamma = (r - 2.0 * c + l) / (dx * dx);
                let zc = (r - l) / (2.0 * dx);
                let h = |z: f64| (problem.hhat)(t_next, x, c, z, gamma);
                let dz = 1e-6 * (1.0 + zc.abs());
                let drift = (h(zc + dz) - h(zc - dz)) / (2.0 * dz);
                let z = if drift >= 0.0 { (r - c) / dx } else { (c - l) / dx };
                c + dt * h(z)
            })
            .collect();
        let mut row = Vec::with_capacity(x_steps + 1);
        row.push(0.0);
        row.extend(interior);
        row.push(0.0);
        let t = grid.time(i);
        match &problem.boundary {
            Boundary::Oracle(b) => {
                row[0] = b(t, xs[0]);
                row[x_steps] = b(t, xs[x_steps]);
            }
            Boundary::LinearExtrapolation => {
                row[0] = 2.0 * row[1] - row[2];
                row[x_steps] = 2.0 * row[x_steps - 1] - row[x_steps - 2];
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Stability {
                reason: format!("non-finite FD value at level {i}"),
                suggested_steps: 2 * n,
            });
        }
        v[i] = row;
    }
    Ok(FdSolution { grid: grid.clone(), xs, dx, v })
}

/// `h̃` nondecreasing in `γ` along a few sampled lines.
fn check_parabolic(problem: &RandomPdeProblem, grid: &TimeGrid, xs: &[f64]) -> Result<()> {
    let gammas: Vec<f64> = (-20..=20).map(|k| k as f64 * 0.5).collect();
    for &i in &[0, grid.n_steps / 2, grid.n_steps] {
        for &x in &[xs[xs.len() / 4], xs[xs.len() / 2], xs[3 * xs.len() / 4]] {
            let y = problem.terminal.eval(x);
            let vals: Vec<f64> = gammas
                .iter()
                .map(|g| (problem.hhat)(grid.time(i), x, y, 0.0, *g))
                .collect();
            if vals.windows(2).any(|w| w[1] < w[0] - 1e-12 * (1.0 + w[0].abs())) {
                return invalid(format!("h̃ decreases in γ at t = {}, x = {x}", grid.time(i)));
            }
        }
    }
    Ok(())
}

/// State seen by the product-rule callbacks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductState {
    pub t: f64,
    pub b: f64,
    pub w: f64,
    /// `W_T − W_t`.
    pub w_rem: f64,
}

pub type ProductFn = Arc<dyn Fn(&ProductState) -> f64 + Send + Sync>;

/// `X = X_0 + ∫ α ds + ∫ β dB + ∫ γ d←W + K`.
#[derive(Clone)]
pub struct ProductProcess {
    pub x0: f64,
    pub alpha: ProductFn,
    pub beta: ProductFn,
    pub gamma: ProductFn,
    /// Level of the continuous finite-variation part.
    pub k: Option<ProductFn>,
}

impl fmt::Debug for ProductProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProductProcess").field("x0", &self.x0).finish()
    }
}

impl ProductProcess {
    fn zero_fn() -> ProductFn {
        Arc::new(|_| 0.0)
    }

    pub fn time() -> Self {
        Self { x0: 0.0, alpha: Arc::new(|_| 1.0), beta: Self::zero_fn(), gamma: Self::zero_fn(), k: None }
    }

    pub fn forward_brownian() -> Self {
        Self { x0: 0.0, alpha: Self::zero_fn(), beta: Arc::new(|_| 1.0), gamma: Self::zero_fn(), k: None }
    }

    pub fn backward_brownian() -> Self {
        Self { x0: 0.0, alpha: Self::zero_fn(), beta: Self::zero_fn(), gamma: Arc::new(|_| 1.0), k: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductReport {
    pub mean_abs_residual: f64,
    pub max_abs_residual: f64,
    pub n_paths: usize,
}

/// Monte Carlo residual of the product formula at `T`. Forward integrals
/// use left points, backward integrals right points. `bracket_sign`
/// multiplies the `γ¹ γ²` term; the correct value is `−1`.
pub fn ito_product_check(
    x1: &ProductProcess,
    x2: &ProductProcess,
    grid: &TimeGrid,
    a: f64,
    n_paths: usize,
    seed: u64,
    bracket_sign: f64,
) -> Result<ProductReport> {
    if n_paths == 0 || !(a > 0.0) {
        return invalid("product check needs paths and a > 0");
    }
    let n = grid.n_steps;
    let dt = grid.dt;
    let residuals: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(seed, p as u64);
            let db: Vec<f64> = (0..n).map(|_| (a * dt).sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
            let dw: Vec<f64> = (0..n).map(|_| dt.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut b = vec![0.0; n + 1];
            let mut w = vec![0.0; n + 1];
            for i in 0..n {
                b[i + 1] = b[i] + db[i];
                w[i + 1] = w[i] + dw[i];
            }
            let st: Vec<ProductState> = (0..=n)
                .map(|i| ProductState { t: grid.time(i), b: b[i], w: w[i], w_rem: w[n] - w[i] })
                .collect();
            let path = |x: &ProductProcess| {
                let mut v = vec![x.x0; n + 1];
                for i in 0..n {
                    let dk = x.k.as_ref().map_or(0.0, |k| k(&st[i + 1]) - k(&st[i]));
                    v[i + 1] = v[i]
                        + (x.alpha)(&st[i]) * dt
                        + (x.beta)(&st[i]) * db[i]
                        + (x.gamma)(&st[i + 1]) * dw[i]
                        + dk;
                }
                v
            };
            let (v1, v2) = (path(x1), path(x2));
            let mut rhs = v1[0] * v2[0];
            for i in 0..n {
                let (s, r) = (&st[i], &st[i + 1]);
                let (b1, b2) = ((x1.beta)(s), (x2.beta)(s));
                let (g1, g2) = ((x1.gamma)(r), (x2.gamma)(r));
                rhs += (a * b1 * b2 + bracket_sign * g1 * g2 + (x1.alpha)(s) * v2[i] + (x2.alpha)(s) * v1[i]) * dt;
                rhs += (v2[i] * b1 + v1[i] * b2) * db[i];
                rhs += (v1[i + 1] * g2 + v2[i + 1] * g1) * dw[i];
                let dk = |x: &ProductProcess| x.k.as_ref().map_or(0.0, |k| k(r) - k(s));
                rhs += v1[i] * dk(x2) + v2[i] * dk(x1);
            }
            v1[n] * v2[n] - rhs
        })
        .collect();
    let mean = residuals.iter().map(|r| r.abs()).sum::<f64>() / n_paths as f64;
    let max = residuals.iter().map(|r| r.abs()).fold(0.0, f64::max);
    Ok(ProductReport { mean_abs_residual: mean, max_abs_residual: max, n_paths })
}

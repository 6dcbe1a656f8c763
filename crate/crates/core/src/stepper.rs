//! One-step conditional-expectation operators on a fixed spatial structure.
//!
//! A [`Stepper`] exposes the states at every time level and, for a given
//! scalar volatility `a`, the maps `v ↦ E[v(X_{i+1}) | X_i]` and
//! `v ↦ E[v(X_{i+1}) ΔX_i | X_i]`. Two implementations exist: the
//! recombining tree (exact for the tree law) and a uniform spatial lattice
//! on which every volatility of a grid acts through a convolution kernel.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::paths::{BrownianTree, TimeGrid, VolatilityGrid};
use crate::quadrature::{gauss_hermite, normal_pdf, normal_sf};

pub trait Stepper: Sync {
    fn grid(&self) -> &TimeGrid;

    fn states(&self, level: usize) -> &[f64];

    /// Index of the starting state at level 0.
    fn root(&self) -> usize;

    fn supports(&self, a: f64) -> bool;

    /// `(E[v(X_{i+1})], E[v(X_{i+1}) ΔX])` for every node of `level`, where
    /// `next` holds `v` on the nodes of `level + 1`.
    fn moments(&self, level: usize, a: f64, next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    fn expect(&self, level: usize, a: f64, next: &[f64]) -> Result<Vec<f64>> {
        Ok(self.moments(level, a, next)?.0)
    }

    /// Adjoint of [`Stepper::expect`] with a per-node volatility: moves
    /// probability mass from `level` to `level + 1`.
    fn push_forward(&self, level: usize, mass: &[f64], a_of: &[f64]) -> Result<Vec<f64>>;

    /// One extra step past the horizon applied to a function of the terminal
    /// state; used for the terminal `Z`.
    fn virtual_moments(&self, a: f64, phi: &(dyn Fn(f64) -> f64 + Sync)) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Mass of every node at every level when the volatility at node
    /// `(i, j)` is `control(i, j)`.
    fn node_masses(&self, control: &dyn Fn(usize, usize) -> f64) -> Result<Vec<Vec<f64>>> {
        let n = self.grid().n_steps;
        let mut root = vec![0.0; self.states(0).len()];
        root[self.root()] = 1.0;
        let mut out = vec![root];
        for i in 0..n {
            let a_of: Vec<f64> = (0..self.states(i).len()).map(|j| control(i, j)).collect();
            let next = self.push_forward(i, &out[i], &a_of)?;
            out.push(next);
        }
        Ok(out)
    }
}

impl Stepper for BrownianTree {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn states(&self, level: usize) -> &[f64] {
        self.nodes(level)
    }

    fn root(&self) -> usize {
        0
    }

    fn supports(&self, a: f64) -> bool {
        self.transition(a).is_ok()
    }

    fn moments(&self, level: usize, a: f64, next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.transition(a)?;
        let d = self.displacements();
        let count = self.nodes(level).len();
        if next.len() != self.nodes(level + 1).len() {
            return invalid("continuation values do not match the next tree level");
        }
        let mut mean = vec![0.0; count];
        let mut cross = vec![0.0; count];
        for j in 0..count {
            let c = self.first_child(j);
            for k in 0..p.len() {
                mean[j] += p[k] * next[c + k];
                cross[j] += p[k] * next[c + k] * d[k];
            }
        }
        Ok((mean, cross))
    }

    fn push_forward(&self, level: usize, mass: &[f64], a_of: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.nodes(level + 1).len()];
        let mut cache: Option<(f64, Vec<f64>)> = None;
        for (j, m) in mass.iter().enumerate() {
            let a = a_of[j];
            let p = match &cache {
                Some((ca, p)) if *ca == a => p.clone(),
                _ => {
                    let p = self.transition(a)?;
                    cache = Some((a, p.clone()));
                    p
                }
            };
            let c = self.first_child(j);
            for (k, pk) in p.iter().enumerate() {
                out[c + k] += m * pk;
            }
        }
        Ok(out)
    }

    fn virtual_moments(&self, a: f64, phi: &(dyn Fn(f64) -> f64 + Sync)) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.transition(a)?;
        let d = self.displacements();
        let last = self.nodes(self.grid.n_steps);
        let mut mean = Vec::with_capacity(last.len());
        let mut cross = Vec::with_capacity(last.len());
        for &x in last {
            let (mut m, mut c) = (0.0, 0.0);
            for k in 0..p.len() {
                let v = phi(x + d[k]);
                m += p[k] * v;
                c += p[k] * v * d[k];
            }
            mean.push(m);
            cross.push(c);
        }
        Ok((mean, cross))
    }
}

/// How a lattice turns a Gaussian step into node weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LatticeQuadrature {
    /// Exact Gaussian expectation of the piecewise-linear interpolant.
    ExactKernel,
    /// Gauss–Hermite rule with the given node count, linear interpolation.
    GaussHermite(usize),
}

/// Convolution weights: `E[v] = Σ_m w[m] v_{j + offset + m}` and
/// `E[v ΔX] = Σ_m c[m] v_{j + offset + m}`.
#[derive(Clone, Debug)]
struct Kernel {
    offset: isize,
    w: Vec<f64>,
    c: Vec<f64>,
}

fn call_payoff(x: f64, tau: f64) -> f64 {
    // E[(S - x)^+] for S ~ N(0, tau^2), x >= 0
    let u = x / tau;
    tau * normal_pdf(u) - x * normal_sf(u)
}

fn call_payoff_sq(x: f64, tau: f64) -> f64 {
    // E[((S - x)^+)^2] for x >= 0
    let u = x / tau;
    (tau * tau + x * x) * normal_sf(u) - x * tau * normal_pdf(u)
}

impl Kernel {
    fn exact(tau: f64, dx: f64) -> Kernel {
        let half = (8.5 * tau).ceil() as isize + 2;
        let g = |x: f64| {
            if x >= 0.0 {
                call_payoff(x, tau)
            } else {
                call_payoff(-x, tau) - x
            }
        };
        let g1 = |x: f64| call_payoff_sq(x, tau) + x * call_payoff(x, tau);
        let len = (2 * half + 1) as usize;
        let mut w = vec![0.0; len];
        let mut c = vec![0.0; len];
        for m in 0..=half {
            let mf = m as f64;
            let wm = g(mf - 1.0) - 2.0 * g(mf) + g(mf + 1.0);
            w[(half + m) as usize] = wm;
            w[(half - m) as usize] = wm;
            if m >= 1 {
                let cm = dx * (g1(mf - 1.0) - 2.0 * g1(mf) + g1(mf + 1.0));
                c[(half + m) as usize] = cm;
                c[(half - m) as usize] = -cm;
            }
        }
        Kernel { offset: -half, w, c }
    }

    fn hermite(n: usize, sd: f64, dx: f64) -> Result<Kernel> {
        let (nodes, weights) = gauss_hermite(n)?;
        let reach = nodes.iter().fold(0.0f64, |m, x| m.max(x.abs())) * sd / dx;
        let half = reach.ceil() as isize + 1;
        let len = (2 * half + 1) as usize;
        let mut w = vec![0.0; len];
        let mut c = vec![0.0; len];
        for (x, p) in nodes.iter().zip(&weights) {
            let shift = x * sd;
            let pos = shift / dx;
            let lo = pos.floor();
            let frac = pos - lo;
            let k = (lo as isize + half) as usize;
            w[k] += p * (1.0 - frac);
            w[k + 1] += p * frac;
            c[k] += p * (1.0 - frac) * shift;
            c[k + 1] += p * frac * shift;
        }
        Ok(Kernel { offset: -half, w, c })
    }
}

/// Uniform spatial lattice shared by all time levels and all volatilities.
/// Values beyond the edges are extended linearly.
#[derive(Debug)]
pub struct SpatialLattice {
    grid: TimeGrid,
    x: Vec<f64>,
    root: usize,
    pub dx: f64,
    pub quadrature: LatticeQuadrature,
    kernels: RwLock<HashMap<u64, Arc<Kernel>>>,
}

impl SpatialLattice {
    /// Lattice with spacing `dx = factor · dt` centered on `x0`, covering
    /// `x0 ± width · sqrt(a_high T)`.
    pub fn new(
        grid: &TimeGrid,
        x0: f64,
        volgrid: &VolatilityGrid,
        factor: f64,
        width: f64,
        quadrature: LatticeQuadrature,
    ) -> Result<Self> {
        if !(factor > 0.0 && width > 0.0) {
            return invalid("lattice factor and width must be positive");
        }
        Self::with_spacing(grid, x0, volgrid, factor * grid.dt, width, quadrature)
    }

    pub fn with_spacing(
        grid: &TimeGrid,
        x0: f64,
        volgrid: &VolatilityGrid,
        dx: f64,
        width: f64,
        quadrature: LatticeQuadrature,
    ) -> Result<Self> {
        if !(dx > 0.0 && dx.is_finite()) {
            return invalid(format!("lattice spacing {dx} must be positive"));
        }
        let tau_min = (volgrid.a_low() * grid.dt).sqrt() / dx;
        if tau_min < 1.0 {
            return Err(Error::Resolution(format!(
                "spacing {dx} exceeds the one-step standard deviation {} of a = {}",
                (volgrid.a_low() * grid.dt).sqrt(),
                volgrid.a_low()
            )));
        }
        let reach = width * (volgrid.a_high() * grid.span()).sqrt();
        let half = (reach / dx).ceil() as usize;
        if half > 2_000_000 {
            return Err(Error::Resolution(format!(
                "lattice with {} nodes is too large",
                2 * half + 1
            )));
        }
        let x = (0..=2 * half)
            .map(|k| x0 + (k as f64 - half as f64) * dx)
            .collect();
        let lat = Self {
            grid: grid.clone(),
            x,
            root: half,
            dx,
            quadrature,
            kernels: RwLock::new(HashMap::new()),
        };
        for &a in volgrid.values() {
            lat.kernel(a)?;
        }
        Ok(lat)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Index of the node nearest `x`, clamped to the lattice.
    pub fn nearest(&self, x: f64) -> usize {
        let k = ((x - self.x[0]) / self.dx).round();
        k.clamp(0.0, (self.x.len() - 1) as f64) as usize
    }

    /// Linear interpolation of node values at `x`, linear extension outside.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let pos = (x - self.x[0]) / self.dx;
        let last = self.x.len() - 1;
        let k = (pos.floor().max(0.0) as usize).min(last - 1);
        let frac = pos - k as f64;
        values[k] + frac * (values[k + 1] - values[k])
    }

    fn kernel(&self, a: f64) -> Result<Arc<Kernel>> {
        if !(a.is_finite() && a > 0.0) {
            return invalid(format!("volatility {a} is not positive definite"));
        }
        let key = a.to_bits();
        if let Some(k) = self.kernels.read().expect("kernel cache").get(&key) {
            return Ok(k.clone());
        }
        let sd = (a * self.grid.dt).sqrt();
        let kernel = match self.quadrature {
            LatticeQuadrature::ExactKernel => Kernel::exact(sd / self.dx, self.dx),
            LatticeQuadrature::GaussHermite(n) => Kernel::hermite(n, sd, self.dx)?,
        };
        let kernel = Arc::new(kernel);
        self.kernels
            .write()
            .expect("kernel cache")
            .insert(key, kernel.clone());
        Ok(kernel)
    }

    #[inline]
    fn extended(values: &[f64], k: isize) -> f64 {
        let last = values.len() as isize - 1;
        if k < 0 {
            values[0] + k as f64 * (values[1] - values[0])
        } else if k > last {
            let l = last as usize;
            values[l] + (k - last) as f64 * (values[l] - values[l - 1])
        } else {
            values[k as usize]
        }
    }

    fn apply(&self, kernel: &Kernel, next: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = next.len() as isize;
        let span = kernel.w.len() as isize;
        (0..n)
            .into_par_iter()
            .map(|j| {
                let start = j + kernel.offset;
                let (mut m, mut c) = (0.0, 0.0);
                if start >= 0 && start + span <= n {
                    let s = &next[start as usize..(start + span) as usize];
                    for k in 0..s.len() {
                        m += kernel.w[k] * s[k];
                        c += kernel.c[k] * s[k];
                    }
                } else {
                    for k in 0..span {
                        let v = Self::extended(next, start + k);
                        m += kernel.w[k as usize] * v;
                        c += kernel.c[k as usize] * v;
                    }
                }
                (m, c)
            })
            .unzip()
    }
}

impl Stepper for SpatialLattice {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn states(&self, _level: usize) -> &[f64] {
        &self.x
    }

    fn root(&self) -> usize {
        self.root
    }

    fn supports(&self, a: f64) -> bool {
        a.is_finite() && a > 0.0
    }

    fn moments(&self, _level: usize, a: f64, next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if next.len() != self.x.len() {
            return invalid("continuation values do not match the lattice");
        }
        let kernel = self.kernel(a)?;
        Ok(self.apply(&kernel, next))
    }

    fn push_forward(&self, _level: usize, mass: &[f64], a_of: &[f64]) -> Result<Vec<f64>> {
        let n = self.x.len() as isize;
        let last = n - 1;
        let mut out = vec![0.0; n as usize];
        let mut cache: Option<(f64, Arc<Kernel>)> = None;
        for (j, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let a = a_of[j];
            let kernel = match &cache {
                Some((ca, k)) if *ca == a => k.clone(),
                _ => {
                    let k = self.kernel(a)?;
                    cache = Some((a, k.clone()));
                    k
                }
            };
            let start = j as isize + kernel.offset;
            for (k, w) in kernel.w.iter().enumerate() {
                let idx = start + k as isize;
                let mw = m * w;
                if idx < 0 {
                    out[0] += (1 - idx) as f64 * mw;
                    out[1] += idx as f64 * mw;
                } else if idx > last {
                    let e = (idx - last) as f64;
                    out[last as usize] += (1.0 + e) * mw;
                    out[last as usize - 1] -= e * mw;
                } else {
                    out[idx as usize] += mw;
                }
            }
        }
        Ok(out)
    }

    fn virtual_moments(&self, a: f64, phi: &(dyn Fn(f64) -> f64 + Sync)) -> Result<(Vec<f64>, Vec<f64>)> {
        let values: Vec<f64> = self.x.iter().map(|x| phi(*x)).collect();
        self.moments(self.grid.n_steps, a, &values)
    }
}

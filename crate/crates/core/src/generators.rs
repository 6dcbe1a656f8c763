//! Nonlinearities of the equation: the Hamiltonian `h`, its Fenchel
//! conjugate `F` in the second-derivative slot, the biconjugate `ĥ`, the
//! backward-noise coefficient `g` and the Stratonovich correction.
//!
//! Scalar setting (`d = l = 1`): `γ`, `a`, `z` and `g` are real numbers.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::paths::{stream_rng, VolatilityGrid};

/// Point `(t, x, y, z)` at which generators are evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point {
    pub fn new(t: f64, x: f64, y: f64, z: f64) -> Self {
        Self { t, x, y, z }
    }

    pub fn with_y(self, y: f64) -> Self {
        Self { y, ..self }
    }

    pub fn with_z(self, z: f64) -> Self {
        Self { z, ..self }
    }
}

/// `(point, γ or a) ↦ value`.
pub type Fn2 = Arc<dyn Fn(&Point, f64) -> f64 + Send + Sync>;
/// `point ↦ value`.
pub type Fn1 = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;

pub const INFINITY_THRESHOLD: f64 = 1e6;

/// Hamiltonian `h(t, x, y, z, γ)` with its discretized `γ`-domain.
#[derive(Clone)]
pub struct HamiltonianSpec {
    pub h: Fn2,
    pub gamma_domain: Vec<f64>,
    /// Claim that `h` is convex and nondecreasing in `γ`.
    pub monotone_convex: bool,
    /// The true domain is all of `ℝ`; the grid is only a resolution hint and
    /// conjugation also probes dilated copies of it.
    pub unbounded: bool,
    pub threshold: f64,
}

impl fmt::Debug for HamiltonianSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianSpec")
            .field("gamma_points", &self.gamma_domain.len())
            .field("monotone_convex", &self.monotone_convex)
            .field("unbounded", &self.unbounded)
            .finish()
    }
}

impl HamiltonianSpec {
    pub fn new(h: Fn2, gamma_domain: Vec<f64>, monotone_convex: bool) -> Result<Self> {
        if gamma_domain.is_empty() {
            return invalid("gamma domain is empty");
        }
        if !gamma_domain.contains(&0.0) {
            return invalid("gamma domain must contain 0");
        }
        let mut gamma_domain = gamma_domain;
        gamma_domain.sort_by(f64::total_cmp);
        gamma_domain.dedup();
        Ok(Self {
            h,
            gamma_domain,
            monotone_convex,
            unbounded: true,
            threshold: INFINITY_THRESHOLD,
        })
    }

    /// Uniform `γ`-grid on `[-extent, extent]` with `2 n + 1` points.
    pub fn uniform(h: Fn2, extent: f64, n: usize, monotone_convex: bool) -> Result<Self> {
        if !(extent > 0.0) || n == 0 {
            return invalid("gamma grid needs a positive extent and at least one point per side");
        }
        let grid = (0..=2 * n)
            .map(|k| extent * (k as f64 - n as f64) / n as f64)
            .collect();
        Self::new(h, grid, monotone_convex)
    }

    pub fn bounded(mut self) -> Self {
        self.unbounded = false;
        self
    }

    pub fn spacing(&self) -> f64 {
        self.gamma_domain
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    pub fn eval(&self, p: &Point, gamma: f64) -> f64 {
        (self.h)(p, gamma)
    }
}

fn discrete_sup(spec: &HamiltonianSpec, p: &Point, a: f64, scale: f64) -> f64 {
    spec.gamma_domain
        .iter()
        .map(|g| {
            let g = g * scale;
            0.5 * a * g - spec.eval(p, g)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `F(a) = sup_γ {½ a γ − h(γ)}` over the `γ`-grid.
///
/// On unbounded domains the grid is also dilated by powers of ten; `+∞` is
/// returned once two successive dilations both exceed the threshold.
pub fn fenchel_conjugate(spec: &HamiltonianSpec, p: &Point, a: f64) -> Result<f64> {
    if spec.gamma_domain.is_empty() {
        return invalid("gamma domain is empty");
    }
    if !(a.is_finite() && a > 0.0) {
        return invalid(format!("volatility {a} is not positive definite"));
    }
    let mut best = discrete_sup(spec, p, a, 1.0);
    if best > spec.threshold {
        return Ok(f64::INFINITY);
    }
    if spec.unbounded {
        let mut above = 0;
        let mut scale = 1.0;
        for _ in 0..9 {
            scale *= 10.0;
            let s = discrete_sup(spec, p, a, scale);
            if s > spec.threshold {
                above += 1;
                if above == 2 {
                    return Ok(f64::INFINITY);
                }
            } else {
                above = 0;
                best = best.max(s);
            }
        }
    }
    Ok(best)
}

/// Conjugate `F` restricted to its (discretized) domain `D_F`.
#[derive(Clone)]
pub struct ConjugatePair {
    pub f: Fn2,
    pub domain: VolatilityGrid,
}

impl fmt::Debug for ConjugatePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConjugatePair")
            .field("domain", &self.domain)
            .finish()
    }
}

/// Result of probing which volatilities give a finite conjugate.
#[derive(Clone, Debug)]
pub struct DomainProbe {
    pub pair: ConjugatePair,
    /// The finite set was the same at every probed point. Sampling cannot
    /// certify independence of the state.
    pub state_independent: bool,
    pub excluded: Vec<f64>,
}

impl ConjugatePair {
    pub fn new(f: Fn2, domain: VolatilityGrid) -> Self {
        Self { f, domain }
    }

    /// `F ≡ 0` on `domain`: the Black–Scholes–Barenblatt conjugate.
    pub fn zero(domain: VolatilityGrid) -> Self {
        Self::new(Arc::new(|_, _| 0.0), domain)
    }

    pub fn eval(&self, p: &Point, a: f64) -> f64 {
        (self.f)(p, a)
    }

    /// Conjugate a Hamiltonian over `candidates`, keeping volatilities where
    /// `F` is finite at every probe point.
    pub fn from_hamiltonian(
        spec: &HamiltonianSpec,
        candidates: &VolatilityGrid,
        probes: &[Point],
    ) -> Result<DomainProbe> {
        if probes.is_empty() {
            return invalid("domain probe needs at least one state");
        }
        let mut keep = Vec::new();
        let mut excluded = Vec::new();
        let mut state_independent = true;
        for &a in candidates.values() {
            let mut finite = 0;
            for p in probes {
                if fenchel_conjugate(spec, p, a)?.is_finite() {
                    finite += 1;
                }
            }
            if finite == probes.len() {
                keep.push(a);
            } else {
                if finite > 0 {
                    state_independent = false;
                }
                excluded.push(a);
            }
        }
        if keep.is_empty() {
            return invalid("conjugate is infinite on every candidate volatility");
        }
        let domain = VolatilityGrid::new(keep)?;
        let owned = spec.clone();
        let f: Fn2 = Arc::new(move |p, a| fenchel_conjugate(&owned, p, a).unwrap_or(f64::INFINITY));
        Ok(DomainProbe {
            pair: ConjugatePair::new(f, domain),
            state_independent,
            excluded,
        })
    }

    /// Volatilities of the domain at which `F` is finite at `p`.
    pub fn finite_at(&self, p: &Point) -> Vec<f64> {
        self.domain
            .values()
            .iter()
            .copied()
            .filter(|a| self.eval(p, *a).is_finite())
            .collect()
    }
}

/// `ĥ(γ) = sup_{a ∈ D_F} {½ a γ − F(a)}`.
pub fn biconjugate(pair: &ConjugatePair, p: &Point, gamma: f64) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for &a in pair.domain.values() {
        let fa = pair.eval(p, a);
        if fa.is_finite() {
            best = best.max(0.5 * a * gamma - fa);
        }
    }
    if best == f64::NEG_INFINITY {
        return invalid("conjugate is infinite on the whole volatility grid");
    }
    Ok(best)
}

/// Tolerance for `ĥ = h` on grids: first order in the spacings.
pub fn biconjugate_tolerance(spec: &HamiltonianSpec, pair: &ConjugatePair, slope_bound: f64) -> f64 {
    spec.spacing().max(pair.domain.spacing()) * slope_bound
}

/// Structural constants declared for a generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Constants {
    /// Lipschitz constant `C` of `F` and of `g` in `y`.
    pub lipschitz: f64,
    /// `z`-contraction `α` of `g`.
    pub alpha: f64,
    pub lambda: f64,
    /// Growth constants of `g g^T ≤ c (1 + y²) + β z²`.
    pub c: f64,
    pub beta: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            lipschitz: 1.0,
            alpha: 0.0,
            lambda: 0.0,
            c: 1.0,
            beta: 0.0,
        }
    }
}

#[derive(Clone)]
pub struct GeneratorBundle {
    pub g: Fn1,
    pub dy_g: Option<Fn1>,
    pub fd_step: f64,
    pub constants: Constants,
}

impl fmt::Debug for GeneratorBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorBundle")
            .field("analytic_dy_g", &self.dy_g.is_some())
            .field("fd_step", &self.fd_step)
            .field("constants", &self.constants)
            .finish()
    }
}

impl GeneratorBundle {
    pub fn new(g: Fn1, constants: Constants) -> Self {
        Self {
            g,
            dy_g: None,
            fd_step: 1e-5,
            constants,
        }
    }

    pub fn zero() -> Self {
        Self::new(Arc::new(|_| 0.0), Constants::default())
    }

    pub fn with_dy_g(mut self, dy_g: Fn1) -> Self {
        self.dy_g = Some(dy_g);
        self
    }

    pub fn g(&self, p: &Point) -> f64 {
        (self.g)(p)
    }

    /// Analytic `D_y g` when registered, central difference otherwise.
    pub fn dy_g(&self, p: &Point) -> f64 {
        match &self.dy_g {
            Some(d) => d(p),
            None => self.dy_g_fd(p, self.fd_step),
        }
    }

    pub fn dy_g_fd(&self, p: &Point, h: f64) -> f64 {
        (self.g(&p.with_y(p.y + h)) - self.g(&p.with_y(p.y - h))) / (2.0 * h)
    }
}

/// `f = F + ½ g D_y g`: the driver of the equivalent backward-Itô equation
/// when `F` drives the Stratonovich one.
pub fn stratonovich_correction(bundle: &GeneratorBundle, f_value: f64, p: &Point) -> f64 {
    f_value + 0.5 * bundle.g(p) * bundle.dy_g(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Largest violation (or smallest margin when passing) and where.
    pub worst_margin: f64,
    pub worst_point: Option<Point>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn sample_point<R: Rng>(rng: &mut R) -> Point {
    Point::new(
        rng.random_range(0.0..1.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    )
}

/// Sampled checks of the structural assumptions on `g` (and `F` if given).
/// Margins are `rhs − lhs`; a check fails when some margin is below
/// `-1e-9 (1 + |rhs|)`.
pub fn validate_assumptions(
    bundle: &GeneratorBundle,
    pair: Option<&ConjugatePair>,
    volgrid: &VolatilityGrid,
    n_samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if n_samples == 0 {
        return invalid("n_samples must be >= 1");
    }
    let k = bundle.constants;
    let mut rng = stream_rng(seed, 0xa55e);
    let mut track = |name: &'static str, margins: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> (f64, f64, Point)| {
        let mut worst = f64::INFINITY;
        let mut worst_point = None;
        let mut passed = true;
        for _ in 0..n_samples {
            let (margin, scale, p) = margins(&mut rng);
            if margin < -1e-9 * (1.0 + scale.abs()) {
                passed = false;
            }
            if margin < worst {
                worst = margin;
                worst_point = Some(p);
            }
        }
        AssumptionCheck {
            name,
            passed,
            worst_margin: worst,
            worst_point,
        }
    };

    let mut checks = Vec::new();
    checks.push(track("g_lipschitz", &mut |rng| {
        let p = sample_point(rng);
        let q = Point::new(p.t, p.x, rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let lhs = (bundle.g(&p) - bundle.g(&q)).powi(2);
        let rhs = k.lipschitz * (p.y - q.y).powi(2) + k.alpha * (p.z - q.z).powi(2);
        (rhs - lhs, rhs, p)
    }));
    checks.push(AssumptionCheck {
        name: "z_contraction",
        passed: k.alpha < 1.0 && k.alpha >= 0.0,
        worst_margin: 1.0 - k.alpha,
        worst_point: None,
    });
    let vol_margin = volgrid
        .values()
        .iter()
        .map(|a| (1.0 - k.lambda) * a - k.alpha)
        .fold(f64::INFINITY, f64::min);
    checks.push(AssumptionCheck {
        name: "volatility_contraction",
        passed: (0.0..1.0).contains(&k.lambda) && vol_margin >= 0.0,
        worst_margin: vol_margin,
        worst_point: None,
    });
    checks.push(track("g_growth", &mut |rng| {
        let p = sample_point(rng);
        let lhs = bundle.g(&p).powi(2);
        let rhs = k.c * (1.0 + p.y * p.y) + k.beta * p.z * p.z;
        (rhs - lhs, rhs, p)
    }));
    if let Some(pair) = pair {
        checks.push(track("f_lipschitz", &mut |rng| {
            let p = sample_point(rng);
            let q = Point::new(p.t, p.x, rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let mut worst = f64::INFINITY;
            let mut scale = 0.0;
            for &a in pair.domain.values() {
                let (fp, fq) = (pair.eval(&p, a), pair.eval(&q, a));
                if !(fp.is_finite() && fq.is_finite()) {
                    continue;
                }
                let rhs = k.lipschitz * ((p.y - q.y).abs() + (a.sqrt() * (p.z - q.z)).abs());
                let m = rhs - (fp - fq).abs();
                if m < worst {
                    worst = m;
                    scale = rhs;
                }
            }
            (worst, scale, p)
        }));
    }
    Ok(AssumptionReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> Point {
        Point::new(0.0, 0.0, 0.0, 0.0)
    }

    #[test]
    fn linear_hamiltonian_has_identity_domain() {
        let spec = HamiltonianSpec::uniform(Arc::new(|_, g| 0.5 * g), 10.0, 200, true).unwrap();
        assert_eq!(fenchel_conjugate(&spec, &origin(), 1.0).unwrap(), 0.0);
        assert_eq!(fenchel_conjugate(&spec, &origin(), 2.0).unwrap(), f64::INFINITY);
        assert_eq!(fenchel_conjugate(&spec, &origin(), 0.9).unwrap(), f64::INFINITY);
        let candidates = VolatilityGrid::uniform(0.5, 2.0, 7).unwrap();
        let probe = ConjugatePair::from_hamiltonian(&spec, &candidates, &[origin()]).unwrap();
        assert_eq!(probe.pair.domain.values(), &[1.0]);
        assert!(probe.state_independent);
    }

    #[test]
    fn quadratic_hamiltonian() {
        let spec = HamiltonianSpec::uniform(Arc::new(|_, g| 0.5 * g * g), 10.0, 200, true)
            .unwrap()
            .bounded();
        let f = fenchel_conjugate(&spec, &origin(), 2.0).unwrap();
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bsb_hamiltonian() {
        let spec = HamiltonianSpec::uniform(
            Arc::new(|_, g: f64| 0.5 * (0.5 * g).max(2.0 * g)),
            10.0,
            200,
            true,
        )
        .unwrap();
        assert_eq!(fenchel_conjugate(&spec, &origin(), 1.0).unwrap(), 0.0);
        assert_eq!(fenchel_conjugate(&spec, &origin(), 3.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn biconjugate_examples() {
        let pair = ConjugatePair::zero(VolatilityGrid::uniform(0.5, 2.0, 16).unwrap());
        assert_eq!(biconjugate(&pair, &origin(), 2.0).unwrap(), 2.0);
        assert_eq!(biconjugate(&pair, &origin(), -2.0).unwrap(), -0.5);
        assert_eq!(biconjugate(&pair, &origin(), 0.0).unwrap(), 0.0);
        let inf = ConjugatePair::new(Arc::new(|_, _| f64::INFINITY), VolatilityGrid::singleton(1.0).unwrap());
        assert!(biconjugate(&inf, &origin(), 1.0).is_err());
        assert!(HamiltonianSpec::new(Arc::new(|_, g| g), vec![], true).is_err());
        assert!(HamiltonianSpec::new(Arc::new(|_, g| g), vec![1.0, 2.0], true).is_err());
    }

    #[test]
    fn correction_examples() {
        let lin = GeneratorBundle::new(Arc::new(|p: &Point| 0.4 * p.y), Constants::default());
        let p = Point::new(0.0, 0.0, 2.0, 0.0);
        assert!((stratonovich_correction(&lin, 1.0, &p) - 1.16).abs() < 1e-9);
        let exact = lin.clone().with_dy_g(Arc::new(|_| 0.4));
        assert!((stratonovich_correction(&exact, 1.0, &p) - 1.16).abs() < 1e-15);
        let flat = GeneratorBundle::new(Arc::new(|p: &Point| p.t + p.x), Constants::default());
        assert_eq!(stratonovich_correction(&flat, 0.7, &p), 0.7);
    }

    #[test]
    fn finite_difference_order() {
        let b = GeneratorBundle::new(Arc::new(|p: &Point| p.y.sin()), Constants::default());
        let p = Point::new(0.0, 0.0, 0.7, 0.0);
        let e1 = (b.dy_g_fd(&p, 1e-2) - 0.7f64.cos()).abs();
        let e2 = (b.dy_g_fd(&p, 5e-3) - 0.7f64.cos()).abs();
        assert!((e1 / e2 - 4.0).abs() < 0.05);
    }

    #[test]
    fn assumption_examples() {
        let vg = VolatilityGrid::uniform(0.5, 2.0, 4).unwrap();
        let contraction = GeneratorBundle::new(
            Arc::new(|p: &Point| 0.3 * p.z),
            Constants { lipschitz: 0.0, alpha: 0.09, lambda: 0.5, c: 0.0, beta: 0.09 },
        );
        let r = validate_assumptions(&contraction, None, &vg, 200, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        let unit = GeneratorBundle::new(
            Arc::new(|p: &Point| p.z),
            Constants { lipschitz: 0.0, alpha: 1.0, lambda: 0.0, c: 0.0, beta: 1.0 },
        );
        let r = validate_assumptions(&unit, None, &vg, 50, 1).unwrap();
        assert!(!r.check("z_contraction").unwrap().passed);
        let beta = 0.7;
        let lin = GeneratorBundle::new(
            Arc::new(move |p: &Point| beta * p.y),
            Constants { lipschitz: beta * beta, alpha: 0.0, lambda: 0.0, c: beta * beta, beta: 0.0 },
        );
        let r = validate_assumptions(&lin, None, &vg, 500, 2).unwrap();
        assert!(r.check("g_growth").unwrap().passed);
        assert!(r.passed());
    }
}

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bdsde::{check_comparison, solve_stepper, BdsdeProblem, SolverOptions};
use crate::doss::{derivative_identity_report, invert_flow, solve_flow, Axis, FlowLattice, NoiseCoefficient};
use crate::error::{Error, Result};
use crate::generators::{fenchel_conjugate, Fn2, HamiltonianSpec, Point};
use crate::oracles::{ito_product_check, ProductProcess};
use crate::paths::{build_time_grid, build_tree_at, sample_backward_path, BrownianTree, VolatilityGrid};
use crate::reflected::{penalization_trace, skorokhod_diagnostic, solve_reflected, Barrier};
use crate::tbdsde::{minimality_gap, solve_dp_on, GapOperator, TbdsdeProblem};

const SUITES: &[&str] = &[
    "comparison",
    "minimality",
    "doss-identities",
    "skorokhod",
    "conjugate-order",
    "ito-product",
];

pub fn suite_names() -> &'static [&'static str] {
    SUITES
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub instances: usize,
    pub violations: usize,
    /// Largest amount by which an instance missed its check (≤ 0 when all
    /// pass; infinite if an instance raised an error).
    pub max_violation: f64,
    /// Smallest failing instance, serialized as TOML.
    pub failing_instance: Option<String>,
    pub failing_error: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

trait Instance: Serialize + Sync {
    fn size(&self) -> usize;
    /// Positive when the property is violated.
    fn violation(&self) -> Result<f64>;
}

fn drive<I: Instance>(suite: &str, seed: u64, instances: Vec<I>) -> Result<SuiteReport> {
    let outcomes: Vec<(f64, Option<String>)> = instances
        .par_iter()
        .map(|inst| match inst.violation() {
            Ok(v) => (v, None),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut smallest: Option<usize> = None;
    for (k, (v, _)) in outcomes.iter().enumerate() {
        worst = worst.max(*v);
        if *v > 0.0 {
            violations += 1;
            if smallest.is_none_or(|s| instances[k].size() < instances[s].size()) {
                smallest = Some(k);
            }
        }
    }
    let failing_instance = match smallest {
        Some(k) => Some(toml::to_string(&instances[k]).map_err(|e| Error::Config(e.to_string()))?),
        None => None,
    };
    Ok(SuiteReport {
        suite: suite.to_string(),
        seed,
        instances: instances.len(),
        violations,
        max_violation: worst,
        failing_error: smallest.and_then(|k| outcomes[k].1.clone()),
        failing_instance,
    })
}

fn generate<I>(seed: u64, count: usize, mut f: impl FnMut(&mut ChaCha8Rng) -> I) -> Vec<I> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| f(&mut rng)).collect()
}

/// Ordered data `ξ₁ ≥ ξ₂`, `f₁ ≥ f₂` with a common `g`, for one classical
/// pair and one second-order pair.
#[derive(Serialize)]
struct ComparisonInstance {
    n_steps: usize,
    a_low: f64,
    a_high: f64,
    w_seed: u64,
    r: f64,
    q: f64,
    s: f64,
    kappa: f64,
    driver_shift: f64,
    beta: f64,
    gamma: f64,
    xi_amp: f64,
    xi_freq: f64,
    xi_gap: f64,
    xi_gap_quad: f64,
}

impl ComparisonInstance {
    fn driver(&self, shift: f64) -> Fn2 {
        let (r, q, s, k) = (self.r, self.q, self.s, self.kappa);
        Arc::new(move |p: &Point, a| r * p.y + q * p.z + s * p.x.cos() + k * a + shift)
    }

    fn problem(&self, upper: bool) -> Result<TbdsdeProblem> {
        let (amp, freq) = (self.xi_amp, self.xi_freq);
        let (gap, quad) = if upper { (self.xi_gap, self.xi_gap_quad) } else { (0.0, 0.0) };
        let (beta, gamma) = (self.beta, self.gamma);
        Ok(TbdsdeProblem::new(
            Arc::new(move |x| amp * (freq * x).sin() + gap + quad * x * x),
            self.driver(if upper { self.driver_shift } else { 0.0 }),
            Arc::new(move |p: &Point| beta * p.y + gamma * p.x.sin()),
            VolatilityGrid::uniform(self.a_low, self.a_high, 3)?,
            self.r.abs() + self.q.abs(),
        ))
    }
}

impl Instance for ComparisonInstance {
    fn size(&self) -> usize {
        self.n_steps
    }

    fn violation(&self) -> Result<f64> {
        let grid = build_time_grid(0.0, 1.0, self.n_steps)?;
        let tree = BrownianTree::for_volatilities(&grid, 0.0, &VolatilityGrid::uniform(self.a_low, self.a_high, 3)?)?;
        let w = sample_backward_path(&grid, 1, self.w_seed)?;
        let opts = SolverOptions::default();
        let (hi, lo) = (self.problem(true)?, self.problem(false)?);
        let (c1, c2) = (hi.at_volatility(self.a_low), lo.at_volatility(self.a_low));
        let (s1, s2) = (
            solve_stepper(&c1, &tree, &w, &opts)?,
            solve_stepper(&c2, &tree, &w, &opts)?,
        );
        let report = check_comparison(&s1, &s2, &c1, &c2, &tree, &opts)?;
        if !report.hypotheses_hold {
            return Err(Error::Consistency("generated instance is not ordered".into()));
        }
        let classical = -report.worst_margin - report.epsilon;
        let (d1, d2) = (solve_dp_on(&hi, &tree, &w, &opts)?, solve_dp_on(&lo, &tree, &w, &opts)?);
        let scale = d1.y.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = d1
            .y
            .iter()
            .flatten()
            .zip(d2.y.iter().flatten())
            .fold(f64::INFINITY, |m, (a, b)| m.min(a - b));
        Ok(classical.max(-worst - 10.0 * opts.tolerance * (1.0 + scale)))
    }
}

fn comparison_instances(seed: u64) -> Vec<ComparisonInstance> {
    generate(seed, 100, |rng| {
        let a_low = rng.random_range(0.3..1.0);
        ComparisonInstance {
            n_steps: rng.random_range(8..=24),
            a_low,
            a_high: a_low + rng.random_range(0.1..1.0),
            w_seed: rng.random(),
            r: rng.random_range(-1.0..1.0),
            q: rng.random_range(-0.2..0.2),
            s: rng.random_range(-1.0..1.0),
            kappa: rng.random_range(-1.0..1.0),
            driver_shift: rng.random_range(0.0..0.5),
            beta: rng.random_range(-0.3..0.3),
            gamma: rng.random_range(-0.5..0.5),
            xi_amp: rng.random_range(-2.0..2.0),
            xi_freq: rng.random_range(0.5..3.0),
            xi_gap: rng.random_range(0.0..0.5),
            xi_gap_quad: rng.random_range(0.0..0.5),
        }
    })
}

/// Convex (or concave) polynomial terminal data with `F = 0`, `g = βy`:
/// a constant extreme volatility is optimal, so the gap must vanish.
#[derive(Serialize)]
struct MinimalityInstance {
    n_steps: usize,
    a_low: f64,
    a_high: f64,
    n_points: usize,
    w_seed: u64,
    sign: f64,
    c1: f64,
    c2: f64,
    c4: f64,
    beta: f64,
}

impl Instance for MinimalityInstance {
    fn size(&self) -> usize {
        self.n_steps * self.n_points
    }

    fn violation(&self) -> Result<f64> {
        let grid = build_time_grid(0.0, 1.0, self.n_steps)?;
        let volgrid = VolatilityGrid::uniform(self.a_low, self.a_high, self.n_points)?;
        let tree = BrownianTree::for_volatilities(&grid, 0.0, &volgrid)?;
        let w = sample_backward_path(&grid, 1, self.w_seed)?;
        let (sign, c1, c2, c4, beta) = (self.sign, self.c1, self.c2, self.c4, self.beta);
        let problem = TbdsdeProblem::new(
            Arc::new(move |x| sign * (c1 * x + c2 * x * x + c4 * x.powi(4))),
            Arc::new(|_, _| 0.0),
            Arc::new(move |p: &Point| beta * p.y),
            volgrid,
            0.0,
        );
        let opts = SolverOptions::default();
        let sol = solve_dp_on(&problem, &tree, &w, &opts)?;
        let gap = minimality_gap(&problem, &sol, &tree, &w, GapOperator::Scheme, &opts)?;
        let eps = 1e-9 * (1.0 + sol.y0().abs());
        let worst_gap = gap.gap.iter().fold(f64::NEG_INFINITY, |m, g| m.max(*g));
        Ok((worst_gap - eps).max(-sol.k.most_negative - eps))
    }
}

fn minimality_instances(seed: u64) -> Vec<MinimalityInstance> {
    generate(seed, 50, |rng| {
        let a_low = rng.random_range(0.3..1.0);
        MinimalityInstance {
            n_steps: rng.random_range(8..=32),
            a_low,
            a_high: a_low + rng.random_range(0.1..1.5),
            n_points: rng.random_range(2..=5),
            w_seed: rng.random(),
            sign: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            c1: rng.random_range(-1.0..1.0),
            c2: rng.random_range(0.1..1.0),
            c4: rng.random_range(0.0..0.2),
            beta: rng.random_range(-0.5..0.5),
        }
    })
}

/// Flow of `g = βy`: linear in `y`, so interpolation is exact and the
/// derivative identities hold to rounding.
#[derive(Serialize)]
struct DossInstance {
    n_steps: usize,
    beta: f64,
    w_seed: u64,
}

impl Instance for DossInstance {
    fn size(&self) -> usize {
        self.n_steps
    }

    fn violation(&self) -> Result<f64> {
        let grid = build_time_grid(0.0, 1.0, self.n_steps)?;
        let w = sample_backward_path(&grid, 1, self.w_seed)?;
        let lattice = FlowLattice::new(Axis::point(0.0), Axis::uniform(-4.0, 4.0, 161)?)?;
        let flow = Arc::new(solve_flow(&NoiseCoefficient::linear(self.beta), &w, &lattice)?);
        let inv = invert_flow(flow.clone())?;
        let identities = derivative_identity_report(&flow, &inv)?.max_violation();
        let mut roundtrip: f64 = 0.0;
        for i in 0..=self.n_steps {
            for iy in 0..161 {
                if let Some(e) = inv.node(i, 0, iy) {
                    let y = lattice.y.value(iy);
                    roundtrip = roundtrip.max((flow.eval(i, 0.0, e.v)?.v - y).abs());
                }
            }
        }
        Ok((identities - 1e-8).max(roundtrip - 1e-9))
    }
}

fn doss_instances(seed: u64) -> Vec<DossInstance> {
    generate(seed, 50, |rng| DossInstance {
        n_steps: rng.random_range(8..=64),
        beta: rng.random_range(-1.0..1.0),
        w_seed: rng.random(),
    })
}

/// Barrier `S = c0 + c1 x + c2 sin x − c3 t` below `ξ = S_T + gap + 0.1 x²`.
#[derive(Serialize)]
struct SkorokhodInstance {
    n_steps: usize,
    a: f64,
    w_seed: u64,
    c0: f64,
    c1: f64,
    c2: f64,
    c3: f64,
    gap: f64,
    r: f64,
    beta: f64,
}

impl Instance for SkorokhodInstance {
    fn size(&self) -> usize {
        self.n_steps
    }

    fn violation(&self) -> Result<f64> {
        let grid = build_time_grid(0.0, 1.0, self.n_steps)?;
        let tree = build_tree_at(&grid, 0.0, self.a, 3)?;
        let w = sample_backward_path(&grid, 1, self.w_seed)?;
        let (c0, c1, c2, c3, gap, r, beta) = (self.c0, self.c1, self.c2, self.c3, self.gap, self.r, self.beta);
        let s = move |t: f64, x: f64| c0 + c1 * x + c2 * x.sin() - c3 * t;
        let barrier = Barrier::new(Arc::new(s));
        let problem = BdsdeProblem::new(
            Arc::new(move |x| s(1.0, x) + gap + 0.1 * x * x),
            Arc::new(move |p: &Point| r * p.y),
            Arc::new(move |p: &Point| beta * p.y),
            self.a,
            r.abs(),
        );
        let opts = SolverOptions::default();
        let sol = solve_reflected(&problem, &barrier, &tree, &w, &opts)?;
        let scale = sol.y.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-10 * (1.0 + scale);
        let mut worst = f64::NEG_INFINITY;
        for (yl, sl) in sol.y.iter().zip(&sol.barrier) {
            for (y, b) in yl.iter().zip(sl) {
                worst = worst.max(b - y - tol);
            }
        }
        for d in sol.dk.iter().flatten() {
            worst = worst.max(-d - tol);
        }
        worst = worst.max(skorokhod_diagnostic(&sol, &tree, self.a)?.abs() - tol);
        let trace = penalization_trace(&problem, &barrier, &[1.0, 4.0, 16.0], &tree, &w, &opts)?;
        for pair in trace.windows(2) {
            worst = worst.max(pair[0].1 - pair[1].1 - tol);
        }
        Ok(worst)
    }
}

fn skorokhod_instances(seed: u64) -> Vec<SkorokhodInstance> {
    generate(seed, 50, |rng| SkorokhodInstance {
        n_steps: rng.random_range(8..=32),
        a: rng.random_range(0.5..2.0),
        w_seed: rng.random(),
        c0: rng.random_range(-1.0..1.0),
        c1: rng.random_range(-1.0..1.0),
        c2: rng.random_range(-1.0..1.0),
        c3: rng.random_range(-1.0..1.0),
        gap: rng.random_range(0.0..0.5),
        r: rng.random_range(-0.5..0.5),
        beta: rng.random_range(-0.3..0.3),
    })
}

/// `h₂ = h₁ + c + e γ²` with `h₁ = p2 γ² + p1 γ + p0 + q y`.
#[derive(Serialize)]
struct ConjugateInstance {
    p0: f64,
    p1: f64,
    p2: f64,
    q: f64,
    c: f64,
    e: f64,
    y: f64,
    volatilities: Vec<f64>,
}

impl Instance for ConjugateInstance {
    fn size(&self) -> usize {
        self.volatilities.len()
    }

    fn violation(&self) -> Result<f64> {
        let (p0, p1, p2, q, c, e) = (self.p0, self.p1, self.p2, self.q, self.c, self.e);
        let h1: Fn2 = Arc::new(move |p: &Point, g| p2 * g * g + p1 * g + p0 + q * p.y);
        let h2: Fn2 = Arc::new(move |p: &Point, g| p2 * g * g + p1 * g + p0 + q * p.y + c + e * g * g);
        let s1 = HamiltonianSpec::uniform(h1, 10.0, 200, false)?;
        let s2 = HamiltonianSpec::uniform(h2, 10.0, 200, false)?;
        let p = Point::new(0.0, 0.0, self.y, 0.0);
        let mut worst = f64::NEG_INFINITY;
        for &a in &self.volatilities {
            let (f1, f2) = (fenchel_conjugate(&s1, &p, a)?, fenchel_conjugate(&s2, &p, a)?);
            let miss = if f1 == f64::INFINITY { f64::NEG_INFINITY } else { f2 - f1 - 1e-12 * (1.0 + f1.abs()) };
            worst = worst.max(miss);
        }
        Ok(worst)
    }
}

fn conjugate_instances(seed: u64) -> Vec<ConjugateInstance> {
    generate(seed, 100, |rng| {
        let n = rng.random_range(1..=8);
        ConjugateInstance {
            p0: rng.random_range(-1.0..1.0),
            p1: rng.random_range(-1.0..1.0),
            p2: rng.random_range(0.0..1.0),
            q: rng.random_range(-1.0..1.0),
            c: rng.random_range(0.0..1.0),
            e: rng.random_range(0.0..1.0),
            y: rng.random_range(-2.0..2.0),
            volatilities: (0..n).map(|_| rng.random_range(0.1..4.0)).collect(),
        }
    })
}

/// Product rule for `B·B`, `W·W` and `W·B`; the flipped bracket sign for
/// `W·W` must leave a residual near `2T`.
#[derive(Serialize)]
struct ProductInstance {
    n_steps: usize,
    a: f64,
    seed: u64,
    kind: String,
}

impl Instance for ProductInstance {
    fn size(&self) -> usize {
        self.n_steps
    }

    fn violation(&self) -> Result<f64> {
        let grid = build_time_grid(0.0, 1.0, self.n_steps)?;
        let (b, w) = (ProductProcess::forward_brownian(), ProductProcess::backward_brownian());
        let check = |x1: &ProductProcess, x2: &ProductProcess, sign: f64| {
            ito_product_check(x1, x2, &grid, self.a, 200, self.seed, sign).map(|r| r.mean_abs_residual)
        };
        let band = 4.0 * (2.0 / self.n_steps as f64).sqrt();
        Ok(match self.kind.as_str() {
            "forward" => check(&b, &b, -1.0)? - self.a * band,
            "backward" => (check(&w, &w, -1.0)? - band).max(1.0 - check(&w, &w, 1.0)?),
            _ => check(&w, &b, -1.0)? - 1e-10,
        })
    }
}

fn product_instances(seed: u64) -> Vec<ProductInstance> {
    generate(seed, 30, |rng| ProductInstance {
        n_steps: [32, 64, 128][rng.random_range(0..3)],
        a: rng.random_range(0.5..2.0),
        seed: rng.random(),
        kind: ["forward", "backward", "cross"][rng.random_range(0..3)].to_string(),
    })
}

/// Run a named randomized property suite with a fixed instance count.
pub fn property_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "comparison" => drive(name, seed, comparison_instances(seed)),
        "minimality" => drive(name, seed, minimality_instances(seed)),
        "doss-identities" => drive(name, seed, doss_instances(seed)),
        "skorokhod" => drive(name, seed, skorokhod_instances(seed)),
        "conjugate-order" => drive(name, seed, conjugate_instances(seed)),
        "ito-product" => drive(name, seed, product_instances(seed)),
        other => Err(Error::Config(format!(
            "unknown suite {other:?} (known: {})",
            SUITES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for name in SUITES {
            let r = property_suite(name, 7).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.instances > 0);
        }
        assert!(property_suite("nope", 1).is_err());
    }

    #[test]
    fn failing_instance_is_serialized() {
        let bad = vec![
            DossInstance { n_steps: 40, beta: 0.1, w_seed: 1 },
            DossInstance { n_steps: 12, beta: 0.1, w_seed: 2 },
        ];
        struct Flip(DossInstance);
        impl Serialize for Flip {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                self.0.serialize(s)
            }
        }
        impl Instance for Flip {
            fn size(&self) -> usize {
                self.0.size()
            }
            fn violation(&self) -> Result<f64> {
                Ok(1.0 - self.0.violation()?.min(0.0))
            }
        }
        let r = drive("flip", 0, bad.into_iter().map(Flip).collect()).unwrap();
        assert_eq!(r.violations, 2);
        assert!(r.failing_instance.unwrap().contains("n_steps = 12"));
    }
}

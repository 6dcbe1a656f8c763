//! Solution norms on discrete traces: `sup_a E[sup_t |Y_t|^p]`,
//! `sup_a E[∫ a Z² dt]`, `sup_a E[K_T²]`, the integrability statistics of
//! the zero-point generators and the conditional second moment of `ξ`.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::paths::VolatilityGrid;
use crate::stepper::Stepper;

/// Node traces of one solution under the constant volatility `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormInput {
    pub a: f64,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// `ΔK` between levels `i` and `i + 1`, attached to level `i`.
    pub dk: Option<Vec<Vec<f64>>>,
    /// `F̂(t, x, 0, 0)` at the nodes.
    pub f0: Option<Vec<Vec<f64>>>,
    /// `g(t, x, 0, 0)` at the nodes.
    pub g0: Option<Vec<Vec<f64>>>,
}

impl NormInput {
    pub fn new(a: f64, y: Vec<Vec<f64>>, z: Vec<Vec<f64>>) -> Self {
        Self { a, y, z, dk: None, f0: None, g0: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormReport {
    pub exponent: f64,
    /// `sup_a E[sup_t |Y_t|^p]`. Exact unless the threshold cap was hit, in
    /// which case this is an upper bound and `d_norm_lower` a lower one.
    pub d_norm: f64,
    pub d_norm_lower: f64,
    pub d2_norm: f64,
    pub h2_norm: f64,
    pub i2_norm: f64,
    /// `sup_a E[∫ |F̂⁰|^{2+ε} dt]`.
    pub phi: f64,
    /// `sup_a E[∫ |g⁰|^{2+ε} dt]`.
    pub psi: f64,
    /// `max_a max_{i, node} E[|Y_T|² | node]`.
    pub xi_l2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormOptions {
    pub exponent: f64,
    pub epsilon: f64,
    pub max_thresholds: usize,
}

impl Default for NormOptions {
    fn default() -> Self {
        Self { exponent: 2.0, epsilon: 0.5, max_thresholds: 4096 }
    }
}

fn check_shape(stepper: &dyn Stepper, name: &str, v: &[Vec<f64>], levels: usize) -> Result<()> {
    if v.len() != levels {
        return invalid(format!("{name} has {} levels, expected {levels}", v.len()));
    }
    for (i, row) in v.iter().enumerate() {
        if row.len() != stepper.states(i).len() {
            return invalid(format!("{name} level {i} has {} nodes, expected {}", row.len(), stepper.states(i).len()));
        }
    }
    Ok(())
}

/// `E[max_i v_i(X_i)]` by `∫ P(max ≥ u) du` over the distinct node values.
/// Returns `(lower, upper)`, equal when every distinct value is a threshold.
pub fn expected_running_max(
    stepper: &dyn Stepper,
    a: f64,
    values: &[Vec<f64>],
    max_thresholds: usize,
) -> Result<(f64, f64)> {
    let n = stepper.grid().n_steps;
    check_shape(stepper, "values", values, n + 1)?;
    let mut all: Vec<f64> = values.iter().flatten().copied().filter(|v| *v > 0.0).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    if all.is_empty() {
        return Ok((0.0, 0.0));
    }
    let exact = all.len() <= max_thresholds.max(1);
    let thresholds: Vec<f64> = if exact {
        all
    } else {
        let m = max_thresholds.max(1);
        let mut t: Vec<f64> = (1..=m).map(|k| all[(k * all.len()) / m - 1]).collect();
        t.dedup();
        t
    };
    let survival = |c: f64| -> Result<f64> {
        let mut mass = vec![0.0; stepper.states(0).len()];
        mass[stepper.root()] = 1.0;
        for i in 0..=n {
            for (m, v) in mass.iter_mut().zip(&values[i]) {
                if *v >= c {
                    *m = 0.0;
                }
            }
            if i < n {
                mass = stepper.push_forward(i, &mass, &vec![a; mass.len()])?;
            }
        }
        Ok(mass.iter().sum())
    };
    let tail: Vec<f64> = thresholds
        .par_iter()
        .map(|c| survival(*c).map(|s| 1.0 - s))
        .collect::<Result<_>>()?;
    let (mut lo, mut hi) = (0.0, 0.0);
    let mut prev = 0.0;
    let mut prev_tail = 1.0;
    for (c, p) in thresholds.iter().zip(&tail) {
        lo += (c - prev) * p;
        hi += (c - prev) * if exact { *p } else { prev_tail };
        prev = *c;
        prev_tail = *p;
    }
    if !exact {
        let top = *values.iter().flatten().fold(&0.0, |m, v| if v > m { v } else { m });
        hi += (top - prev) * prev_tail;
    }
    Ok((lo, hi))
}

/// `E[(Σ_i ΔK_i)²]` by the backward recursion of the first two moments.
pub fn expected_square_sum(stepper: &dyn Stepper, a: f64, dk: &[Vec<f64>]) -> Result<f64> {
    let n = stepper.grid().n_steps;
    check_shape(stepper, "dk", dk, n)?;
    let mut m1 = vec![0.0; stepper.states(n).len()];
    let mut m2 = m1.clone();
    for i in (0..n).rev() {
        let e1 = stepper.expect(i, a, &m1)?;
        let e2 = stepper.expect(i, a, &m2)?;
        m1 = dk[i].iter().zip(&e1).map(|(d, e)| d + e).collect();
        m2 = dk[i].iter().zip(e1.iter().zip(&e2)).map(|(d, (e1, e2))| d * d + 2.0 * d * e1 + e2).collect();
    }
    Ok(m2[stepper.root()])
}

fn integrate(masses: &[Vec<f64>], v: &[Vec<f64>], dt: f64, p: f64, levels: usize) -> f64 {
    (0..levels)
        .map(|i| masses[i].iter().zip(&v[i]).map(|(m, x)| m * x.abs().powf(p)).sum::<f64>() * dt)
        .sum()
}

/// Norms over the volatility grid. Every grid volatility needs a trace.
pub fn compute_norms(
    inputs: &[NormInput],
    volgrid: &VolatilityGrid,
    stepper: &dyn Stepper,
    opts: &NormOptions,
) -> Result<NormReport> {
    if !(opts.exponent >= 1.0) || !(opts.epsilon > 0.0) {
        return invalid("norm exponent must be >= 1 and epsilon > 0");
    }
    let grid = stepper.grid();
    let (n, dt) = (grid.n_steps, grid.dt);
    let mut report = NormReport {
        exponent: opts.exponent,
        d_norm: 0.0,
        d_norm_lower: 0.0,
        d2_norm: 0.0,
        h2_norm: 0.0,
        i2_norm: 0.0,
        phi: 0.0,
        psi: 0.0,
        xi_l2: 0.0,
    };
    for &a in volgrid.values() {
        let Some(input) = inputs.iter().find(|t| (t.a - a).abs() <= 1e-12 * a) else {
            return invalid(format!("no trace for volatility {a}"));
        };
        check_shape(stepper, "y", &input.y, n + 1)?;
        check_shape(stepper, "z", &input.z, n + 1)?;
        let masses = stepper.node_masses(&|_, _| a)?;
        let pow = |p: f64| -> Vec<Vec<f64>> {
            input.y.iter().map(|r| r.iter().map(|y| y.abs().powf(p)).collect()).collect()
        };
        let (lo, hi) = expected_running_max(stepper, a, &pow(opts.exponent), opts.max_thresholds)?;
        report.d_norm = report.d_norm.max(hi);
        report.d_norm_lower = report.d_norm_lower.max(lo);
        let (_, d2) = expected_running_max(stepper, a, &pow(2.0), opts.max_thresholds)?;
        report.d2_norm = report.d2_norm.max(d2);
        report.h2_norm = report.h2_norm.max(a * integrate(&masses, &input.z, dt, 2.0, n));
        if let Some(dk) = &input.dk {
            report.i2_norm = report.i2_norm.max(expected_square_sum(stepper, a, dk)?);
        }
        let q = 2.0 + opts.epsilon;
        if let Some(f0) = &input.f0 {
            check_shape(stepper, "f0", f0, n + 1)?;
            report.phi = report.phi.max(integrate(&masses, f0, dt, q, n));
        }
        if let Some(g0) = &input.g0 {
            check_shape(stepper, "g0", g0, n + 1)?;
            report.psi = report.psi.max(integrate(&masses, g0, dt, q, n));
        }
        let mut cond: Vec<f64> = input.y[n].iter().map(|y| y * y).collect();
        let mut worst = cond.iter().copied().fold(0.0, f64::max);
        for i in (0..n).rev() {
            cond = stepper.expect(i, a, &cond)?;
            worst = worst.max(cond.iter().copied().fold(0.0, f64::max));
        }
        report.xi_l2 = report.xi_l2.max(worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{build_time_grid, build_tree, Branching, BrownianTree};

    fn brute_force(tree: &BrownianTree, values: &[Vec<f64>]) -> f64 {
        let n = tree.grid.n_steps;
        let mut total = 0.0;
        for bits in 0..(1u32 << n) {
            let mut j = 0;
            let mut m = values[0][0];
            for i in 0..n {
                j += ((bits >> i) & 1) as usize;
                m = m.max(values[i + 1][j]);
            }
            total += m / (1u32 << n) as f64;
        }
        total
    }

    #[test]
    fn running_max_matches_enumeration() {
        let g = build_time_grid(0.0, 1.0, 10).unwrap();
        let tree = build_tree(&g, 1.0, 2).unwrap();
        assert_eq!(tree.branching, Branching::Binomial);
        let sq: Vec<Vec<f64>> = (0..=10).map(|i| tree.states(i).iter().map(|x| x * x).collect()).collect();
        let (lo, hi) = expected_running_max(&tree, 1.0, &sq, 4096).unwrap();
        let bf = brute_force(&tree, &sq);
        assert_eq!(lo, hi);
        assert!((lo - bf).abs() < 1e-12, "{lo} {bf}");
        let (l2, h2) = expected_running_max(&tree, 1.0, &sq, 5).unwrap();
        assert!(l2 <= bf + 1e-12 && h2 >= bf - 1e-12 && l2 < h2);
    }

    #[test]
    fn zero_and_scaling() {
        let g = build_time_grid(0.0, 1.0, 6).unwrap();
        let tree = build_tree(&g, 1.0, 2).unwrap();
        let zero: Vec<Vec<f64>> = (0..=6).map(|i| vec![0.0; tree.states(i).len()]).collect();
        let vg = VolatilityGrid::singleton(1.0).unwrap();
        let mut input = NormInput::new(1.0, zero.clone(), zero.clone());
        input.dk = Some(zero[..6].to_vec());
        input.f0 = Some(zero.clone());
        input.g0 = Some(zero.clone());
        let r = compute_norms(&[input], &vg, &tree, &NormOptions::default()).unwrap();
        assert_eq!((r.d_norm, r.h2_norm, r.i2_norm, r.phi, r.psi, r.xi_l2), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));

        let y: Vec<Vec<f64>> = (0..=6).map(|i| tree.states(i).to_vec()).collect();
        let base = compute_norms(&[NormInput::new(1.0, y.clone(), y.clone())], &vg, &tree, &NormOptions::default()).unwrap();
        let k = 3.0;
        let scaled: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|v| k * v).collect()).collect();
        let s = compute_norms(&[NormInput::new(1.0, scaled.clone(), scaled)], &vg, &tree, &NormOptions::default()).unwrap();
        assert!((s.d2_norm - k * k * base.d2_norm).abs() < 1e-12);
        assert!((s.h2_norm - k * k * base.h2_norm).abs() < 1e-12);
        assert!((base.xi_l2 - 6.0).abs() < 1e-12);
        let missing = compute_norms(&[NormInput::new(1.0, y.clone(), y)], &VolatilityGrid::uniform(0.5, 1.0, 2).unwrap(), &tree, &NormOptions::default());
        assert!(missing.is_err());
    }

    #[test]
    fn square_sum_of_constant_increments() {
        let g = build_time_grid(0.0, 1.0, 5).unwrap();
        let tree = build_tree(&g, 1.0, 2).unwrap();
        let dk: Vec<Vec<f64>> = (0..5).map(|i| vec![0.1; tree.states(i).len()]).collect();
        assert!((expected_square_sum(&tree, 1.0, &dk).unwrap() - 0.25).abs() < 1e-14);
    }
}

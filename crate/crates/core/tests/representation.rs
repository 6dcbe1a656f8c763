use std::sync::Arc;

use bdsde_core::bdsde::SolverOptions;
use bdsde_core::generators::Point;
use bdsde_core::paths::{build_time_grid, BackwardPath, BrownianTree, VolatilityGrid};
use bdsde_core::tbdsde::{representation_check, solve_dp_on, TbdsdeProblem};

const STEPS: usize = 9;

fn xi(x: f64) -> f64 {
    x * x.abs()
}

fn setup() -> (TbdsdeProblem, BrownianTree, BackwardPath) {
    let grid = build_time_grid(0.0, 1.0, STEPS).unwrap();
    let volgrid = VolatilityGrid::new(vec![0.5, 2.0]).unwrap();
    let tree = BrownianTree::for_volatilities(&grid, 0.2, &volgrid).unwrap();
    let problem = TbdsdeProblem::new(Arc::new(xi), Arc::new(|_, _| 0.0), Arc::new(|_: &Point| 0.0), volgrid, 0.0);
    let w = BackwardPath::zero(grid, 1).unwrap();
    (problem, tree, w)
}

fn terminal_values(tree: &BrownianTree) -> Vec<f64> {
    tree.nodes(STEPS).iter().map(|x| xi(*x)).collect()
}

/// Optimal feedback control by direct backward induction on the tree.
fn feedback_value(tree: &BrownianTree, vols: &[f64]) -> f64 {
    let probs: Vec<Vec<f64>> = vols.iter().map(|a| tree.transition(*a).unwrap()).collect();
    let mut v = terminal_values(tree);
    for i in (0..STEPS).rev() {
        v = (0..tree.nodes(i).len())
            .map(|j| {
                probs
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(k, pk)| pk * v[tree.first_child(j) + k]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    v[0]
}

/// `E[ξ(X_T)]` under a deterministic volatility schedule.
fn open_loop_value(tree: &BrownianTree, schedule: &[f64]) -> f64 {
    let mut mass = vec![1.0];
    for (i, a) in schedule.iter().enumerate() {
        let p = tree.transition(*a).unwrap();
        let mut next = vec![0.0; tree.nodes(i + 1).len()];
        for (j, m) in mass.iter().enumerate() {
            for (k, pk) in p.iter().enumerate() {
                next[tree.first_child(j) + k] += m * pk;
            }
        }
        mass = next;
    }
    mass.iter().zip(terminal_values(tree)).map(|(m, v)| m * v).sum()
}

#[test]
fn dp_value_matches_enumeration() {
    let (problem, tree, w) = setup();
    let vols = problem.volgrid.values().to_vec();
    let opts = SolverOptions::default();
    let y0 = solve_dp_on(&problem, &tree, &w, &opts).unwrap().y0();
    let feedback = feedback_value(&tree, &vols);
    assert!((y0 - feedback).abs() < 1e-12, "{y0} {feedback}");

    let mut best_open = f64::NEG_INFINITY;
    let mut constants = Vec::new();
    for policy in 0..(1u32 << STEPS) {
        let schedule: Vec<f64> = (0..STEPS).map(|i| vols[((policy >> i) & 1) as usize]).collect();
        let v = open_loop_value(&tree, &schedule);
        if policy == 0 || policy == (1 << STEPS) - 1 {
            constants.push(v);
        }
        best_open = best_open.max(v);
    }
    let best_constant = constants.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let report = representation_check(&problem, &tree, &w, &opts).unwrap();
    assert!((report.best_constant - best_constant).abs() < 1e-12);
    assert!((report.y0 - y0).abs() < 1e-14);
    assert!(best_constant <= best_open + 1e-14);
    assert!(best_open <= y0 + 1e-14);
    // x|x| is neither convex nor concave: switching on the sign of x pays
    assert!(report.surplus > 1e-2, "surplus {}", report.surplus);
}

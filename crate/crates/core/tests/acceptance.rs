//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::sync::Arc;
use std::time::Instant;

use bdsde_core::bdsde::{solve_stepper, SolverOptions};
use bdsde_core::doss::{
    invert_flow, inverse_transform, solve_flow, transform_solution, transformed_problem, Axis, FlowLattice,
    NoiseCoefficient, SolutionTraces,
};
use bdsde_core::generators::{biconjugate, biconjugate_tolerance, ConjugatePair, Fn2, HamiltonianSpec, Point};
use bdsde_core::harness::{self, BackendKind, ExperimentConfig};
use bdsde_core::oracles::{
    doss_pde_hamiltonian, fd_random_pde, ito_product_check, linear_spde_closed_form, ProductProcess,
    RandomPdeProblem, TerminalFn,
};
use bdsde_core::paths::{build_time_grid, build_tree_at, sample_backward_path, BackwardPath, BrownianTree, VolatilityGrid};
use bdsde_core::reflected::{penalization_trace, snell_envelope, solve_reflected, Barrier};
use bdsde_core::stepper::{LatticeQuadrature, Stepper};
use bdsde_core::tbdsde::{minimality_gap, solve_dp, solve_dp_on, DpBackend, DpOptions, GapOperator, TbdsdeProblem};
use bdsde_core::Result;

type Outcome = Result<(bool, String)>;

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn bsb_problem(g: f64) -> TbdsdeProblem {
    TbdsdeProblem::new(
        Arc::new(|x| x * x),
        Arc::new(|_, _| 0.0),
        Arc::new(move |p: &Point| g * p.y),
        VolatilityGrid::uniform(0.5, 2.0, 4).unwrap(),
        0.0,
    )
}

fn lattice_opts(x0: f64) -> DpOptions {
    DpOptions {
        solver: SolverOptions::default(),
        backend: DpBackend::Lattice {
            factor: 2.0,
            width: 6.0,
            quadrature: LatticeQuadrature::ExactKernel,
        },
        x0,
    }
}

fn classical_reduction() -> Outcome {
    let start = Instant::now();
    let grid = build_time_grid(0.0, 1.0, 64)?;
    let volgrid = VolatilityGrid::singleton(1.0)?;
    let tree = BrownianTree::for_volatilities(&grid, 0.2, &volgrid)?;
    let w = sample_backward_path(&grid, 1, 5)?;
    let problem = TbdsdeProblem::new(
        Arc::new(|x| x.sin() + 0.25 * x * x),
        Arc::new(|p: &Point, _| 0.5 * p.y.sin() + 0.2 * p.z + p.x.cos()),
        Arc::new(|p: &Point| 0.3 * p.y + 0.1 * p.x.sin()),
        volgrid,
        0.7,
    );
    let opts = SolverOptions::default();
    let dp = solve_dp_on(&problem, &tree, &w, &opts)?;
    let classical = solve_stepper(&problem.at_volatility(1.0), &tree, &w, &opts)?;
    let diff = dp
        .y
        .iter()
        .flatten()
        .zip(classical.y.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let k = dp.k.k_terminal();
    let secs = start.elapsed().as_secs_f64();
    Ok((
        diff < 1e-10 && k.abs() < 1e-9 && secs < 1.0,
        format!("max |Y - y| = {diff:.2e}, K_T = {k:.2e}, {secs:.3}s"),
    ))
}

fn bsb_oracle() -> Outcome {
    let start = Instant::now();
    let problem = bsb_problem(0.0);
    let mut errors = Vec::new();
    let mut share = 0.0;
    let mut y64 = 0.0;
    for n in [64, 128, 256] {
        let grid = build_time_grid(0.0, 1.0, n)?;
        let w = BackwardPath::zero(grid.clone(), 1)?;
        let (sol, stepper) = solve_dp(&problem, &grid, &w, &lattice_opts(1.0))?;
        if n == 64 {
            y64 = sol.y0();
            share = sol.argmax_share(stepper.as_stepper(), 2.0, 1e-10)?;
        }
        errors.push((sol.y0() - 3.0).abs());
    }
    let ratios: Vec<f64> = errors.windows(2).map(|e| e[0] / e[1]).collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = (y64 - 3.0).abs() < 0.06
        && ratios.iter().all(|r| (1.4..=2.6).contains(r))
        && share >= 0.99
        && secs < 30.0;
    Ok((
        pass,
        format!(
            "Y_0 = {y64:.5} at n = 64, error ratios {:.3?}, argmax share {share:.4}, {secs:.2}s",
            ratios
        ),
    ))
}

fn traces(sol: &bdsde_core::tbdsde::TbdsdeSolution, stepper: &dyn Stepper) -> SolutionTraces {
    let n = stepper.grid().n_steps;
    SolutionTraces {
        states: (0..=n).map(|i| stepper.states(i).to_vec()).collect(),
        y: sol.y.clone(),
        z: sol.z.clone(),
        dk: sol.k.dk.clone(),
    }
}

fn doss_roundtrip() -> Outcome {
    let direct = bsb_problem(0.5);
    let coarse = sample_backward_path(&build_time_grid(0.0, 1.0, 64)?, 1, 21)?;
    let mut rows = Vec::new();
    let mut roundtrip: f64 = 0.0;
    let r1 = coarse.refine(21)?;
    let r2 = r1.refine(22)?;
    let r3 = r2.refine(23)?;
    for w in [coarse.clone(), r1, r2, r3] {
        let grid = w.grid.clone();
        let tree = BrownianTree::for_volatilities(&grid, 1.0, &direct.volgrid)?;
        let yd = solve_dp_on(&direct, &tree, &w, &SolverOptions::stratonovich())?;
        let lattice = FlowLattice::new(Axis::point(0.0), Axis::uniform(-6000.0, 6000.0, 4001)?)?;
        let flow = Arc::new(solve_flow(&NoiseCoefficient::linear(0.5), &w, &lattice)?);
        let inv = invert_flow(flow.clone())?;
        let tr = traces(&yd, &tree);
        let back = inverse_transform(&transform_solution(&tr, &inv)?, &flow)?;
        for (a, b) in back.y.iter().flatten().zip(tr.y.iter().flatten()) {
            roundtrip = roundtrip.max((a - b).abs());
        }
        let transformed = transformed_problem(&direct, flow.clone());
        let u = solve_dp_on(&transformed, &tree, &w, &SolverOptions::default())?;
        let yt = flow.eval(0, 1.0, u.y0())?.v;
        rows.push((yd.y0(), yt));
    }
    let last = rows.len() - 1;
    let disc = (rows[last - 1].0 - rows[last].0).abs();
    let gap = (rows[last].0 - rows[last].1).abs();
    Ok((
        roundtrip < 1e-8 && gap <= 3.0 * disc,
        format!(
            "roundtrip {roundtrip:.2e}; direct {:.6} vs transformed {:.6} (|diff| {gap:.2e}, 3 x discretization {:.2e})",
            rows[last].0,
            rows[last].1,
            3.0 * disc
        ),
    ))
}

fn stratonovich_ito() -> Outcome {
    let g = |y: f64| 0.4 * y + 0.2 * y.sin();
    let gy = |y: f64| 0.4 + 0.2 * y.cos();
    let base = |drift: Fn2| {
        TbdsdeProblem::new(
            Arc::new(|x: f64| x.cos() + 0.5 * x * x),
            drift,
            Arc::new(move |p: &Point| g(p.y)),
            VolatilityGrid::uniform(0.5, 2.0, 3).unwrap(),
            0.3,
        )
    };
    let strat = base(Arc::new(|p: &Point, a| 0.3 * p.x.cos() - 0.1 * a));
    let ito = base(Arc::new(move |p: &Point, a| 0.3 * p.x.cos() - 0.1 * a + 0.5 * g(p.y) * gy(p.y)));
    let samples = 400u64;
    let mut means = Vec::new();
    for n in [16usize, 32, 64] {
        let grid = build_time_grid(0.0, 1.0, n)?;
        let tree = BrownianTree::for_volatilities(&grid, 0.0, &strat.volgrid)?;
        let diffs: Vec<f64> = (0..samples)
            .map(|s| {
                let w = sample_backward_path(&grid, 1, 1000 + s)?;
                let a = solve_dp_on(&strat, &tree, &w, &SolverOptions::stratonovich())?;
                let b = solve_dp_on(&ito, &tree, &w, &SolverOptions::default())?;
                Ok(a.y0() - b.y0())
            })
            .collect::<Result<_>>()?;
        let m = diffs.iter().sum::<f64>() / samples as f64;
        let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (samples - 1) as f64;
        means.push((1.0 / n as f64, m, (var / samples as f64).sqrt()));
    }
    let c = means.iter().map(|(dt, m, _)| dt * m.abs()).sum::<f64>() / means.iter().map(|(dt, _, _)| dt * dt).sum::<f64>();
    let pass = means.iter().all(|(dt, m, se)| m.abs() <= 1.3 * c * dt + 3.0 * se);
    let shown: Vec<String> = means
        .iter()
        .map(|(dt, m, se)| format!("dt {dt:.4}: {m:+.2e} +- {se:.1e}"))
        .collect();
    Ok((pass, format!("E_W[Y_strat - Y_ito] {}; envelope {c:.3} dt", shown.join(", "))))
}

fn linear_spde() -> Outcome {
    let beta = 0.4;
    let w = BackwardPath::pinned(build_time_grid(0.0, 1.0, 64)?, 1, 11, 0.25)?;
    let oracle = linear_spde_closed_form(beta, &TerminalFn::square(), &w, 0, 0.0)?;
    let problem = TbdsdeProblem::new(
        Arc::new(|x| x * x),
        Arc::new(|_, _| 0.0),
        Arc::new(move |p: &Point| beta * p.y),
        VolatilityGrid::singleton(1.0)?,
        0.0,
    );
    let tree = build_tree_at(&w.grid, 0.0, 1.0, 3)?;
    let u = solve_dp_on(&problem, &tree, &w, &SolverOptions::stratonovich())?.y0();
    let fd = |w: &BackwardPath| -> Result<f64> {
        let noise = NoiseCoefficient::linear(beta);
        let lattice = FlowLattice::new(Axis::point(0.0), Axis::uniform(-20.0, 60.0, 801)?)?;
        let flow = Arc::new(solve_flow(&noise, w, &lattice)?);
        let pair = ConjugatePair::zero(VolatilityGrid::singleton(1.0)?);
        let h = doss_pde_hamiltonian(&pair, flow.clone(), &noise, false);
        let p = RandomPdeProblem::centered(h, TerminalFn::square(), 0.0, 1.0, 1.0);
        let v = fd_random_pde(&p, &w.grid, 60)?.value_at(0, 0.0)?;
        Ok(flow.eval(0, 0.0, v)?.v)
    };
    let fine = w.refine(3)?.refine(4)?;
    let (fd64, fd256) = (fd(&w)?, fd(&fine)?);
    let fd_tol = 2e-3 * oracle;
    let pass = (u - oracle).abs() < 0.02 * oracle && (fd256 - oracle).abs() < fd_tol;
    Ok((
        pass,
        format!(
            "oracle {oracle:.5}; solver {u:.5} ({:.2}%); FD {fd256:.5} at 256 steps, {fd64:.5} at 64 (tolerance {fd_tol:.1e})",
            100.0 * (u - oracle).abs() / oracle
        ),
    ))
}

fn comparison() -> Outcome {
    let r = harness::property_suite("comparison", 2024)?;
    Ok((
        r.passed() && r.instances == 100,
        format!("{} instances, {} violations, max violation {:.2e}", r.instances, r.violations, r.max_violation),
    ))
}

fn minimality() -> Outcome {
    let problem = bsb_problem(0.0);
    let mut gaps = Vec::new();
    for n in [32, 64, 128] {
        let grid = build_time_grid(0.0, 1.0, n)?;
        let w = BackwardPath::zero(grid.clone(), 1)?;
        let (sol, stepper) = solve_dp(&problem, &grid, &w, &lattice_opts(1.0))?;
        let gap = minimality_gap(&problem, &sol, stepper.as_stepper(), &w, GapOperator::Exact, &SolverOptions::default())?;
        gaps.push(gap.gap[0]);
    }
    let ratios: Vec<f64> = gaps.windows(2).map(|g| g[0] / g[1]).collect();
    Ok((
        ratios.iter().all(|r| (1.5..=2.5).contains(r)),
        format!("gaps {}, ratios {ratios:.3?}", sci(&gaps)),
    ))
}

fn reflected() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut sums = Vec::new();
    for n in [32usize, 64, 128] {
        let grid = build_time_grid(0.0, 1.0, n)?;
        let tree = build_tree_at(&grid, 0.0, 1.0, 3)?;
        let w = sample_backward_path(&grid, 1, 4)?;
        let problem = bdsde_core::bdsde::BdsdeProblem::new(
            Arc::new(|_| 0.0),
            Arc::new(|_| 0.0),
            Arc::new(|_| 0.0),
            1.0,
            0.0,
        );
        let barrier = Barrier::constant_until(1.0, 0.0, 1.0);
        let opts = SolverOptions::default();
        let sol = solve_reflected(&problem, &barrier, &tree, &w, &opts)?;
        let scale = sol.y.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        sums.push((grid.dt, sol.skorokhod_sum.abs(), scale));
        if n == 64 {
            let trace = penalization_trace(&problem, &barrier, &[1.0, 10.0, 100.0, 1000.0], &tree, &w, &opts)?;
            let monotone = trace.windows(2).all(|p| p[1].1 >= p[0].1 - 1e-12);
            let snell = snell_envelope(&tree, 1.0, &|i, j| barrier.at(grid.time(i), tree.nodes(i)[j]), &|_| 0.0)?;
            let gap = (snell[0][tree.root()] - trace[3].1).abs();
            pass &= monotone && gap < 1e-3;
            let ys: Vec<String> = trace.iter().map(|(_, y)| format!("{y:.6}")).collect();
            lines.push(format!("penalized Y_0 [{}], Snell gap {gap:.2e}", ys.join(", ")));
        }
    }
    for pair in sums.windows(2) {
        let (dt, s, scale) = pair[1];
        let floor = 1e-14 * (1.0 + scale);
        pass &= s < dt * scale && (s <= 0.5 * pair[0].1 * 1.3 || s <= floor);
    }
    lines.push(format!(
        "Skorokhod sums {:?}",
        sums.iter().map(|s| s.1).collect::<Vec<_>>()
    ));
    Ok((pass, lines.join("; ")))
}

fn conjugates() -> Outcome {
    let h: Fn2 = Arc::new(|_, g| 0.25 * g + 0.75 * (1.0 + g.exp()).ln());
    let spec = HamiltonianSpec::uniform(h.clone(), 20.0, 2000, true)?;
    let probe = Point::new(0.0, 0.0, 0.0, 0.0);
    let candidates = VolatilityGrid::uniform(0.05, 5.0, 400)?;
    let pair = ConjugatePair::from_hamiltonian(&spec, &candidates, &[probe])?.pair;
    let tol = biconjugate_tolerance(&spec, &pair, 2.5);
    let (mut worst, mut above) = (0.0f64, f64::NEG_INFINITY);
    for k in 0..=100 {
        let gamma = -5.0 + 0.1 * k as f64;
        let hat = biconjugate(&pair, &probe, gamma)?;
        let exact = h(&probe, gamma);
        worst = worst.max((hat - exact).abs());
        above = above.max(hat - exact);
    }
    let order = harness::property_suite("conjugate-order", 99)?;
    Ok((
        worst <= tol && above <= 1e-12 && order.passed() && order.instances == 100,
        format!(
            "max |h^ - h| = {worst:.2e} (tolerance {tol:.2e}), max (h^ - h) = {above:.2e}, order reversal {} pairs / {} violations",
            order.instances, order.violations
        ),
    ))
}

fn ito_product() -> Outcome {
    let run = |n: usize, x: &ProductProcess, sign: f64| -> Result<f64> {
        let g = build_time_grid(0.0, 1.0, n)?;
        Ok(ito_product_check(x, x, &g, 1.0, 400, 8, sign)?.mean_abs_residual)
    };
    let b = ProductProcess::forward_brownian();
    let w = ProductProcess::backward_brownian();
    let levels = [16usize, 32, 64, 128];
    let bb: Vec<f64> = levels.iter().map(|n| run(*n, &b, -1.0)).collect::<Result<_>>()?;
    let ww: Vec<f64> = levels.iter().map(|n| run(*n, &w, -1.0)).collect::<Result<_>>()?;
    let flipped: Vec<f64> = levels.iter().map(|n| run(*n, &w, 1.0)).collect::<Result<_>>()?;
    let decreasing = bb.windows(2).all(|p| p[1] < p[0]) && ww.windows(2).all(|p| p[1] < p[0]);
    let plateau = flipped[3] > 10.0 * ww[3] && flipped[3] > 0.5 * flipped[0];
    Ok((
        decreasing && plateau,
        format!("B.B {}; W.W {}; flipped W.W {}", sci(&bb), sci(&ww), sci(&flipped)),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| bdsde_core::Error::Io(e.to_string()))?;
    let mut configs = Vec::new();
    let mut c = ExperimentConfig::new("doss_bsb", BackendKind::Dp, 32);
    c.execution.w_samples = 3;
    configs.push(c);
    let mut c = ExperimentConfig::new("heat", BackendKind::Mc, 16);
    c.mc.n_paths = 5000;
    configs.push(c);
    configs.push(ExperimentConfig::new("linear_spde", BackendKind::Fd, 64));
    configs.push(ExperimentConfig::new("reflected_put", BackendKind::Reflected, 64));
    configs.push(ExperimentConfig::new("flow_linear", BackendKind::Flow, 32));
    let mut same = 0;
    for (k, base) in configs.iter().enumerate() {
        let mut bytes = Vec::new();
        for workers in [1usize, 4] {
            let mut c = base.clone();
            c.execution.workers = workers;
            let path = dir.path().join(format!("{k}_{workers}.csv"));
            c.outputs.csv = Some(path.clone());
            harness::run(&c)?;
            bytes.push(std::fs::read(&path).map_err(|e| bdsde_core::Error::Io(e.to_string()))?);
        }
        if bytes[0] == bytes[1] {
            same += 1;
        }
    }
    Ok((
        same == configs.len(),
        format!("{same}/{} configs byte-identical at 1 and 4 workers", configs.len()),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("classical reduction", classical_reduction),
        ("BSB quadratic oracle", bsb_oracle),
        ("Doss roundtrip", doss_roundtrip),
        ("Stratonovich/Ito equivalence", stratonovich_ito),
        ("linear SPDE oracle", linear_spde),
        ("comparison suites", comparison),
        ("minimality gap", minimality),
        ("reflected equation", reflected),
        ("conjugate layer", conjugates),
        ("Ito product witness", ito_product),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("criterion {:>2} {} {name}: {detail}", k + 1, if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

use std::sync::Arc;

use super::config::{BackendKind, ExperimentConfig};
use crate::bdsde::{solve_regression, Basis, BdsdeProblem, SolverOptions};
use crate::doss::{derivative_identity_report, invert_flow, solve_flow, Axis, FlowLattice, NoiseCoefficient};
use crate::error::{Error, Result};
use crate::generators::{ConjugatePair, Fn1, Fn2, Point};
use crate::oracles::{
    bsb_closed_form, doss_pde_hamiltonian, fd_random_pde, linear_spde_closed_form, pde_hamiltonian, RandomPdeProblem,
    TerminalFn,
};
use crate::paths::{build_time_grid, build_tree_at, sample_backward_path, sample_scalar_ensemble, BackwardPath, TimeGrid, VolatilityGrid};
use crate::reflected::{skorokhod_diagnostic, snell_envelope, solve_penalized, solve_reflected, Barrier};
use crate::stepper::{LatticeQuadrature, Stepper};
use crate::tbdsde::{minimality_gap, solve_dp, DpBackend, DpOptions, GapOperator, TbdsdeProblem};

use BackendKind::*;

/// A registered problem. `oracle` is `"none"` when nothing is checked.
#[derive(Clone, Copy, Debug)]
pub struct ProblemInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub backends: &'static [BackendKind],
    pub oracle: &'static str,
    pub x0: f64,
    /// Default `(a_low, a_high, n_points)`.
    pub volgrid: (f64, f64, usize),
}

const REGISTRY: &[ProblemInfo] = &[
    ProblemInfo {
        name: "bsb_quadratic",
        summary: "Black-Scholes-Barenblatt, xi = x^2, F = 0, g = 0",
        backends: &[Tree, Dp, Mc, Fd],
        oracle: "x0^2 + a_high T",
        x0: 1.0,
        volgrid: (0.5, 2.0, 4),
    },
    ProblemInfo {
        name: "bsb_concave",
        summary: "Black-Scholes-Barenblatt, xi = -x^2, F = 0, g = 0",
        backends: &[Tree, Dp, Mc, Fd],
        oracle: "-(x0^2 + a_low T)",
        x0: 1.0,
        volgrid: (0.5, 2.0, 4),
    },
    ProblemInfo {
        name: "classical_bdsde_linear",
        summary: "xi = 1 + x, G = 0.1 y, g = 0.3 y (Ito), one volatility",
        backends: &[Tree, Dp, Mc],
        oracle: "(1 + x0) exp(0.1 T + 0.3 (W_T - W_0) - 0.045 T); K = 0",
        x0: 0.0,
        volgrid: (1.0, 1.0, 1),
    },
    ProblemInfo {
        name: "heat",
        summary: "xi = cos x, G = y, g = 0, one volatility",
        backends: &[Tree, Dp, Mc, Fd],
        oracle: "cos(x0) exp((1 - a/2) T)",
        x0: 0.0,
        volgrid: (1.0, 1.0, 1),
    },
    ProblemInfo {
        name: "identity",
        summary: "xi = x, G = 0, g = 0",
        backends: &[Tree, Dp, Fd],
        oracle: "x0",
        x0: 0.5,
        volgrid: (1.0, 1.0, 1),
    },
    ProblemInfo {
        name: "linear_spde",
        summary: "xi = x^2, G = 0, g = 0.4 y (Stratonovich), one volatility",
        backends: &[Tree, Dp, Fd],
        oracle: "exp(0.4 (W_T - W_0)) (x0^2 + a T)",
        x0: 0.0,
        volgrid: (1.0, 1.0, 1),
    },
    ProblemInfo {
        name: "doss_bsb",
        summary: "xi = x^2, F = 0, g = 0.5 y (Stratonovich), volatility interval",
        backends: &[Tree, Dp, Fd],
        oracle: "exp(0.5 (W_T - W_0)) (x0^2 + a_high T)",
        x0: 1.0,
        volgrid: (0.5, 2.0, 4),
    },
    ProblemInfo {
        name: "reflected_constant",
        summary: "xi = 0, f = g = 0, barrier 1 on [0, T) and 0 at T",
        backends: &[Reflected],
        oracle: "Y_0 = 1, K_T = 1, penalized 1 - (1 + n dt)^(-N)",
        x0: 0.0,
        volgrid: (1.0, 1.0, 1),
    },
    ProblemInfo {
        name: "reflected_put",
        summary: "xi = S_T, S = (0.5 - x)^+, G = -0.05 y, g = 0.1 sin(t)",
        backends: &[Reflected],
        oracle: "none",
        x0: 0.0,
        volgrid: (1.0, 1.0, 1),
    },
    ProblemInfo {
        name: "flow_linear",
        summary: "stochastic flow of g = 0.5 y along W_t = 0.3 t / T",
        backends: &[Flow],
        oracle: "eta(0, y) = y exp(0.15)",
        x0: 0.0,
        volgrid: (1.0, 1.0, 1),
    },
];

pub fn registry() -> &'static [ProblemInfo] {
    REGISTRY
}

pub fn lookup(name: &str) -> Result<&'static ProblemInfo> {
    REGISTRY.iter().find(|p| p.name == name).ok_or_else(|| {
        let known: Vec<&str> = REGISTRY.iter().map(|p| p.name).collect();
        Error::Config(format!("problem.name: unknown problem {name:?} (known: {})", known.join(", ")))
    })
}

/// One measured quantity with its oracle and absolute tolerance.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Measured {
    pub quantity: &'static str,
    pub value: f64,
    pub oracle: Option<f64>,
    pub tolerance: Option<f64>,
}

fn m(quantity: &'static str, value: f64) -> Measured {
    Measured {
        quantity,
        value,
        oracle: None,
        tolerance: None,
    }
}

fn checked(quantity: &'static str, value: f64, oracle: f64, tolerance: f64) -> Measured {
    Measured {
        quantity,
        value,
        oracle: Some(oracle),
        tolerance: Some(tolerance),
    }
}

pub(crate) struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub grid: TimeGrid,
    pub volgrid: VolatilityGrid,
    pub x0: f64,
    pub w: BackwardPath,
    pub b_seed: u64,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a ExperimentConfig, info: &ProblemInfo, sample: u64) -> Result<Self> {
        let grid = build_time_grid(0.0, cfg.grid.horizon, cfg.grid.n_steps)?;
        let volgrid = match &cfg.volgrid {
            Some(v) => VolatilityGrid::uniform(v.a_low, v.a_high, v.n_points)?,
            None => VolatilityGrid::uniform(info.volgrid.0, info.volgrid.1, info.volgrid.2)?,
        };
        let w_seed = cfg.seeds.w_seed.wrapping_add(sample);
        let w = match cfg.grid.w_base_steps {
            Some(base) => {
                let mut w = sample_backward_path(&build_time_grid(0.0, cfg.grid.horizon, base)?, 1, w_seed)?;
                while w.grid.n_steps < cfg.grid.n_steps {
                    w = w.refine(w_seed)?;
                }
                w
            }
            None => sample_backward_path(&grid, 1, w_seed)?,
        };
        Ok(Self {
            cfg,
            grid,
            volgrid,
            x0: cfg.spatial.x0.unwrap_or(info.x0),
            w,
            b_seed: cfg.seeds.b_seed.wrapping_add(sample),
        })
    }

    fn horizon(&self) -> f64 {
        self.grid.horizon
    }

    fn singleton(&self) -> Result<f64> {
        if self.volgrid.len() != 1 {
            return Err(Error::Config(format!(
                "volgrid: backend {} needs a single volatility, got {}",
                self.cfg.problem.backend,
                self.volgrid.len()
            )));
        }
        Ok(self.volgrid.a_high())
    }
}

fn relative(oracle: f64, rel: f64) -> f64 {
    rel * oracle.abs().max(1e-300)
}

fn zero1() -> Fn1 {
    Arc::new(|_| 0.0)
}

fn linear_g(beta: f64) -> Fn1 {
    Arc::new(move |p: &Point| beta * p.y)
}

/// DP on the trinomial tree or the spatial lattice.
fn dp_measure(
    problem: &TbdsdeProblem,
    ctx: &Ctx,
    solver: SolverOptions,
    y0: Option<(f64, f64)>,
) -> Result<Vec<Measured>> {
    let backend = match ctx.cfg.problem.backend {
        Tree => DpBackend::Tree,
        _ => DpBackend::Lattice {
            factor: ctx.cfg.spatial.lattice_factor,
            width: ctx.cfg.spatial.lattice_width,
            quadrature: LatticeQuadrature::ExactKernel,
        },
    };
    let opts = DpOptions {
        solver,
        backend,
        x0: ctx.x0,
    };
    let (sol, stepper) = solve_dp(problem, &ctx.grid, &ctx.w, &opts)?;
    let gap = minimality_gap(problem, &sol, stepper.as_stepper(), &ctx.w, GapOperator::Scheme, &solver)?;
    let mut out = vec![match y0 {
        Some((o, tol)) => checked("y0", sol.y0(), o, tol),
        None => m("y0", sol.y0()),
    }];
    let k = sol.k.k_terminal();
    out.push(if problem.volgrid.len() == 1 {
        checked("k_terminal", k, 0.0, 1e-9)
    } else {
        m("k_terminal", k)
    });
    out.push(m("minimality_gap", gap.gap[0]));
    out.push(m("residual_max", sol.residual.iter().fold(0.0, |a, b| a.max(*b))));
    Ok(out)
}

/// Best constant-volatility regression value over the grid.
fn mc_measure(problem: &TbdsdeProblem, ctx: &Ctx, solver: SolverOptions, y0: Option<(f64, f64)>) -> Result<Vec<Measured>> {
    let n = ctx.grid.n_steps;
    let basis = Basis::polynomial(ctx.cfg.mc.basis_degree);
    let mut best: Option<(f64, f64)> = None;
    for &a in problem.volgrid.values() {
        let ens = sample_scalar_ensemble(&ctx.grid, ctx.cfg.mc.n_paths, ctx.x0, &vec![a; n], ctx.b_seed)?;
        let sol = solve_regression(&problem.at_volatility(a), &ens, &ctx.w, &basis, &solver)?;
        let se = sol.std_error.unwrap_or(0.0);
        if best.is_none_or(|(v, _)| sol.y0() > v) {
            best = Some((sol.y0(), se));
        }
    }
    let (v, se) = best.ok_or_else(|| Error::Config("volgrid: empty".into()))?;
    Ok(vec![
        match y0 {
            Some((o, tol)) => checked("y0", v, o, tol + 4.0 * se),
            None => m("y0", v),
        },
        m("y0_std_error", se),
    ])
}

fn fd_measure(pair: &ConjugatePair, terminal: TerminalFn, ctx: &Ctx, y0: Option<(f64, f64)>) -> Result<Vec<Measured>> {
    let p = RandomPdeProblem::centered(
        pde_hamiltonian(pair),
        terminal,
        ctx.x0,
        ctx.volgrid.a_high(),
        ctx.horizon(),
    );
    let v = fd_random_pde(&p, &ctx.grid, ctx.cfg.spatial.x_steps)?.value_at(0, ctx.x0)?;
    Ok(vec![match y0 {
        Some((o, tol)) => checked("y0", v, o, tol),
        None => m("y0", v),
    }])
}

/// FD on the transformed equation, mapped back through the flow of `g = βy`.
fn fd_doss_measure(beta: f64, terminal: TerminalFn, ctx: &Ctx, y0: (f64, f64)) -> Result<Vec<Measured>> {
    let a_high = ctx.volgrid.a_high();
    let half = 6.0 * (a_high * ctx.horizon()).sqrt();
    let bound = [ctx.x0 - half, ctx.x0, ctx.x0 + half]
        .iter()
        .map(|x| terminal.eval(*x).abs())
        .fold(0.0, f64::max);
    let span = 1.5 * bound + 1.0;
    let lattice = FlowLattice::new(Axis::point(0.0), Axis::uniform(-span, span, ctx.cfg.spatial.flow_points)?)?;
    let noise = NoiseCoefficient::linear(beta);
    let flow = Arc::new(solve_flow(&noise, &ctx.w, &lattice)?);
    let pair = ConjugatePair::zero(ctx.volgrid.clone());
    let h = doss_pde_hamiltonian(&pair, flow.clone(), &noise, false);
    let p = RandomPdeProblem::centered(h, terminal, ctx.x0, a_high, ctx.horizon());
    let u = fd_random_pde(&p, &ctx.grid, ctx.cfg.spatial.x_steps)?.value_at(0, ctx.x0)?;
    let v = flow.eval(0, ctx.x0, u)?.v;
    Ok(vec![checked("y0", v, y0.0, y0.1), m("transformed_y0", u)])
}

fn bsb(ctx: &Ctx, sign: f64) -> Result<Vec<Measured>> {
    let terminal = TerminalFn::Polynomial(vec![0.0, 0.0, sign]);
    let t = terminal.clone();
    let a = ctx.volgrid.clone();
    let oracle = bsb_closed_form(&terminal, a.a_low(), a.a_high(), ctx.horizon(), ctx.x0)?;
    let tol = relative(oracle, 0.02);
    let problem = TbdsdeProblem::new(Arc::new(move |x| t.eval(x)), Arc::new(|_, _| 0.0), zero1(), a.clone(), 0.0);
    match ctx.cfg.problem.backend {
        Tree | Dp => dp_measure(&problem, ctx, SolverOptions::default(), Some((oracle, tol))),
        Mc => mc_measure(&problem, ctx, SolverOptions::default(), Some((oracle, tol))),
        _ => fd_measure(&ConjugatePair::zero(a), terminal, ctx, Some((oracle, tol))),
    }
}

fn classical_linear(ctx: &Ctx) -> Result<Vec<Measured>> {
    let (r, beta) = (0.1, 0.3);
    let t = ctx.horizon();
    let oracle = (1.0 + ctx.x0) * (r * t + beta * ctx.w.remaining(0) - 0.5 * beta * beta * t).exp();
    let tol = relative(oracle, 0.05);
    let problem = TbdsdeProblem::new(
        Arc::new(|x| 1.0 + x),
        Arc::new(move |p: &Point, _| r * p.y),
        linear_g(beta),
        ctx.volgrid.clone(),
        r,
    );
    match ctx.cfg.problem.backend {
        Mc => mc_measure(&problem, ctx, SolverOptions::default(), Some((oracle, tol))),
        _ => dp_measure(&problem, ctx, SolverOptions::default(), Some((oracle, tol))),
    }
}

fn heat(ctx: &Ctx) -> Result<Vec<Measured>> {
    let a = ctx.singleton()?;
    let oracle = ctx.x0.cos() * ((1.0 - 0.5 * a) * ctx.horizon()).exp();
    let tol = relative(oracle, 0.02);
    let driver: Fn2 = Arc::new(|p: &Point, _| p.y);
    let problem = TbdsdeProblem::new(Arc::new(f64::cos), driver, zero1(), ctx.volgrid.clone(), 1.0);
    match ctx.cfg.problem.backend {
        Tree | Dp => dp_measure(&problem, ctx, SolverOptions::default(), Some((oracle, tol))),
        Mc => mc_measure(&problem, ctx, SolverOptions::default(), Some((oracle, tol))),
        _ => {
            let pair = ConjugatePair::new(Arc::new(|p: &Point, _| -p.y), ctx.volgrid.clone());
            fd_measure(&pair, TerminalFn::General(Arc::new(f64::cos)), ctx, Some((oracle, tol)))
        }
    }
}

fn identity(ctx: &Ctx) -> Result<Vec<Measured>> {
    let problem = TbdsdeProblem::new(Arc::new(|x| x), Arc::new(|_, _| 0.0), zero1(), ctx.volgrid.clone(), 0.0);
    let oracle = Some((ctx.x0, 1e-9));
    match ctx.cfg.problem.backend {
        Fd => fd_measure(
            &ConjugatePair::zero(ctx.volgrid.clone()),
            TerminalFn::Polynomial(vec![0.0, 1.0]),
            ctx,
            oracle,
        ),
        _ => dp_measure(&problem, ctx, SolverOptions::default(), oracle),
    }
}

fn stratonovich_linear(ctx: &Ctx, beta: f64) -> Result<Vec<Measured>> {
    let terminal = TerminalFn::square();
    let a = ctx.volgrid.clone();
    let oracle = if a.len() == 1 {
        linear_spde_closed_form(beta, &terminal, &ctx.w, 0, ctx.x0)?
    } else {
        (beta * ctx.w.remaining(0)).exp() * bsb_closed_form(&terminal, a.a_low(), a.a_high(), ctx.horizon(), ctx.x0)?
    };
    let tol = relative(oracle, 0.03);
    let problem = TbdsdeProblem::new(Arc::new(|x| x * x), Arc::new(|_, _| 0.0), linear_g(beta), a, 0.0);
    match ctx.cfg.problem.backend {
        Fd => fd_doss_measure(beta, terminal, ctx, (oracle, tol)),
        _ => dp_measure(&problem, ctx, SolverOptions::stratonovich(), Some((oracle, tol))),
    }
}

fn reflected(ctx: &Ctx, constant: bool) -> Result<Vec<Measured>> {
    let a = ctx.singleton()?;
    let tree = build_tree_at(&ctx.grid, ctx.x0, a, 3)?;
    let opts = SolverOptions::default();
    let horizon = ctx.horizon();
    let (problem, barrier) = if constant {
        (
            BdsdeProblem::new(Arc::new(|_| 0.0), zero1(), zero1(), a, 0.0),
            Barrier::constant_until(1.0, 0.0, horizon),
        )
    } else {
        let put = |x: f64| (0.5 - x).max(0.0);
        (
            BdsdeProblem::new(
                Arc::new(put),
                Arc::new(|p: &Point| -0.05 * p.y),
                Arc::new(|p: &Point| 0.1 * p.t.sin()),
                a,
                0.05,
            ),
            Barrier::new(Arc::new(move |_, x| put(x))),
        )
    };
    let sol = solve_reflected(&problem, &barrier, &tree, &ctx.w, &opts)?;
    let sk = skorokhod_diagnostic(&sol, &tree, a)?;
    if !constant {
        return Ok(vec![
            m("y0", sol.y0()),
            m("k_terminal", sol.k_terminal()),
            m("k_jump", *sol.expected_k_jump.last().unwrap_or(&0.0)),
            m("skorokhod", sk),
        ]);
    }
    let penalty = 100.0;
    let n = ctx.grid.n_steps as i32;
    let pen = solve_penalized(&problem, &barrier, penalty, &tree, &ctx.w, &opts)?.y0();
    let pen_oracle = 1.0 - (1.0 + penalty * ctx.grid.dt).powi(-n);
    let snell = snell_envelope(
        &tree,
        a,
        &|i, j| barrier.at(ctx.grid.time(i), tree.nodes(i)[j]),
        &|j| (problem.terminal)(tree.nodes(ctx.grid.n_steps)[j]),
    )?;
    Ok(vec![
        checked("y0", sol.y0(), 1.0, 1e-12),
        checked("k_terminal", sol.k_terminal(), 1.0, 1e-12),
        checked("skorokhod", sk, 0.0, 1e-12),
        checked("penalized_y0", pen, pen_oracle, 1e-9),
        checked("snell_y0", snell[0][tree.root()], 1.0, 1e-12),
    ])
}

fn flow_linear(ctx: &Ctx) -> Result<Vec<Measured>> {
    let beta = 0.5;
    let w = BackwardPath::linear(ctx.grid.clone(), 0.3 / ctx.horizon())?;
    let lattice = FlowLattice::new(Axis::point(0.0), Axis::uniform(-4.0, 4.0, ctx.cfg.spatial.flow_points)?)?;
    let flow = Arc::new(solve_flow(&NoiseCoefficient::linear(beta), &w, &lattice)?);
    let inv = invert_flow(flow.clone())?;
    let eta = flow.eval(0, 0.0, 1.0)?.v;
    let mut roundtrip: f64 = 0.0;
    for k in 0..=40 {
        let y = -2.0 + 0.1 * k as f64;
        let e = inv.eval(0, 0.0, y)?.v;
        roundtrip = roundtrip.max((flow.eval(0, 0.0, e)?.v - y).abs());
    }
    let identities = derivative_identity_report(&flow, &inv)?.max_violation();
    Ok(vec![
        checked("eta", eta, (0.3 * beta).exp(), 1e-5),
        checked("roundtrip", roundtrip, 0.0, 1e-9),
        checked("identity_violation", identities, 0.0, 1e-8),
    ])
}

pub(crate) fn evaluate(info: &ProblemInfo, ctx: &Ctx) -> Result<Vec<Measured>> {
    let backend = ctx.cfg.problem.backend;
    if !info.backends.contains(&backend) {
        let ok: Vec<&str> = info.backends.iter().map(|b| b.name()).collect();
        return Err(Error::Config(format!(
            "problem.backend: {} cannot run {backend} (supported: {})",
            info.name,
            ok.join(", ")
        )));
    }
    match info.name {
        "bsb_quadratic" => bsb(ctx, 1.0),
        "bsb_concave" => bsb(ctx, -1.0),
        "classical_bdsde_linear" => classical_linear(ctx),
        "heat" => heat(ctx),
        "identity" => identity(ctx),
        "linear_spde" => stratonovich_linear(ctx, 0.4),
        "doss_bsb" => stratonovich_linear(ctx, 0.5),
        "reflected_constant" => reflected(ctx, true),
        "reflected_put" => reflected(ctx, false),
        "flow_linear" => flow_linear(ctx),
        other => Err(Error::Config(format!("problem.name: {other} has no pipeline"))),
    }
}

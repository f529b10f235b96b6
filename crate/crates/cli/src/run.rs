//! Command execution: solves, checks, CSV tables and the text report.

use std::fmt::Write as _;
use std::path::Path;

use intcontrol::optimizer::{self, OptimOptions};
use intcontrol::presets::{self, Preset, PresetInfo};
use intcontrol::{
    bilinear, build_box_grid, build_grid, fredholm, lqc, volterra, Family, Field, Grid, PDReport, Problem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Command, ConfigError, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success = 0,
    CheckFailed = 1,
    SolverFailed = 2,
    ConfigError = 3,
}

impl Status {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: Status,
    pub report: String,
}

impl Outcome {
    pub fn config_error(e: &ConfigError) -> Self {
        Outcome { status: Status::ConfigError, report: format!("error: {e}\n") }
    }
}

enum Failure {
    Config(ConfigError),
    Solver(String),
}

impl From<intcontrol::Error> for Failure {
    fn from(e: intcontrol::Error) -> Self {
        Failure::Solver(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Solver(format!("writing output: {e}"))
    }
}

/// Solution triple written to the CSV tables.
struct Tables {
    state: Field,
    costate: Field,
    control: Field,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    info: &'static PresetInfo,
    preset: Preset,
    problem: Problem,
    grid: Grid,
    report: String,
}

/// Runs one command and writes `state.csv`, `costate.csv`, `control.csv`
/// and `report.txt` into the output directory.
pub fn run(cfg: &RunConfig) -> Outcome {
    let mut report = String::new();
    let result = setup(cfg).and_then(|mut ctx| {
        let _ = writeln!(ctx.report, "command: {}", cfg.command.name());
        let _ = writeln!(ctx.report, "preset: {}", cfg.preset);
        for (k, v) in &cfg.params {
            let _ = writeln!(ctx.report, "param {k}: {v}");
        }
        let _ = writeln!(ctx.report, "family: {:?}", ctx.problem.family());
        let _ = writeln!(ctx.report, "nodes: {}", ctx.grid.len());
        let outcome = execute(&mut ctx);
        report = std::mem::take(&mut ctx.report);
        let (passed, tables) = outcome?;
        write_tables(&cfg.out, &ctx.grid, ctx.problem.family(), &tables)?;
        Ok(passed)
    });
    let status = match result {
        Ok(true) => Status::Success,
        Ok(false) => Status::CheckFailed,
        Err(Failure::Config(e)) => return Outcome::config_error(&e),
        Err(Failure::Solver(msg)) => {
            let _ = writeln!(report, "solver failure: {msg}");
            Status::SolverFailed
        }
    };
    let _ = writeln!(report, "status: {}", status.code());
    if let Err(e) = std::fs::create_dir_all(&cfg.out).and_then(|_| std::fs::write(cfg.out.join("report.txt"), &report)) {
        let _ = writeln!(report, "cannot write report: {e}");
        return Outcome { status: Status::SolverFailed, report };
    }
    Outcome { status, report }
}

fn setup(cfg: &RunConfig) -> Result<Ctx<'_>, Failure> {
    let info = presets::info(&cfg.preset)
        .map_err(|_| Failure::Config(ConfigError::new("problem.preset", format!("unknown preset '{}'", cfg.preset))))?;
    let preset = presets::build_preset(&cfg.preset, &cfg.params)
        .map_err(|e| Failure::Config(ConfigError::new("problem.params", e.to_string())))?;
    let problem = preset.problem()?;
    let grid = make_grid(cfg, info)?;
    Ok(Ctx { cfg, info, preset, problem, grid, report: String::new() })
}

fn make_grid(cfg: &RunConfig, info: &PresetInfo) -> Result<Grid, Failure> {
    let d = info.domain_dim;
    match (&cfg.bounds, d) {
        (None, 1) => Ok(build_grid(cfg.horizon, cfg.n)?),
        (None, _) => Ok(build_box_grid(&vec![(0.0, 1.0); d], &vec![cfg.n; d])?),
        (Some(b), _) if b.len() == d && d > 1 => Ok(build_box_grid(b, &vec![cfg.n; d])?),
        (Some(b), _) => Err(Failure::Config(ConfigError::new(
            "grid.bounds",
            format!("preset '{}' lives on a {d}-dimensional box, got {} axes", info.name, b.len()),
        ))),
    }
}

fn execute(ctx: &mut Ctx) -> Result<(bool, Tables), Failure> {
    match ctx.cfg.command {
        Command::Solve => solve(ctx),
        Command::Optimize => optimize(ctx),
        Command::GradCheck => grad_check(ctx),
        Command::SecondVariationCheck => second_check(ctx),
        Command::SufficiencyCheck => sufficiency_check(ctx),
        Command::LqcSolve => lqc_solve(ctx),
        Command::BilinearSolve => bilinear_solve(ctx),
    }
}

/// Rounds-trippable fixed format: 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn rel_err(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(1e-12)
}

fn zero_control(ctx: &Ctx) -> Field {
    Field::zeros(ctx.grid.len(), ctx.problem.m())
}

/// State, costate and residuals at `u`, logged to the report.
fn solve_at(ctx: &mut Ctx, u: &Field) -> Result<Tables, Failure> {
    let (p, g) = (&ctx.problem, &ctx.grid);
    let (state, costate, cost, state_res, costate_res) = match p.family() {
        Family::Fredholm => {
            let sol = fredholm::solve(p, g, u)?;
            let sr = fredholm::state_residual(p, g, &sol.state, u)?;
            let cr = fredholm::costate_residual(p, g, &sol)?;
            (sol.state, sol.costate, sol.cost, sr, cr)
        }
        Family::Volterra => {
            let sol = volterra::solve(p, g, u)?;
            let sr = volterra::state_residual(p, g, &sol.state, u)?;
            let cr = volterra::costate_residual(p, g, &sol)?;
            let omega: Vec<String> = sol.omega.iter().map(|v| num(*v)).collect();
            let _ = writeln!(ctx.report, "omega: {}", omega.join(" "));
            (sol.state, sol.costate, sol.cost, sr, cr)
        }
    };
    let _ = writeln!(ctx.report, "J: {}", num(cost));
    let _ = writeln!(ctx.report, "state residual: {state_res:.3e}");
    let _ = writeln!(ctx.report, "costate residual: {costate_res:.3e}");
    Ok(Tables { state, costate, control: u.clone() })
}

fn solve(ctx: &mut Ctx) -> Result<(bool, Tables), Failure> {
    let u = zero_control(ctx);
    Ok((true, solve_at(ctx, &u)?))
}

fn optimize(ctx: &mut Ctx) -> Result<(bool, Tables), Failure> {
    let opts = OptimOptions { max_iters: ctx.cfg.tolerances.max_iters, ..OptimOptions::default() };
    let run = optimizer::minimize_with(&ctx.problem, &ctx.grid, &zero_control(ctx), &opts)?;
    let r = &mut ctx.report;
    let _ = writeln!(r, "termination: {}", run.termination);
    let _ = writeln!(r, "iterations: {}", run.iterates.len() - 1);
    let _ = writeln!(r, "initial J: {}", num(run.iterates[0].cost));
    let _ = writeln!(r, "final J: {}", num(run.final_cost()));
    let _ = writeln!(r, "final gradient sup norm: {:.3e}", run.iterates.last().map_or(f64::NAN, |it| it.grad_norm));
    for c in &run.fd_checks {
        let _ = writeln!(
            r,
            "fd check at iteration {}: adjoint {} fd {} rel err {:.3e}",
            c.iteration,
            num(c.adjoint),
            num(c.fd),
            c.rel_err
        );
    }
    let tables = solve_at(ctx, &run.control)?;
    Ok((true, tables))
}

fn directions(ctx: &Ctx) -> Vec<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let (nn, m) = (ctx.grid.len(), ctx.problem.m());
    (0..ctx.cfg.tolerances.probes)
        .map(|_| Field::from_vec(m, (0..nn * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized"))
        .collect()
}

fn grad_check(ctx: &mut Ctx) -> Result<(bool, Tables), Failure> {
    let u = zero_control(ctx);
    let tol = ctx.cfg.tolerances;
    let (_, grad) = optimizer::adjoint_gradient(&ctx.problem, &ctx.grid, &u)?;
    let mut ok = true;
    for (k, du) in directions(ctx).iter().enumerate() {
        let adjoint = grad.weighted_dot(du, &ctx.grid);
        let fd = optimizer::fd_gradient(&ctx.problem, &ctx.grid, &u, du, tol.fd_eps)?;
        let e = rel_err(adjoint, fd);
        ok &= e <= tol.grad_check;
        let _ = writeln!(ctx.report, "direction {k}: adjoint {} fd {} rel err {e:.3e}", num(adjoint), num(fd));
    }
    let _ = writeln!(ctx.report, "grad-check: {}", if ok { "pass" } else { "fail" });
    Ok((ok, solve_at(ctx, &u)?))
}

fn second_check(ctx: &mut Ctx) -> Result<(bool, Tables), Failure> {
    let u = zero_control(ctx);
    let tol = ctx.cfg.tolerances;
    let (p, g) = (&ctx.problem, &ctx.grid);
    let dirs = directions(ctx);
    let values: Vec<f64> = match p.family() {
        Family::Fredholm => {
            let sol = fredholm::solve(p, g, &u)?;
            dirs.iter().map(|du| fredholm::second_variation(p, g, &sol, du, None).map(|r| r.value)).collect::<Result<_, _>>()?
        }
        Family::Volterra => {
            let sol = volterra::solve(p, g, &u)?;
            dirs.iter().map(|du| volterra::second_variation(p, g, &sol, du, None).map(|r| r.value)).collect::<Result<_, _>>()?
        }
    };
    let mut ok = true;
    for (k, (du, sv)) in dirs.iter().zip(values).enumerate() {
        let fd = optimizer::fd_second(&ctx.problem, &ctx.grid, &u, du, tol.fd_eps_second)?;
        let e = rel_err(sv, fd);
        ok &= e <= tol.second_check;
        let _ = writeln!(ctx.report, "direction {k}: second variation {} fd {} rel err {e:.3e}", num(sv), num(fd));
    }
    let _ = writeln!(ctx.report, "second-variation-check: {}", if ok { "pass" } else { "fail" });
    Ok((ok, solve_at(ctx, &u)?))
}

fn log_pd(report: &mut String, label: &str, r: &PDReport) {
    let _ = writeln!(report, "{label} pointwise min eigenvalue: {:.6e} ({})", r.min_eig_pointwise, r.pointwise_verdict);
    let _ = writeln!(report, "{label} discrete min eigenvalue: {:.6e} ({})", r.min_eig_discrete, r.discrete_verdict);
    let _ = writeln!(report, "{label} verdict: {}", r.verdict);
}

fn sufficiency_check(ctx: &mut Ctx) -> Result<(bool, Tables), Failure> {
    let u = zero_control(ctx);
    let (p, g) = (&ctx.problem, &ctx.grid);
    let headline = match (&ctx.preset, p.family()) {
        (Preset::Bilinear2(b2), _) => {
            let sol = bilinear::solve_nc2(b2, g)?;
            let rep = bilinear::sufficiency2(b2, g, &sol)?;
            let _ = writeln!(ctx.report, "evaluated at: necessary-condition solution");
            log_pd(&mut ctx.report, "joint", &rep.joint);
            log_pd(&mut ctx.report, "reduced", &rep.reduced);
            let tables = Tables { state: sol.state, costate: sol.costate, control: sol.control };
            let ok = rep.reduced.verdict.is_pd();
            let _ = writeln!(ctx.report, "verdict: {}", rep.reduced.verdict);
            return Ok((ok, tables));
        }
        (_, Family::Fredholm) => {
            let sol = fredholm::solve(p, g, &u)?;
            let form = fredholm::assemble_accessory(g, &fredholm::accessory_from_solution(p, g, &sol)?)?;
            fredholm::check_pd(&form, g)?
        }
        (_, Family::Volterra) => {
            let sol = volterra::solve(p, g, &u)?;
            let acc = volterra::reduce_accessory(g, &volterra::accessory_from_solution(p, g, &sol)?)?;
            volterra::check_pd_volterra(&acc.form, g)?
        }
    };
    let _ = writeln!(ctx.report, "evaluated at: zero control");
    log_pd(&mut ctx.report, "form", &headline);
    let _ = writeln!(ctx.report, "verdict: {}", headline.verdict);
    Ok((headline.verdict.is_pd(), solve_at(ctx, &u)?))
}

fn lqc_solve(ctx: &mut Ctx) -> Result<(bool, Tables), Failure> {
    let Preset::Lqc(lq) = &ctx.preset else {
        return Err(Failure::Config(ConfigError::new(
            "problem.preset",
            format!("lqc-solve needs a linear-quadratic preset, '{}' is not one", ctx.info.name),
        )));
    };
    let sol = lqc::solve_lqc(lq, &ctx.grid)?;
    let tol = ctx.cfg.tolerances.stationarity;
    let r = &mut ctx.report;
    let _ = writeln!(r, "J: {}", num(sol.cost));
    let _ = writeln!(r, "outer iterations: {}", sol.outer_iterations);
    let _ = writeln!(r, "stationarity residual: {:.3e}", sol.stationarity_residual);
    let ok = sol.stationarity_residual <= tol;
    Ok((ok, Tables { state: sol.state, costate: sol.costate, control: sol.control }))
}

fn bilinear_solve(ctx: &mut Ctx) -> Result<(bool, Tables), Failure> {
    let sol = match &ctx.preset {
        Preset::Bilinear1(p) => bilinear::solve_nc1(p, &ctx.grid)?,
        Preset::Bilinear2(p) => bilinear::solve_nc2(p, &ctx.grid)?,
        _ => {
            return Err(Failure::Config(ConfigError::new(
                "problem.preset",
                format!("bilinear-solve needs a bilinear preset, '{}' is not one", ctx.info.name),
            )))
        }
    };
    let tol = ctx.cfg.tolerances.stationarity;
    let r = &mut ctx.report;
    let _ = writeln!(r, "J: {}", num(sol.cost));
    let _ = writeln!(r, "iterations: {}", sol.iterations);
    let _ = writeln!(r, "state residual: {:.3e}", sol.state_residual);
    let _ = writeln!(r, "costate residual: {:.3e}", sol.costate_residual);
    let _ = writeln!(r, "stationarity residual: {:.3e}", sol.stationarity_residual);
    let ok = sol.stationarity_residual <= tol;
    Ok((ok, Tables { state: sol.state, costate: sol.costate, control: sol.control }))
}

fn write_tables(dir: &Path, grid: &Grid, family: Family, t: &Tables) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    let state = if family == Family::Fredholm { "phi" } else { "y" };
    std::fs::write(dir.join("state.csv"), table(grid, state, &t.state))?;
    std::fs::write(dir.join("costate.csv"), table(grid, "psi", &t.costate))?;
    std::fs::write(dir.join("control.csv"), table(grid, "u", &t.control))?;
    Ok(())
}

/// One row per node: index, coordinates, components.
pub fn table(grid: &Grid, name: &str, f: &Field) -> String {
    let dim = grid.point(0).len();
    let mut out = String::from("node");
    if dim == 1 {
        out.push_str(",t");
    } else {
        (1..=dim).for_each(|k| out.push_str(&format!(",x_{k}")));
    }
    (1..=f.dim()).for_each(|k| out.push_str(&format!(",{name}_{k}")));
    out.push('\n');
    for i in 0..grid.len() {
        out.push_str(&i.to_string());
        for v in grid.point(i).iter().chain(f.at(i)) {
            out.push(',');
            out.push_str(&num(*v));
        }
        out.push('\n');
    }
    out
}

//! Double Fredholm systems: state and costate solves, Hamiltonian,
//! gradient, ancillary Hamiltonian, second variation, resolvent reduction of
//! the accessory problem and the pointwise positive-definiteness test.

use nalgebra::DMatrix;

use crate::accessory::{pd_report, AccessoryData, PDReport, QuadIntegralForm, SecondVariationReport};
use crate::engine::{lu_solve, Disc, SolverOptions, StateDiagnostics};
use crate::error::{Error, Result};
use crate::problem::{CoField, Control, Family, Field, Problem};
use crate::quadrature::Grid;

#[derive(Debug, Clone)]
pub struct FredholmSolution {
    pub state: Field,
    pub costate: CoField,
    pub control: Control,
    pub cost: f64,
    pub diagnostics: StateDiagnostics,
}

fn disc<'a>(problem: &'a Problem, grid: &'a Grid) -> Result<Disc<'a>> {
    Disc::new(problem, grid, Family::Fredholm)
}

pub fn solve_state(problem: &Problem, u: &Control, grid: &Grid) -> Result<Field> {
    solve_state_with(problem, u, grid, &SolverOptions::default()).map(|(y, _)| y)
}

pub fn solve_state_with(
    problem: &Problem,
    u: &Control,
    grid: &Grid,
    opts: &SolverOptions,
) -> Result<(Field, StateDiagnostics)> {
    disc(problem, grid)?.solve_fredholm_state(u, opts)
}

/// Sup-norm residual of the discretized state equation.
pub fn state_residual(problem: &Problem, grid: &Grid, phi: &Field, u: &Control) -> Result<f64> {
    let d = disc(problem, grid)?;
    d.check_state(phi)?;
    d.check_control(u)?;
    Ok(d.state_residual(phi, u))
}

pub fn cost(problem: &Problem, grid: &Grid, phi: &Field, u: &Control) -> Result<f64> {
    let d = disc(problem, grid)?;
    d.check_state(phi)?;
    d.check_control(u)?;
    Ok(d.cost(phi, u))
}

/// Cost of a control, solving the state equation first.
pub fn evaluate(problem: &Problem, grid: &Grid, u: &Control) -> Result<f64> {
    let phi = solve_state(problem, u, grid)?;
    cost(problem, grid, &phi, u)
}

pub fn solve_costate(problem: &Problem, grid: &Grid, phi: &Field, u: &Control) -> Result<CoField> {
    let d = disc(problem, grid)?;
    d.check_state(phi)?;
    d.check_control(u)?;
    let lin = d.linearize(phi, u, false);
    Ok(d.costate(phi, u, &lin)?.0)
}

/// State, costate and cost for a control.
pub fn solve(problem: &Problem, grid: &Grid, u: &Control) -> Result<FredholmSolution> {
    let d = disc(problem, grid)?;
    let (state, diagnostics) = d.solve_fredholm_state(u, &SolverOptions::default())?;
    let lin = d.linearize(&state, u, false);
    let (costate, _) = d.costate(&state, u, &lin)?;
    let cost = d.cost(&state, u);
    Ok(FredholmSolution { state, costate, control: u.clone(), cost, diagnostics })
}

/// Value of the Hamiltonian at node `x`.
pub fn hamiltonian(
    problem: &Problem,
    grid: &Grid,
    x: usize,
    phi: &Field,
    u: &Control,
    psi: &CoField,
) -> Result<f64> {
    let d = disc(problem, grid)?;
    check_triple(&d, phi, u, psi)?;
    node_in_range(&d, x)?;
    Ok(d.hamiltonian(x, phi, u, psi, &vec![0.0; d.n]))
}

/// `∇_{u(x)} H` at every node; the total variation of `J` along `δu` is
/// `Σ_x w_x ∇_{u(x)}H · δu(x)`.
pub fn gradient(problem: &Problem, grid: &Grid, sol: &FredholmSolution) -> Result<Field> {
    let d = disc(problem, grid)?;
    check_triple(&d, &sol.state, &sol.control, &sol.costate)?;
    let lin = d.linearize(&sol.state, &sol.control, true);
    Ok(d.gradient(&sol.state, &sol.control, &sol.costate, &vec![0.0; d.n], &lin))
}

/// Ancillary second-order Hamiltonian at the node pair `(x, z)`.
pub fn ancillary_h2(
    problem: &Problem,
    grid: &Grid,
    x: usize,
    z: usize,
    phi: &Field,
    u: &Control,
    psi: &CoField,
) -> Result<f64> {
    let d = disc(problem, grid)?;
    check_triple(&d, phi, u, psi)?;
    node_in_range(&d, x)?;
    node_in_range(&d, z)?;
    Ok(d.h2(x, z, phi, u, psi, &vec![0.0; d.n]))
}

/// Solution `δφ` of the linearized state equation for `δu`.
pub fn linearized_state(problem: &Problem, grid: &Grid, sol: &FredholmSolution, du: &Control) -> Result<Field> {
    let d = disc(problem, grid)?;
    d.check_control(du)?;
    let lin = d.linearize(&sol.state, &sol.control, true);
    d.linearized_solve(&lin, du)
}

/// Second variation of `J` along `δu` (and `δ²u` if given).
pub fn second_variation(
    problem: &Problem,
    grid: &Grid,
    sol: &FredholmSolution,
    du: &Control,
    d2u: Option<&Control>,
) -> Result<SecondVariationReport> {
    let d = disc(problem, grid)?;
    check_triple(&d, &sol.state, &sol.control, &sol.costate)?;
    d.check_control(du)?;
    let omega = vec![0.0; d.n];
    let lin = d.linearize(&sol.state, &sol.control, true);
    let d2u_term = match d2u {
        Some(d2) => {
            d.check_control(d2)?;
            d.gradient(&sol.state, &sol.control, &sol.costate, &omega, &lin).weighted_dot(d2, grid)
        }
        None => 0.0,
    };
    let so = d.second_order(&sol.state, &sol.control, &sol.costate, &omega, lin);
    let (terminal, pointwise, cross) = d.second_variation_terms(&so, du)?;
    Ok(SecondVariationReport::new(terminal, pointwise, cross, d2u_term))
}

/// Resolvent of a two-point kernel on the grid.
#[derive(Debug, Clone)]
pub struct Resolvent {
    /// Node-pair blocks `S(x_i, x_k)`, index `i * N + k`.
    pub s: Vec<DMatrix<f64>>,
    /// Sup norm of `S − A − A∘S` on the grid.
    pub residual: f64,
}

/// `S = (I − A_w)⁻¹ A`, where `A_w` has blocks `w_k A(x_i, x_k)`.
pub fn fredholm_resolvent(grid: &Grid, a: &[DMatrix<f64>]) -> Result<Resolvent> {
    let nn = grid.len();
    if a.len() != nn * nn || a.is_empty() {
        return Err(Error::Shape(format!("{} kernel blocks for {nn} nodes", a.len())));
    }
    let n = a[0].nrows();
    let dim = nn * n;
    let mut big = DMatrix::zeros(dim, dim);
    let mut aw = DMatrix::zeros(dim, dim);
    for i in 0..nn {
        for k in 0..nn {
            let blk = &a[i * nn + k];
            if blk.nrows() != n || blk.ncols() != n {
                return Err(Error::Shape("resolvent kernel blocks must be square".into()));
            }
            big.view_mut((i * n, k * n), (n, n)).copy_from(blk);
            aw.view_mut((i * n, k * n), (n, n)).copy_from(&(blk * grid.weight(k)));
        }
    }
    let op = DMatrix::identity(dim, dim) - &aw;
    let s = lu_solve(&op, &big, "I − A_w (Fredholm resolvent)", n)?;
    let residual = (&s - &big - &aw * &s).amax();
    Ok(Resolvent { s: split_blocks(&s, nn, n, n), residual })
}

pub(crate) fn split_blocks(m: &DMatrix<f64>, nn: usize, r: usize, c: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(nn * nn);
    for i in 0..nn {
        for k in 0..nn {
            out.push(m.view((i * r, k * c), (r, c)).into_owned());
        }
    }
    out
}

/// Reduces the accessory problem to the form `∫UᵀR1U + ∫∫UᵀK U` using
/// `δφ = ∫C U`, `C = B + ∫S B`.
pub fn assemble_accessory(grid: &Grid, data: &AccessoryData) -> Result<QuadIntegralForm> {
    data.check()?;
    let nn = grid.len();
    if data.nodes() != nn {
        return Err(Error::Shape(format!("accessory data on {} nodes, grid has {nn}", data.nodes())));
    }
    let c = control_to_state(grid, data)?;
    let k = data.reduce(grid, &c, None);
    QuadIntegralForm::new(data.r1.clone(), k, 1.0)
}

/// Dense matrix of the blocks `C(x_i, x_k)`.
fn control_to_state(grid: &Grid, data: &AccessoryData) -> Result<DMatrix<f64>> {
    let (n, m, nn) = (data.n, data.m, data.nodes());
    let s = fredholm_resolvent(grid, &data.a)?;
    let mut sw = DMatrix::zeros(nn * n, nn * n);
    let mut b = DMatrix::zeros(nn * n, nn * m);
    for i in 0..nn {
        for k in 0..nn {
            sw.view_mut((i * n, k * n), (n, n)).copy_from(&(&s.s[i * nn + k] * grid.weight(k)));
            b.view_mut((i * n, k * m), (n, m)).copy_from(&data.b[i * nn + k]);
        }
    }
    Ok(&b + sw * &b)
}

/// Control-to-state kernel `C = B + ∫S B` of the accessory dynamics.
pub fn accessory_kernel_c(grid: &Grid, data: &AccessoryData) -> Result<Vec<DMatrix<f64>>> {
    data.check()?;
    let c = control_to_state(grid, data)?;
    Ok(split_blocks(&c, data.nodes(), data.n, data.m))
}

/// Accessory data of a solution: linearized dynamics and the Hessian
/// blocks of the Hamiltonian and ancillary Hamiltonian. The resulting
/// accessory cost equals the second variation.
pub fn accessory_from_solution(problem: &Problem, grid: &Grid, sol: &FredholmSolution) -> Result<AccessoryData> {
    let d = disc(problem, grid)?;
    check_triple(&d, &sol.state, &sol.control, &sol.costate)?;
    let omega = vec![0.0; d.n];
    let lin = d.linearize(&sol.state, &sol.control, true);
    let so = d.second_order(&sol.state, &sol.control, &sol.costate, &omega, lin);
    Ok(AccessoryData {
        n: d.n,
        m: d.m,
        a: so.lin.a,
        b: so.lin.b,
        p0: so.p0,
        p1: so.hyy,
        q1: so.hyu,
        r1: so.huu,
        p2: so.p2,
        q2: so.q2,
        r2: so.r2,
    })
}

/// Pointwise test on `M(x1, x2)` at every node pair, with the discrete
/// Gram eigenvalue reported alongside.
pub fn check_pd(form: &QuadIntegralForm, grid: &Grid) -> Result<PDReport> {
    pd_report(form, grid, true)
}

pub(crate) fn check_triple(d: &Disc, phi: &Field, u: &Field, psi: &Field) -> Result<()> {
    d.check_state(phi)?;
    d.check_control(u)?;
    psi.check(d.nn, d.n, "costate")
}

pub(crate) fn node_in_range(d: &Disc, i: usize) -> Result<()> {
    if i >= d.nn {
        return Err(Error::Grid(format!("node {i} out of range (grid has {})", d.nn)));
    }
    Ok(())
}

/// Sup-norm residual of the discretized costate equation.
pub fn costate_residual(problem: &Problem, grid: &Grid, sol: &FredholmSolution) -> Result<f64> {
    let d = disc(problem, grid)?;
    check_triple(&d, &sol.state, &sol.control, &sol.costate)?;
    let lin = d.linearize(&sol.state, &sol.control, false);
    Ok(d.costate_residual(&sol.state, &sol.control, &sol.costate, &vec![0.0; d.n], &lin))
}

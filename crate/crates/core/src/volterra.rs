//! Double Volterra systems on `[0, T]`: causal state march, terminal
//! multiplier, backward costate, gradient, ancillary Hamiltonian, second
//! variation, resolvent kernels and the reduced accessory kernel `K2`.

use nalgebra::{DMatrix, DVector};

use crate::accessory::{pd_report, AccessoryData, PDReport, QuadIntegralForm, SecondVariationReport};
use crate::engine::{lu_solve_vec, Disc, SolverOptions, StateDiagnostics};
use crate::error::{Error, Result};
use crate::fredholm::{check_triple, node_in_range};
use crate::problem::{fold_causal, CoField, Control, Family, Field, Kernel, Problem};
use crate::quadrature::{Grid, GridKind};

#[derive(Debug, Clone)]
pub struct VolterraSolution {
    pub state: Field,
    pub costate: CoField,
    /// Terminal multiplier `ω = ∇_Y F0(T, y(T))`.
    pub omega: Vec<f64>,
    pub control: Control,
    pub cost: f64,
    pub diagnostics: StateDiagnostics,
}

fn disc<'a>(problem: &'a Problem, grid: &'a Grid) -> Result<Disc<'a>> {
    Disc::new(problem, grid, Family::Volterra)
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
    disc(problem, grid)?.solve_volterra_state(u, opts)
}

pub fn state_residual(problem: &Problem, grid: &Grid, y: &Field, u: &Control) -> Result<f64> {
    let d = disc(problem, grid)?;
    d.check_state(y)?;
    d.check_control(u)?;
    Ok(d.state_residual(y, u))
}

pub fn cost(problem: &Problem, grid: &Grid, y: &Field, u: &Control) -> Result<f64> {
    let d = disc(problem, grid)?;
    d.check_state(y)?;
    d.check_control(u)?;
    Ok(d.cost(y, u))
}

/// Cost of a control, solving the state equation first.
pub fn evaluate(problem: &Problem, grid: &Grid, u: &Control) -> Result<f64> {
    let y = solve_state(problem, u, grid)?;
    cost(problem, grid, &y, u)
}

/// Costate `ψ` and terminal multiplier `ω`, marching backward from `T`.
pub fn solve_costate(problem: &Problem, grid: &Grid, y: &Field, u: &Control) -> Result<(CoField, Vec<f64>)> {
    let d = disc(problem, grid)?;
    d.check_state(y)?;
    d.check_control(u)?;
    let lin = d.linearize(y, u, false);
    d.costate(y, u, &lin)
}

pub fn solve(problem: &Problem, grid: &Grid, u: &Control) -> Result<VolterraSolution> {
    let d = disc(problem, grid)?;
    let (state, diagnostics) = d.solve_volterra_state(u, &SolverOptions::default())?;
    let lin = d.linearize(&state, u, false);
    let (costate, omega) = d.costate(&state, u, &lin)?;
    let cost = d.cost(&state, u);
    Ok(VolterraSolution { state, costate, omega, control: u.clone(), cost, diagnostics })
}

fn check_omega(d: &Disc, omega: &[f64]) -> Result<()> {
    if omega.len() != d.n {
        return Err(Error::Shape(format!("ω has {} components, expected {}", omega.len(), d.n)));
    }
    Ok(())
}

/// Value of the Hamiltonian at node `t`, including the constant `F0` term.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    problem: &Problem,
    grid: &Grid,
    t: usize,
    y: &Field,
    u: &Control,
    psi: &CoField,
    omega: &[f64],
) -> Result<f64> {
    let d = disc(problem, grid)?;
    check_triple(&d, y, u, psi)?;
    check_omega(&d, omega)?;
    node_in_range(&d, t)?;
    Ok(d.hamiltonian(t, y, u, psi, omega))
}

/// `∇_{u(t)} H` at every node.
pub fn gradient(problem: &Problem, grid: &Grid, sol: &VolterraSolution) -> Result<Field> {
    let d = disc(problem, grid)?;
    check_triple(&d, &sol.state, &sol.control, &sol.costate)?;
    let lin = d.linearize(&sol.state, &sol.control, true);
    Ok(d.gradient(&sol.state, &sol.control, &sol.costate, &sol.omega, &lin))
}

#[allow(clippy::too_many_arguments)]
pub fn ancillary_h2(
    problem: &Problem,
    grid: &Grid,
    t: usize,
    sigma: usize,
    y: &Field,
    u: &Control,
    psi: &CoField,
    omega: &[f64],
) -> Result<f64> {
    let d = disc(problem, grid)?;
    check_triple(&d, y, u, psi)?;
    check_omega(&d, omega)?;
    node_in_range(&d, t)?;
    node_in_range(&d, sigma)?;
    Ok(d.h2(t, sigma, y, u, psi, omega))
}

pub fn linearized_state(problem: &Problem, grid: &Grid, sol: &VolterraSolution, du: &Control) -> Result<Field> {
    let d = disc(problem, grid)?;
    d.check_control(du)?;
    let lin = d.linearize(&sol.state, &sol.control, true);
    d.linearized_solve(&lin, du)
}

pub fn costate_residual(problem: &Problem, grid: &Grid, sol: &VolterraSolution) -> Result<f64> {
    let d = disc(problem, grid)?;
    check_triple(&d, &sol.state, &sol.control, &sol.costate)?;
    let lin = d.linearize(&sol.state, &sol.control, false);
    Ok(d.costate_residual(&sol.state, &sol.control, &sol.costate, &sol.omega, &lin))
}

/// Second variation along `δu`; `d2u` adds the `∫∇_uH·δ²u` term.
pub fn second_variation(
    problem: &Problem,
    grid: &Grid,
    sol: &VolterraSolution,
    du: &Control,
    d2u: Option<&Control>,
) -> Result<SecondVariationReport> {
    let d = disc(problem, grid)?;
    check_triple(&d, &sol.state, &sol.control, &sol.costate)?;
    d.check_control(du)?;
    let lin = d.linearize(&sol.state, &sol.control, true);
    let d2u_term = match d2u {
        Some(d2) => {
            d.check_control(d2)?;
            d.gradient(&sol.state, &sol.control, &sol.costate, &sol.omega, &lin).weighted_dot(d2, grid)
        }
        None => 0.0,
    };
    let so = d.second_order(&sol.state, &sol.control, &sol.costate, &sol.omega, lin);
    let (terminal, pointwise, cross) = d.second_variation_terms(&so, du)?;
    Ok(SecondVariationReport::new(terminal, pointwise, cross, d2u_term))
}

/// Discretization of `S(t,s) = A1(t,s) + ∫_s^t A1(t,σ) S(σ,s) dσ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResolventScheme {
    /// Trapezoid rule on `[s, t]`; `S(t, t) = A1(t, t)`.
    #[default]
    Trapezoid,
    /// Weights inherited from the discrete state equation, so that
    /// `δy_a = r_a + Σ_b W_ab S_ab r_b` reproduces the discrete linearized
    /// solve exactly.
    Consistent,
}

#[derive(Debug, Clone)]
pub struct VolterraResolvent {
    /// Blocks `S(t_i, t_k)`, index `i * N + k`; zero for `k > i`.
    pub s: Vec<DMatrix<f64>>,
    /// Sup norm of the discrete resolvent-equation residual of the scheme.
    pub residual: f64,
    pub scheme: ResolventScheme,
}

fn check_interval(grid: &Grid) -> Result<()> {
    if grid.kind() != GridKind::Interval {
        return Err(Error::Grid("Volterra kernels need an interval grid".into()));
    }
    Ok(())
}

fn check_blocks(grid: &Grid, a: &[DMatrix<f64>], what: &str) -> Result<(usize, usize)> {
    let nn = grid.len();
    if a.len() != nn * nn || a.is_empty() {
        return Err(Error::Shape(format!("{what}: {} blocks for {nn} nodes", a.len())));
    }
    let (r, c) = a[0].shape();
    if a.iter().any(|b| b.shape() != (r, c)) {
        return Err(Error::Shape(format!("{what}: blocks of differing shape")));
    }
    Ok((r, c))
}

/// Trapezoid weight of node `c` in the rule for `∫_{t_b}^{t_a}`.
fn interval_weight(grid: &Grid, a: usize, b: usize, c: usize) -> f64 {
    if a == b || c < b || c > a {
        0.0
    } else if c == a || c == b {
        0.5 * grid.step()
    } else {
        grid.step()
    }
}

pub fn volterra_resolvent(grid: &Grid, a1: &[DMatrix<f64>]) -> Result<VolterraResolvent> {
    volterra_resolvent_with(grid, a1, ResolventScheme::Trapezoid)
}

pub fn volterra_resolvent_with(
    grid: &Grid,
    a1: &[DMatrix<f64>],
    scheme: ResolventScheme,
) -> Result<VolterraResolvent> {
    check_interval(grid)?;
    let (n, c) = check_blocks(grid, a1, "resolvent kernel")?;
    if n != c {
        return Err(Error::Shape("resolvent kernel blocks must be square".into()));
    }
    match scheme {
        ResolventScheme::Trapezoid => Ok(trapezoid_resolvent(grid, a1, n)?),
        ResolventScheme::Consistent => {
            let w = |a: usize, b: usize| grid.partial_weight(a, b);
            let s = consistent_kernel(grid, a1, a1, n, n)?;
            let nn = grid.len();
            let mut residual: f64 = 0.0;
            for a in 1..nn {
                for b in 0..=a {
                    let mut rhs = a1[a * nn + b].clone();
                    for c in b.max(1)..=a {
                        let wt = w(a, c) * w(c, b) / w(a, b);
                        if wt != 0.0 {
                            rhs += &a1[a * nn + c] * &s[c * nn + b] * wt;
                        }
                    }
                    residual = residual.max((&s[a * nn + b] - rhs).amax());
                }
            }
            Ok(VolterraResolvent { s, residual, scheme })
        }
    }
}

fn trapezoid_resolvent(grid: &Grid, a1: &[DMatrix<f64>], n: usize) -> Result<VolterraResolvent> {
    let nn = grid.len();
    let h = grid.step();
    let mut s = vec![DMatrix::zeros(n, n); nn * nn];
    for b in 0..nn {
        s[b * nn + b] = a1[b * nn + b].clone();
        for a in b + 1..nn {
            let mut rhs = a1[a * nn + b].clone();
            for c in b..a {
                rhs += &a1[a * nn + c] * &s[c * nn + b] * interval_weight(grid, a, b, c);
            }
            let m = DMatrix::identity(n, n) - &a1[a * nn + a] * (0.5 * h);
            let mut blk = DMatrix::zeros(n, n);
            for j in 0..n {
                let col = lu_solve_vec(
                    &m,
                    rhs.column(j).into_owned(),
                    &format!("resolvent march at node {a}"),
                    n,
                )?;
                blk.set_column(j, &col);
            }
            s[a * nn + b] = blk;
        }
    }
    let mut residual: f64 = 0.0;
    for b in 0..nn {
        for a in b..nn {
            let mut rhs = a1[a * nn + b].clone();
            for c in b..=a {
                let wt = interval_weight(grid, a, b, c);
                if wt != 0.0 {
                    rhs += &a1[a * nn + c] * &s[c * nn + b] * wt;
                }
            }
            residual = residual.max((&s[a * nn + b] - rhs).amax());
        }
    }
    Ok(VolterraResolvent { s, residual, scheme: ResolventScheme::Trapezoid })
}

/// Solves `X_ab = B_ab + Σ_c (W_ac W_cb / W_ab) A_ac X_cb` for `b ≤ a`,
/// `a ≥ 1`, marching forward in `a`. Row 0 keeps `X_00 = B_00`.
fn consistent_kernel(
    grid: &Grid,
    a1: &[DMatrix<f64>],
    x: &[DMatrix<f64>],
    n: usize,
    c: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let nn = grid.len();
    let w = |a: usize, b: usize| grid.partial_weight(a, b);
    let mut out = vec![DMatrix::zeros(n, c); nn * nn];
    out[0] = x[0].clone();
    for a in 1..nn {
        let diag = &a1[a * nn + a];
        let m = DMatrix::identity(n, n) - diag * w(a, a);
        let trivial = diag.iter().all(|v| *v == 0.0);
        for b in 0..=a {
            let mut rhs = x[a * nn + b].clone();
            for k in b.max(1)..a {
                let wk = w(a, k) * w(k, b) / w(a, b);
                if wk != 0.0 {
                    rhs += &a1[a * nn + k] * &out[k * nn + b] * wk;
                }
            }
            if trivial {
                out[a * nn + b] = rhs;
                continue;
            }
            let mut blk = DMatrix::zeros(n, c);
            for j in 0..c {
                let col = lu_solve_vec(&m, rhs.column(j).into_owned(), &format!("causal solve at node {a}"), n)?;
                blk.set_column(j, &col);
            }
            out[a * nn + b] = blk;
        }
    }
    Ok(out)
}

/// Accessory problem with its resolvent reduction.
#[derive(Debug, Clone)]
pub struct AccessoryProblem {
    pub data: AccessoryData,
    /// Resolvent of `A1` (consistent scheme).
    pub s: Vec<DMatrix<f64>>,
    /// Control-to-state kernel: `δy(t_a) = Σ_b W_ab S1(t_a, t_b) δu(t_b)`.
    pub s1: Vec<DMatrix<f64>>,
    /// Reduced two-point kernel, symmetrized.
    pub k2: Vec<DMatrix<f64>>,
    /// `½∫δuᵀR1δu + ½∫∫δuᵀK2δu`.
    pub form: QuadIntegralForm,
    pub resolvent_residual: f64,
}

impl AccessoryProblem {
    /// `δy` from the `S1` representation.
    pub fn represent_state(&self, grid: &Grid, du: &Control) -> Result<Field> {
        let (n, nn) = (self.data.n, grid.len());
        du.check(nn, self.data.m, "control variation")?;
        let mut dy = Field::zeros(nn, n);
        for a in 0..nn {
            let mut v = DVector::zeros(n);
            for b in 0..=a {
                let w = grid.partial_weight(a, b);
                if w != 0.0 {
                    v += &self.s1[a * nn + b] * DVector::from_column_slice(du.at(b)) * w;
                }
            }
            dy.at_mut(a).copy_from_slice(v.as_slice());
        }
        Ok(dy)
    }

    /// Direct evaluation of the accessory cost `½[δy(T)ᵀP0δy(T) + ...]`
    /// after solving the accessory dynamics for `δu`.
    pub fn direct_value(&self, grid: &Grid, du: &Control) -> Result<f64> {
        let dy = self.represent_state(grid, du)?;
        Ok(0.5 * self.data.cost(grid, &dy, du, Some(grid.len() - 1)))
    }
}

/// Fills in `S`, `S1` and `K2` for the accessory data.
pub fn reduce_accessory(grid: &Grid, data: &AccessoryData) -> Result<AccessoryProblem> {
    check_interval(grid)?;
    data.check()?;
    let (n, m, nn) = (data.n, data.m, grid.len());
    if data.nodes() != nn {
        return Err(Error::Shape(format!("accessory data on {} nodes, grid has {nn}", data.nodes())));
    }
    let res = volterra_resolvent_with(grid, &data.a, ResolventScheme::Consistent)?;
    let s1 = consistent_kernel(grid, &data.a, &data.b, n, m)?;
    let mut c = DMatrix::zeros(nn * n, nn * m);
    for a in 1..nn {
        for b in 0..=a {
            let f = grid.partial_weight(a, b) / grid.weight(b);
            c.view_mut((a * n, b * m), (n, m)).copy_from(&(&s1[a * nn + b] * f));
        }
    }
    let k2 = data.reduce(grid, &c, Some(nn - 1));
    let form = QuadIntegralForm::new(data.r1.clone(), k2.clone(), 0.5)?;
    Ok(AccessoryProblem { data: data.clone(), s: res.s, s1, k2, form, resolvent_residual: res.residual })
}

/// Accessory data of a solution. With these blocks the accessory cost
/// `½[...]` equals half the second variation.
pub fn accessory_from_solution(problem: &Problem, grid: &Grid, sol: &VolterraSolution) -> Result<AccessoryData> {
    let d = disc(problem, grid)?;
    check_triple(&d, &sol.state, &sol.control, &sol.costate)?;
    let lin = d.linearize(&sol.state, &sol.control, true);
    let so = d.second_order(&sol.state, &sol.control, &sol.costate, &sol.omega, lin);
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

/// Gram-matrix test of the reduced form, with the pointwise `M` screen
/// (`|G| = T`) reported alongside.
pub fn check_pd_volterra(form: &QuadIntegralForm, grid: &Grid) -> Result<PDReport> {
    check_interval(grid)?;
    pd_report(form, grid, false)
}

/// Builds the Volterra problem `y = y0 + ∫_0^t f(s, y(s)) ds + ½∫∫ g̃`
/// from a nested causal system
/// `x(t) = x0(t) + ∫_0^t f(s, x(s)) ds + ∫_0^t∫_0^s g(s, σ, x(s), x(σ)) dσ ds`.
///
/// `f` has points `(s)` and slots `(x)`; `g` has points `(s, σ)` and slots
/// `(x1, x2)`. The control dimension `m` is carried but unused.
pub fn causal_problem(x0: Kernel, f: &Kernel, g: &Kernel, m: usize) -> Result<Problem> {
    let n = x0.out_dim();
    let gt = fold_causal(g)?;
    let f = f.clone();
    let f1 = Kernel::new(2, &[n, m], n, move |p, s| f.eval(&[p[1]], &[s[0]]));
    let f2 = Kernel::new(3, &[n, n, m, m], n, move |p, s| gt.eval(&[p[1], p[2]], &[s[0], s[1]]));
    Problem::builder(Family::Volterra, n, m).forcing(x0).f1(f1).f2(f2).build()
}

/// Direct solve of the nested causal form on the grid. The inner integral
/// `∫_0^{t_j}` uses the row weights of the outer rule with the diagonal
/// node at half weight, which is the product-grid quadrature of the
/// triangle `σ ≤ s ≤ t_i`.
pub fn solve_causal_nested(grid: &Grid, x0: &Kernel, f: &Kernel, g: &Kernel) -> Result<Field> {
    check_interval(grid)?;
    let n = x0.out_dim();
    let nn = grid.len();
    let w = |a: usize, b: usize| grid.partial_weight(a, b);
    let mut x = Field::from_fn(grid, n, |p| x0.eval(&[p], &[]));
    let base = x.clone();
    let term = |x: &Field, i: usize, j: usize, k: usize| -> Vec<f64> {
        let chi = if k < j { 1.0 } else { 0.5 };
        let v = g.eval(&[grid.point(j), grid.point(k)], &[x.at(j), x.at(k)]);
        v.into_iter().map(|e| chi * w(i, j) * w(i, k) * e).collect()
    };
    for i in 1..nn {
        let mut fixed = base.at(i).to_vec();
        for j in 0..i {
            let v = f.eval(&[grid.point(j)], &[x.at(j)]);
            for (o, e) in fixed.iter_mut().zip(v) {
                *o += w(i, j) * e;
            }
            for k in 0..=j {
                for (o, e) in fixed.iter_mut().zip(term(&x, i, j, k)) {
                    *o += e;
                }
            }
        }
        let mut guess = x.at(i - 1).to_vec();
        let mut converged = false;
        let mut res = f64::INFINITY;
        for _ in 0..500 {
            x.at_mut(i).copy_from_slice(&guess);
            let mut v = fixed.clone();
            let fv = f.eval(&[grid.point(i)], &[x.at(i)]);
            for (o, e) in v.iter_mut().zip(fv) {
                *o += w(i, i) * e;
            }
            for k in 0..=i {
                for (o, e) in v.iter_mut().zip(term(&x, i, i, k)) {
                    *o += e;
                }
            }
            res = v.iter().zip(&guess).fold(0.0, |m, (a, b)| m.max((a - b).abs()));
            guess = v;
            if res <= 1e-14 * guess.iter().fold(1.0f64, |m, e| m.max(e.abs())) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                what: format!("nested causal solve at node {i}"),
                iterations: 500,
                residual: res,
            });
        }
        x.at_mut(i).copy_from_slice(&guess);
    }
    Ok(x)
}

//! Bilinear Volterra control.
//!
//! First order: `y(t) = y0(t) + ∫_0^t [A y + B u + C(y ⊗ u)] ds` with cost
//! `∫ [½yᵀPy + yᵀQu + ½uᵀRu] dt`.
//!
//! Second order adds `∫_0^t∫_0^t D(t,s,σ)(y(s) ⊗ u(σ)) dσ ds` to the
//! dynamics and `∫∫ [½y(t)ᵀP2 y(τ) + y(t)ᵀQ2 u(τ) + ½u(t)ᵀR2 u(τ)] dτ dt`
//! to the cost. Both are lowered onto the generic Volterra problem with
//! analytic derivatives.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::accessory::{pd_report, AccessoryData, PDReport, QuadIntegralForm};
use crate::engine::{Disc, SolverOptions};
use crate::error::{Error, Result};
use crate::multiarray::{Signature, Tri3};
use crate::problem::{CoField, Control, Family, Field, Kernel, Problem};
use crate::quadrature::Grid;
use crate::volterra::{self, VolterraSolution};

pub type Fn1<T> = Arc<dyn Fn(f64) -> T + Send + Sync>;
pub type Fn2<T> = Arc<dyn Fn(f64, f64) -> T + Send + Sync>;
pub type Fn3<T> = Arc<dyn Fn(f64, f64, f64) -> T + Send + Sync>;

/// First-order bilinear problem. `c(t,s)` has dims `[n, m, n]`:
/// `C(y ⊗ u)_i = Σ_jk c.get(j, k, i) y_j u_k`.
#[derive(Clone)]
pub struct BilinearProblem1 {
    pub n: usize,
    pub m: usize,
    pub y0: Fn1<Vec<f64>>,
    pub a: Fn2<DMatrix<f64>>,
    pub b: Fn2<DMatrix<f64>>,
    pub c: Option<Fn2<Tri3>>,
    pub p: Fn1<DMatrix<f64>>,
    pub q: Fn1<DMatrix<f64>>,
    pub r: Fn1<DMatrix<f64>>,
}

/// Second-order bilinear problem. `d(t,s,σ)` has dims `[n, m, n]` and acts
/// on `y(s) ⊗ u(σ)`.
///
/// `extra_f1` / `extra_f2` carry terms outside the bilinear template, in the
/// generic kernel conventions (`∫ f1` and `½∫∫ f2`).
#[derive(Clone)]
pub struct BilinearProblem2 {
    pub n: usize,
    pub m: usize,
    pub y0: Fn1<Vec<f64>>,
    pub a: Fn2<DMatrix<f64>>,
    pub b: Fn2<DMatrix<f64>>,
    pub c: Option<Fn2<Tri3>>,
    pub d: Option<Fn3<Tri3>>,
    pub p1: Fn1<DMatrix<f64>>,
    pub q1: Fn1<DMatrix<f64>>,
    pub r1: Fn1<DMatrix<f64>>,
    pub p2: Option<Fn2<DMatrix<f64>>>,
    pub q2: Option<Fn2<DMatrix<f64>>>,
    pub r2: Option<Fn2<DMatrix<f64>>>,
    pub extra_f1: Option<Kernel>,
    pub extra_f2: Option<Kernel>,
}

impl std::fmt::Debug for BilinearProblem1 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BilinearProblem1").field("n", &self.n).field("m", &self.m).finish_non_exhaustive()
    }
}

impl std::fmt::Debug for BilinearProblem2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BilinearProblem2")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("strictly_bilinear", &self.is_strictly_bilinear())
            .finish_non_exhaustive()
    }
}

impl BilinearProblem1 {
    /// Zero dynamics and forcing, `P = Q = 0`, `R = I`.
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            y0: Arc::new(move |_| vec![0.0; n]),
            a: Arc::new(move |_, _| DMatrix::zeros(n, n)),
            b: Arc::new(move |_, _| DMatrix::zeros(n, m)),
            c: None,
            p: Arc::new(move |_| DMatrix::zeros(n, n)),
            q: Arc::new(move |_| DMatrix::zeros(n, m)),
            r: Arc::new(move |_| DMatrix::identity(m, m)),
        }
    }

    /// The same problem as a second-order one with the extra blocks zero.
    pub fn lift(&self) -> BilinearProblem2 {
        BilinearProblem2 {
            n: self.n,
            m: self.m,
            y0: self.y0.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            d: None,
            p1: self.p.clone(),
            q1: self.q.clone(),
            r1: self.r.clone(),
            p2: None,
            q2: None,
            r2: None,
            extra_f1: None,
            extra_f2: None,
        }
    }

    pub fn to_problem(&self) -> Result<Problem> {
        self.lift().to_problem()
    }
}

fn mv(a: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    a * DVector::from_column_slice(v)
}

fn row(v: DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn scalar_tri(m: &DMatrix<f64>) -> Tri3 {
    Tri3::from_fn([m.nrows(), m.ncols(), 1], Signature::OneLowerTwoUpper, |j, k, _| m[(j, k)])
}

fn shape(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: {got:?}, expected {want:?}")));
    }
    Ok(())
}

fn tri_shape(what: &str, t: &Tri3, n: usize, m: usize) -> Result<()> {
    if t.dims() != [n, m, n] {
        return Err(Error::Shape(format!("{what}: dims {:?}, expected {:?}", t.dims(), [n, m, n])));
    }
    t.contract_lower(&vec![0.0; n]).map(|_| ())
}

/// `Σ` of two kernels of the same signature, derivatives included.
fn add_kernels(a: Kernel, b: Kernel) -> Kernel {
    let ns = a.slot_dims().len();
    let (ea, eb) = (a.clone(), b.clone());
    let mut k = Kernel::new(a.n_points(), a.slot_dims(), a.out_dim(), move |p, s| {
        ea.eval(p, s).iter().zip(eb.eval(p, s)).map(|(x, y)| x + y).collect()
    });
    for slot in 0..ns {
        let (ja, jb) = (a.clone(), b.clone());
        k = k.with_jacobian(slot, move |p, s| ja.jacobian(p, s, slot) + jb.jacobian(p, s, slot));
    }
    for x in 0..ns {
        for y in x..ns {
            let (ha, hb) = (a.clone(), b.clone());
            k = k.with_hessian(x, y, move |p, s| {
                let mut h = ha.hessian(p, s, x, y);
                h.axpy(1.0, &hb.hessian(p, s, x, y));
                h
            });
        }
    }
    k
}

impl BilinearProblem2 {
    /// `true` when no terms outside the bilinear template are present.
    pub fn is_strictly_bilinear(&self) -> bool {
        self.extra_f1.is_none() && self.extra_f2.is_none()
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        if (self.y0)(0.0).len() != n {
            return Err(Error::Shape(format!("forcing must have {n} components")));
        }
        shape("A", (self.a)(0.0, 0.0).shape(), (n, n))?;
        shape("B", (self.b)(0.0, 0.0).shape(), (n, m))?;
        shape("P1", (self.p1)(0.0).shape(), (n, n))?;
        shape("Q1", (self.q1)(0.0).shape(), (n, m))?;
        shape("R1", (self.r1)(0.0).shape(), (m, m))?;
        if let Some(c) = &self.c {
            tri_shape("C", &c(0.0, 0.0), n, m)?;
        }
        if let Some(d) = &self.d {
            tri_shape("D", &d(0.0, 0.0, 0.0), n, m)?;
        }
        if let Some(f) = &self.p2 {
            shape("P2", f(0.0, 0.0).shape(), (n, n))?;
        }
        if let Some(f) = &self.q2 {
            shape("Q2", f(0.0, 0.0).shape(), (n, m))?;
        }
        if let Some(f) = &self.r2 {
            shape("R2", f(0.0, 0.0).shape(), (m, m))?;
        }
        Ok(())
    }

    fn dynamics1(&self) -> Kernel {
        let (n, m) = (self.n, self.m);
        let (a, b, c) = (self.a.clone(), self.b.clone(), self.c.clone());
        let (ja, jc) = (self.a.clone(), self.c.clone());
        let (kb, kc) = (self.b.clone(), self.c.clone());
        let hc = self.c.clone();
        Kernel::new(2, &[n, m], n, move |p, s| {
            let (t, r) = (p[0][0], p[1][0]);
            let mut v = mv(&a(t, r), s[0]) + mv(&b(t, r), s[1]);
            if let Some(c) = &c {
                v += DVector::from_vec(c(t, r).bilinear_unchecked(s[0], s[1]));
            }
            v.as_slice().to_vec()
        })
        .with_jacobian(0, move |p, s| {
            let (t, r) = (p[0][0], p[1][0]);
            let mut j = ja(t, r);
            if let Some(c) = &jc {
                j += c(t, r).act(s[1], 2).expect("shape checked");
            }
            j
        })
        .with_jacobian(1, move |p, s| {
            let (t, r) = (p[0][0], p[1][0]);
            let mut j = kb(t, r);
            if let Some(c) = &kc {
                j += c(t, r).act(s[0], 1).expect("shape checked");
            }
            j
        })
        .with_hessian(0, 1, move |p, _| match &hc {
            Some(c) => c(p[0][0], p[1][0]),
            None => Tri3::zeros([n, m, n], Signature::OneLowerTwoUpper),
        })
        .with_zero_hessians()
    }

    fn dynamics2(&self) -> Option<Kernel> {
        let (n, m) = (self.n, self.m);
        let d = self.d.clone()?;
        let (jd, kd, hd) = (d.clone(), d.clone(), d.clone());
        let zero_nm = move |_: &[&[f64]], _: &[&[f64]]| DMatrix::zeros(n, m);
        Some(
            Kernel::new(3, &[n, n, m, m], n, move |p, s| {
                d(p[0][0], p[1][0], p[2][0]).bilinear_unchecked(s[0], s[3]).iter().map(|v| 2.0 * v).collect()
            })
            .with_jacobian(0, move |p, s| jd(p[0][0], p[1][0], p[2][0]).act(s[3], 2).expect("shape checked") * 2.0)
            .with_jacobian(1, move |_, _| DMatrix::zeros(n, n))
            .with_jacobian(2, zero_nm)
            .with_jacobian(3, move |p, s| kd(p[0][0], p[1][0], p[2][0]).act(s[0], 1).expect("shape checked") * 2.0)
            .with_hessian(0, 3, move |p, _| {
                let mut h = hd(p[0][0], p[1][0], p[2][0]);
                h.scale(2.0);
                h
            })
            .with_zero_hessians(),
        )
    }

    fn running_cost(&self) -> Kernel {
        let (n, m) = (self.n, self.m);
        let (p, q, r) = (self.p1.clone(), self.q1.clone(), self.r1.clone());
        let (jp, jq) = (self.p1.clone(), self.q1.clone());
        let (kq, kr) = (self.q1.clone(), self.r1.clone());
        let (hp, hq, hr) = (self.p1.clone(), self.q1.clone(), self.r1.clone());
        Kernel::new(1, &[n, m], 1, move |pt, s| {
            let t = pt[0][0];
            let (y, u) = (DVector::from_column_slice(s[0]), DVector::from_column_slice(s[1]));
            vec![0.5 * y.dot(&(p(t) * &y)) + y.dot(&(q(t) * &u)) + 0.5 * u.dot(&(r(t) * &u))]
        })
        .with_jacobian(0, move |pt, s| {
            let t = pt[0][0];
            row(mv(&sym(&jp(t)), s[0]) + mv(&jq(t), s[1]))
        })
        .with_jacobian(1, move |pt, s| {
            let t = pt[0][0];
            row(mv(&kq(t).transpose(), s[0]) + mv(&sym(&kr(t)), s[1]))
        })
        .with_hessian(0, 0, move |pt, _| scalar_tri(&sym(&hp(pt[0][0]))))
        .with_hessian(0, 1, move |pt, _| scalar_tri(&hq(pt[0][0])))
        .with_hessian(1, 1, move |pt, _| scalar_tri(&sym(&hr(pt[0][0]))))
    }

    fn pair_cost(&self) -> Option<Kernel> {
        if self.p2.is_none() && self.q2.is_none() && self.r2.is_none() {
            return None;
        }
        let (n, m) = (self.n, self.m);
        let zn = move |_: f64, _: f64| DMatrix::zeros(n, n);
        let p2: Fn2<DMatrix<f64>> = self.p2.clone().unwrap_or_else(|| Arc::new(zn));
        let q2: Fn2<DMatrix<f64>> = self.q2.clone().unwrap_or_else(|| Arc::new(move |_, _| DMatrix::zeros(n, m)));
        let r2: Fn2<DMatrix<f64>> = self.r2.clone().unwrap_or_else(|| Arc::new(move |_, _| DMatrix::zeros(m, m)));
        let (e_p, e_q, e_r) = (p2.clone(), q2.clone(), r2.clone());
        let (j0p, j0q, j1p, j2r, j3q, j3r) = (p2.clone(), q2.clone(), p2.clone(), r2.clone(), q2.clone(), r2.clone());
        let (h01, h03, h23) = (p2, q2, r2);
        // The generic pair cost enters as ½∫∫, hence the doubled blocks.
        Some(
            Kernel::new(2, &[n, n, m, m], 1, move |pt, s| {
                let (t, r) = (pt[0][0], pt[1][0]);
                let (y1, y2) = (DVector::from_column_slice(s[0]), DVector::from_column_slice(s[1]));
                let (u1, u2) = (DVector::from_column_slice(s[2]), DVector::from_column_slice(s[3]));
                vec![y1.dot(&(e_p(t, r) * &y2)) + 2.0 * y1.dot(&(e_q(t, r) * &u2)) + u1.dot(&(e_r(t, r) * &u2))]
            })
            .with_jacobian(0, move |pt, s| {
                let (t, r) = (pt[0][0], pt[1][0]);
                row(mv(&j0p(t, r), s[1]) + mv(&j0q(t, r), s[3]) * 2.0)
            })
            .with_jacobian(1, move |pt, s| row(mv(&j1p(pt[0][0], pt[1][0]).transpose(), s[0])))
            .with_jacobian(2, move |pt, s| row(mv(&j2r(pt[0][0], pt[1][0]), s[3])))
            .with_jacobian(3, move |pt, s| {
                let (t, r) = (pt[0][0], pt[1][0]);
                row(mv(&j3q(t, r).transpose(), s[0]) * 2.0 + mv(&j3r(t, r).transpose(), s[2]))
            })
            .with_hessian(0, 1, move |pt, _| scalar_tri(&h01(pt[0][0], pt[1][0])))
            .with_hessian(0, 3, move |pt, _| scalar_tri(&(h03(pt[0][0], pt[1][0]) * 2.0)))
            .with_hessian(2, 3, move |pt, _| scalar_tri(&h23(pt[0][0], pt[1][0])))
            .with_zero_hessians(),
        )
    }

    /// Generic Volterra encoding.
    pub fn to_problem(&self) -> Result<Problem> {
        self.validate()?;
        let y0 = self.y0.clone();
        let mut f1 = self.dynamics1();
        if let Some(e) = &self.extra_f1 {
            f1 = add_kernels(f1, e.clone());
        }
        let f2 = match (self.dynamics2(), &self.extra_f2) {
            (Some(k), Some(e)) => Some(add_kernels(k, e.clone())),
            (Some(k), None) => Some(k),
            (None, Some(e)) => Some(e.clone()),
            (None, None) => None,
        };
        let mut b = Problem::builder(Family::Volterra, self.n, self.m)
            .forcing_fn(move |t| y0(t[0]))
            .f1(f1)
            .running_cost(self.running_cost());
        if let Some(k) = f2 {
            b = b.f2(k);
        }
        if let Some(k) = self.pair_cost() {
            b = b.pair_cost(k);
        }
        b.build()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NcOptions {
    /// Stop when the control update is below this in sup norm.
    pub tol: f64,
    pub max_iter: usize,
    pub relaxation: f64,
}

impl Default for NcOptions {
    fn default() -> Self {
        Self { tol: 1e-11, max_iter: 300, relaxation: 1.0 }
    }
}

/// Joint solution of the first-order conditions.
#[derive(Debug, Clone)]
pub struct NcSolution {
    pub state: Field,
    pub control: Control,
    pub costate: CoField,
    pub omega: Vec<f64>,
    pub cost: f64,
    pub state_residual: f64,
    pub costate_residual: f64,
    pub stationarity_residual: f64,
    pub iterations: usize,
    /// Sup norm of each control update.
    pub history: Vec<f64>,
}

impl NcSolution {
    pub fn as_volterra(&self) -> VolterraSolution {
        VolterraSolution {
            state: self.state.clone(),
            costate: self.costate.clone(),
            omega: self.omega.clone(),
            control: self.control.clone(),
            cost: self.cost,
            diagnostics: Default::default(),
        }
    }
}

pub fn solve_nc1(problem: &BilinearProblem1, grid: &Grid) -> Result<NcSolution> {
    solve_nc(&problem.to_problem()?, grid, &NcOptions::default())
}

pub fn solve_nc2(problem: &BilinearProblem2, grid: &Grid) -> Result<NcSolution> {
    solve_nc(&problem.to_problem()?, grid, &NcOptions::default())
}

/// Sweeps: forward state march, backward costate march, control update
/// from `∇_u H = 0` with state and costate frozen. The update solves the
/// full-horizon linear system in `u`; for first-order data it reduces to
/// `u = −R⁻¹(...)` node by node.
pub fn solve_nc(p: &Problem, grid: &Grid, opts: &NcOptions) -> Result<NcSolution> {
    let d = Disc::new(p, grid, Family::Volterra)?;
    let so_opts = SolverOptions::default();
    let mut u = Field::zeros(grid.len(), d.m);
    let mut history = Vec::new();
    for it in 1..=opts.max_iter {
        let (y, _) = d.solve_volterra_state(&u, &so_opts)?;
        let lin = d.linearize(&y, &u, true);
        let (psi, omega) = d.costate(&y, &u, &lin)?;
        let g = d.gradient(&y, &u, &psi, &omega, &lin);
        let so = d.second_order(&y, &u, &psi, &omega, lin);
        let du = d.stationarity_step(&so, &g)?;
        let step = du.sup_norm();
        history.push(step);
        if !step.is_finite() {
            break;
        }
        u = u.plus_scaled(opts.relaxation, &du);
        if step <= opts.tol {
            let (state, _) = d.solve_volterra_state(&u, &so_opts)?;
            let lin = d.linearize(&state, &u, true);
            let (costate, omega) = d.costate(&state, &u, &lin)?;
            let g = d.gradient(&state, &u, &costate, &omega, &lin);
            return Ok(NcSolution {
                state_residual: d.state_residual(&state, &u),
                costate_residual: d.costate_residual(&state, &u, &costate, &omega, &lin),
                stationarity_residual: g.sup_norm(),
                cost: d.cost(&state, &u),
                state,
                control: u,
                costate,
                omega,
                iterations: it,
                history,
            });
        }
    }
    let tail: Vec<String> = history.iter().rev().take(5).rev().map(|v| format!("{v:.3e}")).collect();
    Err(Error::NonConvergence {
        what: format!("necessary-condition sweeps (last updates: {})", tail.join(", ")),
        iterations: history.len(),
        residual: history.last().copied().unwrap_or(f64::NAN),
    })
}

/// Per-node blocks `E(t_i) = Q(t_i) + ∫_t^T ψ(s)C(s,t_i) ds` and
/// `b(t_i) = ∫_t^T Bᵀ(s,t_i)ψ(s) ds`, `a(t_i) = ∫_t^T Aᵀ(s,t_i)ψ(s) ds`.
struct CostateBlocks {
    e: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    a: Vec<DVector<f64>>,
}

fn costate_blocks(problem: &BilinearProblem1, grid: &Grid, psi: &CoField) -> Result<CostateBlocks> {
    let p = problem.to_problem()?;
    let d = Disc::new(&p, grid, Family::Volterra)?;
    psi.check(grid.len(), problem.n, "costate")?;
    let nn = grid.len();
    let t = |i: usize| grid.point(i)[0];
    let mut out = CostateBlocks { e: Vec::new(), b: Vec::new(), a: Vec::new() };
    for i in 0..nn {
        let mut e = (problem.q)(t(i));
        let mut b = DVector::zeros(problem.m);
        let mut a = DVector::zeros(problem.n);
        for s in i..nn {
            let rho = d.rho(s, i);
            if rho == 0.0 {
                continue;
            }
            let ps = DVector::from_column_slice(psi.at(s));
            if let Some(c) = &problem.c {
                e += c(t(s), t(i)).contract_lower(psi.at(s))? * rho;
            }
            b += (problem.b)(t(s), t(i)).transpose() * &ps * rho;
            a += (problem.a)(t(s), t(i)).transpose() * &ps * rho;
        }
        out.e.push(e);
        out.b.push(b);
        out.a.push(a);
    }
    Ok(out)
}

/// Control from the stationarity condition with `(y, ψ)` given:
/// `u = −R⁻¹(Eᵀy + b)`.
pub fn control_from_costate1(problem: &BilinearProblem1, grid: &Grid, y: &Field, psi: &CoField) -> Result<Control> {
    y.check(grid.len(), problem.n, "state")?;
    let blk = costate_blocks(problem, grid, psi)?;
    let mut u = Field::zeros(grid.len(), problem.m);
    for i in 0..grid.len() {
        let rhs = -(blk.e[i].transpose() * DVector::from_column_slice(y.at(i)) + &blk.b[i]);
        let r = sym(&(problem.r)(grid.point(i)[0]));
        let v = r.lu().solve(&rhs).ok_or_else(|| Error::Singular {
            what: format!("R at node {i}"),
            detail: "control weight is not invertible".into(),
        })?;
        u.at_mut(i).copy_from_slice(v.as_slice());
    }
    Ok(u)
}

/// Right side of the costate equation:
/// `Py + Qu + ∫_t^T [A(s,t) + C(s,t)u]ᵀψ(s) ds`.
pub fn costate_rhs1(problem: &BilinearProblem1, grid: &Grid, y: &Field, u: &Control, psi: &CoField) -> Result<Field> {
    y.check(grid.len(), problem.n, "state")?;
    u.check(grid.len(), problem.m, "control")?;
    let blk = costate_blocks(problem, grid, psi)?;
    let mut out = Field::zeros(grid.len(), problem.n);
    for i in 0..grid.len() {
        let t = grid.point(i)[0];
        let (yi, ui) = (DVector::from_column_slice(y.at(i)), DVector::from_column_slice(u.at(i)));
        let v = sym(&(problem.p)(t)) * &yi + &blk.e[i] * &ui + &blk.a[i];
        out.at_mut(i).copy_from_slice(v.as_slice());
    }
    Ok(out)
}

/// Costate equation with the control eliminated:
/// `ψ = Py + ∫Aᵀψ − E R⁻¹(Eᵀy + b)`, which carries the quadratic `ψψ`
/// terms through `E`.
pub fn costate_closure1(problem: &BilinearProblem1, grid: &Grid, y: &Field, psi: &CoField) -> Result<Field> {
    y.check(grid.len(), problem.n, "state")?;
    let blk = costate_blocks(problem, grid, psi)?;
    let mut out = Field::zeros(grid.len(), problem.n);
    for i in 0..grid.len() {
        let t = grid.point(i)[0];
        let yi = DVector::from_column_slice(y.at(i));
        let r = sym(&(problem.r)(t));
        let inner = blk.e[i].transpose() * &yi + &blk.b[i];
        let rinv = r.lu().solve(&inner).ok_or_else(|| Error::Singular {
            what: format!("R at node {i}"),
            detail: "control weight is not invertible".into(),
        })?;
        let v = sym(&(problem.p)(t)) * &yi + &blk.a[i] - &blk.e[i] * rinv;
        out.at_mut(i).copy_from_slice(v.as_slice());
    }
    Ok(out)
}

/// `∫[δyᵀPδy + 2δyᵀ(Q + ∫_t^T ψC ds)δu + δuᵀRδu] dt` with `δy` from the
/// linearized state equation.
pub fn second_variation1(problem: &BilinearProblem1, grid: &Grid, sol: &NcSolution, du: &Control) -> Result<f64> {
    let p = problem.to_problem()?;
    let d = Disc::new(&p, grid, Family::Volterra)?;
    d.check_control(du)?;
    let lin = d.linearize(&sol.state, &sol.control, true);
    let dy = d.linearized_solve(&lin, du)?;
    let blk = costate_blocks(problem, grid, &sol.costate)?;
    let mut v = 0.0;
    for i in 0..grid.len() {
        let t = grid.point(i)[0];
        let (y, u) = (DVector::from_column_slice(dy.at(i)), DVector::from_column_slice(du.at(i)));
        v += grid.weight(i)
            * (y.dot(&((problem.p)(t) * &y)) + 2.0 * y.dot(&(&blk.e[i] * &u)) + u.dot(&((problem.r)(t) * &u)));
    }
    Ok(v)
}

/// `δy = ∫Λδu`, and `δ²J = ∫δuᵀΛ1δu + ∫∫δuᵀΛ2δu`.
#[derive(Debug, Clone)]
pub struct LambdaKernels {
    /// Blocks `Λ(t_a, t_b)`, index `a * N + b`; `δy_a = Σ_b W_ab Λ_ab δu_b`.
    pub lambda: Vec<DMatrix<f64>>,
    pub lambda1: Vec<DMatrix<f64>>,
    pub lambda2: Vec<DMatrix<f64>>,
}

impl LambdaKernels {
    pub fn form(&self) -> Result<QuadIntegralForm> {
        QuadIntegralForm::new(self.lambda1.clone(), self.lambda2.clone(), 1.0)
    }

    pub fn value(&self, grid: &Grid, du: &Control) -> Result<f64> {
        self.form()?.value(grid, du)
    }

    pub fn represent_state(&self, grid: &Grid, du: &Control) -> Result<Field> {
        let nn = grid.len();
        let n = self.lambda[0].nrows();
        du.check(nn, self.lambda[0].ncols(), "control variation")?;
        let mut dy = Field::zeros(nn, n);
        for a in 0..nn {
            let mut v = DVector::zeros(n);
            for b in 0..=a {
                let w = grid.partial_weight(a, b);
                if w != 0.0 {
                    v += &self.lambda[a * nn + b] * DVector::from_column_slice(du.at(b)) * w;
                }
            }
            dy.at_mut(a).copy_from_slice(v.as_slice());
        }
        Ok(dy)
    }
}

pub fn lambda_kernels(problem: &BilinearProblem1, grid: &Grid, sol: &NcSolution) -> Result<LambdaKernels> {
    let p = problem.to_problem()?;
    let data = volterra::accessory_from_solution(&p, grid, &sol.as_volterra())?;
    let acc = volterra::reduce_accessory(grid, &data)?;
    Ok(LambdaKernels { lambda: acc.s1, lambda1: data.r1.clone(), lambda2: acc.k2 })
}

/// `δ²J` of a second-order problem along `δu`.
pub fn second_variation2(problem: &BilinearProblem2, grid: &Grid, sol: &NcSolution, du: &Control) -> Result<f64> {
    let p = problem.to_problem()?;
    Ok(volterra::second_variation(&p, grid, &sol.as_volterra(), du, None)?.value)
}

#[derive(Debug, Clone)]
pub struct Sufficiency2Report {
    /// `(M1, M2)` on `L²(0,T; R^{n+m})`.
    pub joint: PDReport,
    /// Reduced form `(M̄1, M̄2)` on `L²(0,T; R^m)`.
    pub reduced: PDReport,
    /// `½∫δuᵀM̄1δu + ½∫∫δuᵀM̄2δu`, equal to `½δ²J`.
    pub reduced_form: QuadIntegralForm,
}

/// `M1(t_i)` and `M2(t_i, t_k)` as square blocks of size `n + m`.
pub fn joint_blocks(data: &AccessoryData) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let (n, m, nn) = (data.n, data.m, data.nodes());
    let join = |p: &DMatrix<f64>, q: &DMatrix<f64>, qt: DMatrix<f64>, r: &DMatrix<f64>| {
        let mut b = DMatrix::zeros(n + m, n + m);
        b.view_mut((0, 0), (n, n)).copy_from(p);
        b.view_mut((0, n), (n, m)).copy_from(q);
        b.view_mut((n, 0), (m, n)).copy_from(&qt);
        b.view_mut((n, n), (m, m)).copy_from(r);
        b
    };
    let m1 = (0..nn).map(|i| join(&data.p1[i], &data.q1[i], data.q1[i].transpose(), &data.r1[i])).collect();
    let m2 = (0..nn * nn)
        .map(|idx| {
            let (i, k) = (idx / nn, idx % nn);
            join(&data.p2[idx], &data.q2[idx], data.q2[k * nn + i].transpose(), &data.r2[idx])
        })
        .collect();
    (m1, m2)
}

pub fn sufficiency2(problem: &BilinearProblem2, grid: &Grid, sol: &NcSolution) -> Result<Sufficiency2Report> {
    let p = problem.to_problem()?;
    let data = volterra::accessory_from_solution(&p, grid, &sol.as_volterra())?;
    let (m1, m2) = joint_blocks(&data);
    let joint_form = QuadIntegralForm::new(m1, m2, 1.0)?;
    let joint = pd_report(&joint_form, grid, false)?;
    let acc = volterra::reduce_accessory(grid, &data)?;
    let reduced = volterra::check_pd_volterra(&acc.form, grid)?;
    Ok(Sufficiency2Report { joint, reduced, reduced_form: acc.form })
}

/// Coefficients of a Volterra-Lotka system with controls:
/// `x_i(t) = x0_i + ∫_0^t e^{−μ(t−s)}[A x + Σ_jk b_i[j,k] x_j x_k] ds
///  + ½∫∫ e^{−μ(t−σ)}[Σ_j c[i,j] x_j(s) u_j(σ)
///  + Σ_jk d_i[j,k] x_j(s) x_k(σ) u_j(s) u_k(σ)] dσ ds`,
/// with cost `∫ [½p1|x|² + ½r1|u|²] dt`. Controls pair with the first `m`
/// species.
#[derive(Debug, Clone)]
pub struct LotkaParams {
    pub x0: Vec<f64>,
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub d: Vec<DMatrix<f64>>,
    pub memory: f64,
    pub p1: f64,
    pub r1: f64,
}

impl LotkaParams {
    /// No interactions, no control coupling.
    pub fn linear(x0: Vec<f64>, a: DMatrix<f64>, m: usize) -> Self {
        let n = x0.len();
        Self {
            x0,
            a,
            b: vec![DMatrix::zeros(n, n); n],
            c: DMatrix::zeros(n, m),
            d: vec![DMatrix::zeros(m, m); n],
            memory: 0.0,
            p1: 1.0,
            r1: 1.0,
        }
    }
}

/// Encodes the Lotka system. The `c` term fits the bilinear `D` block; the
/// quadratic `b` term and the `d` term (quadratic in `u`) are outside the
/// bilinear template and travel as generic extra kernels.
pub fn lotka_preset(n: usize, m: usize, params: &LotkaParams) -> Result<BilinearProblem2> {
    let bad = |what: &str| Err(Error::Shape(format!("Lotka parameters: {what}")));
    if m > n {
        return bad("controls pair with species, so m ≤ n");
    }
    if params.x0.len() != n || params.a.shape() != (n, n) {
        return bad("x0 / A dimensions");
    }
    if params.b.len() != n || params.b.iter().any(|b| b.shape() != (n, n)) {
        return bad("b must hold n blocks of n × n");
    }
    if params.c.shape() != (n, m) {
        return bad("c must be n × m");
    }
    if params.d.len() != n || params.d.iter().any(|d| d.shape() != (m, m)) {
        return bad("d must hold n blocks of m × m");
    }
    let mu = params.memory;
    let decay = move |t: f64, s: f64| (-mu * (t - s)).exp();
    let x0 = params.x0.clone();
    let a = params.a.clone();
    let mut prob = BilinearProblem1::new(n, m).lift();
    prob.y0 = Arc::new(move |_| x0.clone());
    prob.a = Arc::new(move |t, s| &a * decay(t, s));
    let (p1, r1) = (params.p1, params.r1);
    prob.p1 = Arc::new(move |_| DMatrix::identity(n, n) * p1);
    prob.r1 = Arc::new(move |_| DMatrix::identity(m, m) * r1);
    prob.b = Arc::new(move |_, _| DMatrix::zeros(n, m));

    if params.c.iter().any(|v| *v != 0.0) {
        let c = params.c.clone();
        prob.d = Some(Arc::new(move |t, _, sg| {
            let f = 0.5 * decay(t, sg);
            Tri3::from_fn([n, m, n], Signature::OneLowerTwoUpper, |j, k, i| if j == k { f * c[(i, j)] } else { 0.0 })
        }));
    }
    if params.b.iter().any(|b| b.iter().any(|v| *v != 0.0)) {
        let b = params.b.clone();
        let (jb, hb) = (params.b.clone(), params.b.clone());
        prob.extra_f1 = Some(
            Kernel::new(2, &[n, m], n, move |p, s| {
                let f = decay(p[0][0], p[1][0]);
                let x = DVector::from_column_slice(s[0]);
                b.iter().map(|bi| f * x.dot(&(bi * &x))).collect()
            })
            .with_jacobian(0, move |p, s| {
                let f = decay(p[0][0], p[1][0]);
                let x = DVector::from_column_slice(s[0]);
                DMatrix::from_fn(n, n, |i, j| f * ((&jb[i] + jb[i].transpose()) * &x)[j])
            })
            .with_jacobian(1, move |_, _| DMatrix::zeros(n, m))
            .with_hessian(0, 0, move |p, _| {
                let f = decay(p[0][0], p[1][0]);
                Tri3::from_fn([n, n, n], Signature::OneLowerTwoUpper, |j, k, i| f * (hb[i][(j, k)] + hb[i][(k, j)]))
            })
            .with_zero_hessians(),
        );
    }
    if params.d.iter().any(|d| d.iter().any(|v| *v != 0.0)) {
        let d = params.d.clone();
        prob.extra_f2 = Some(Kernel::new(3, &[n, n, m, m], n, move |p, s| {
            let f = decay(p[0][0], p[2][0]);
            let (x1, x2, u1, u2) = (s[0], s[1], s[2], s[3]);
            d.iter()
                .map(|di| {
                    let mut v = 0.0;
                    for j in 0..m {
                        for k in 0..m {
                            v += di[(j, k)] * x1[j] * x2[k] * u1[j] * u2[k];
                        }
                    }
                    f * v
                })
                .collect()
        }));
    }
    Ok(prob)
}

/// Predator-prey harvesting problem: two species, harvesting effort on
/// each, quadratic population and effort costs.
pub fn harvesting_preset() -> BilinearProblem2 {
    let params = LotkaParams {
        x0: vec![1.0, 0.5],
        a: DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.3]),
        b: vec![
            DMatrix::from_row_slice(2, 2, &[-0.2, -0.3, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.2, 0.0, 0.0]),
        ],
        c: DMatrix::from_row_slice(2, 2, &[-0.4, 0.0, 0.0, -0.4]),
        d: vec![
            DMatrix::from_row_slice(2, 2, &[0.02, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.02]),
        ],
        memory: 0.5,
        p1: 1.0,
        r1: 0.5,
    };
    lotka_preset(2, 2, &params).expect("fixed dimensions are consistent")
}

/// First-order preset with a small bilinear coupling: `n = 2`, `m = 1`.
pub fn first_order_preset() -> BilinearProblem1 {
    let mut p = BilinearProblem1::new(2, 1);
    p.y0 = Arc::new(|t| vec![1.0, 0.5 * (1.0 - t)]);
    p.a = Arc::new(|t, s| DMatrix::from_row_slice(2, 2, &[0.3, 0.1 * (t - s), -0.2, 0.1]));
    p.b = Arc::new(|t, s| DMatrix::from_row_slice(2, 1, &[1.0, 0.5 * (1.0 + t - s)]));
    p.c = Some(Arc::new(|t, s| {
        Tri3::from_fn([2, 1, 2], Signature::OneLowerTwoUpper, |j, _, i| {
            0.1 * (1.0 + (i + j) as f64) * (0.5 * (t - s)).cos()
        })
    }));
    p.p = Arc::new(|t| DMatrix::from_row_slice(2, 2, &[1.0, 0.1 * t, 0.1 * t, 0.5]));
    p.q = Arc::new(|t| DMatrix::from_row_slice(2, 1, &[0.1 * t, 0.0]));
    p.r = Arc::new(|t| DMatrix::from_element(1, 1, 1.0 + 0.5 * t));
    p
}

/// Second-order preset: the first-order one plus a `D` block and two-point
/// cost blocks.
pub fn second_order_preset() -> BilinearProblem2 {
    let mut p = first_order_preset().lift();
    p.d = Some(Arc::new(|t, s, sg| {
        Tri3::from_fn([2, 1, 2], Signature::OneLowerTwoUpper, |j, _, i| {
            0.05 * (1.0 + i as f64 - j as f64) * (-(t - s) - 0.5 * (t - sg).abs()).exp()
        })
    }));
    p.p2 = Some(Arc::new(|t, s| DMatrix::identity(2, 2) * (0.1 * (1.0 + t * s))));
    p.q2 = Some(Arc::new(|t, s| DMatrix::from_row_slice(2, 1, &[0.05 * (t - s), 0.02])));
    p.r2 = Some(Arc::new(|t, s| DMatrix::from_element(1, 1, 0.2 * (-(t - s).abs()).exp())));
    p
}

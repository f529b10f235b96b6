//! Discrete machinery shared by the Fredholm and Volterra pipelines.
//!
//! Both families are written as
//! `y_a = y0_a + Σ_b W_ab f1(a,b) + ½ Σ_b Σ_c W_ab W_ac f2(a,b,c)`
//! with `W_ab = w_b` (Fredholm) or the partial trapezoid weight of `b` in
//! `∫_0^{t_a}` (Volterra). The costate, gradient and second-order blocks are
//! the exact adjoints of that discrete system, so directional derivatives
//! agree with finite differences of the discrete cost up to rounding.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{Family, Field, Problem};
use crate::quadrature::{Grid, GridKind};

/// Iteration controls for the nonlinear state solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Sup-norm residual target, scaled by `max(1, |y|_∞)`.
    pub tol: f64,
    /// Picard relaxation `α` of the Fredholm iteration.
    pub relaxation: f64,
    /// Relaxation of the per-node fixed point in the Volterra march.
    pub node_relaxation: f64,
    pub max_picard: usize,
    pub max_newton: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-12, relaxation: 0.5, node_relaxation: 1.0, max_picard: 400, max_newton: 50 }
    }
}

/// Convergence information of a state solve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDiagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub used_newton: bool,
}

/// Linearized dynamics `A_ab = ∂_y f1(a,b) + Σ_c W_ac ∂_{y1} f2(a,b,c)` and
/// the analogous control block `B_ab`; blocks with `W_ab = 0` are left zero.
#[derive(Debug, Clone)]
pub(crate) struct Lin {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

/// Pointwise and two-point Hessian blocks of the Hamiltonian and the
/// ancillary Hamiltonian, plus the linearized dynamics.
#[derive(Debug, Clone)]
pub(crate) struct SecondOrder {
    pub lin: Lin,
    pub hyy: Vec<DMatrix<f64>>,
    pub hyu: Vec<DMatrix<f64>>,
    pub huu: Vec<DMatrix<f64>>,
    pub p2: Vec<DMatrix<f64>>,
    pub q2: Vec<DMatrix<f64>>,
    pub r2: Vec<DMatrix<f64>>,
    pub p0: DMatrix<f64>,
}

pub(crate) struct Disc<'a> {
    pub p: &'a Problem,
    pub g: &'a Grid,
    pub nn: usize,
    pub n: usize,
    pub m: usize,
    pub volterra: bool,
    w: Vec<f64>,
}

impl<'a> Disc<'a> {
    pub fn new(p: &'a Problem, g: &'a Grid, family: Family) -> Result<Self> {
        if p.family() != family {
            return Err(Error::Problem(format!(
                "expected a {family:?} problem, got {:?}",
                p.family()
            )));
        }
        let nn = g.len();
        let volterra = family == Family::Volterra;
        if volterra && (g.kind() != GridKind::Interval) {
            return Err(Error::Grid("Volterra problems need an interval grid".into()));
        }
        let mut w = vec![0.0; nn * nn];
        for a in 0..nn {
            for b in 0..nn {
                w[a * nn + b] = if volterra { g.partial_weight(a, b) } else { g.weight(b) };
            }
        }
        Ok(Self { p, g, nn, n: p.n(), m: p.m(), volterra, w })
    }

    #[inline]
    pub fn wab(&self, a: usize, b: usize) -> f64 {
        self.w[a * self.nn + b]
    }

    pub fn last(&self) -> usize {
        self.nn - 1
    }

    #[inline]
    pub fn rho(&self, a: usize, i: usize) -> f64 {
        self.g.weight(a) * self.wab(a, i) / self.g.weight(i)
    }

    #[inline]
    pub fn rho2(&self, a: usize, i: usize, k: usize) -> f64 {
        self.g.weight(a) * self.wab(a, i) * self.wab(a, k) / (self.g.weight(i) * self.g.weight(k))
    }

    pub fn check_control(&self, u: &Field) -> Result<()> {
        u.check(self.nn, self.m, "control")
    }

    pub fn check_state(&self, y: &Field) -> Result<()> {
        y.check(self.nn, self.n, "state")
    }

    fn terminal_point(&self) -> [f64; 1] {
        [self.g.horizon()]
    }

    #[inline]
    fn pts2(&self, a: usize, b: usize) -> [&[f64]; 2] {
        [self.g.point(a), self.g.point(b)]
    }

    #[inline]
    fn pts3(&self, a: usize, b: usize, c: usize) -> [&[f64]; 3] {
        [self.g.point(a), self.g.point(b), self.g.point(c)]
    }

    // ---- state ----------------------------------------------------------

    /// Right-hand side of the state equation at node `a`, summing only pairs
    /// selected by `keep(b, c)` for the double term and `keep1(b)` for the
    /// single term.
    fn rhs_partial(
        &self,
        a: usize,
        y: &Field,
        u: &Field,
        keep1: impl Fn(usize) -> bool,
        keep2: impl Fn(usize, usize) -> bool,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        // the pair sum is symmetric in (b, c), so the stored kernel gives the
        // same value as its symmetrization at half the cost
        let (f1, f2) = (self.p.f1(), self.p.original_f2());
        for b in 0..self.nn {
            let wb = self.wab(a, b);
            if wb == 0.0 {
                continue;
            }
            if !f1.is_zero() && keep1(b) {
                let v = f1.eval(&self.pts2(a, b), &[y.at(b), u.at(b)]);
                axpy(&mut out, wb, &v);
            }
            if !f2.is_zero() {
                for c in 0..self.nn {
                    let wc = self.wab(a, c);
                    if wc == 0.0 || !keep2(b, c) {
                        continue;
                    }
                    let v = f2.eval(&self.pts3(a, b, c), &[y.at(b), y.at(c), u.at(b), u.at(c)]);
                    axpy(&mut out, 0.5 * wb * wc, &v);
                }
            }
        }
        out
    }

    pub fn rhs(&self, y: &Field, u: &Field, y0: &Field) -> Field {
        let mut out = y0.clone();
        for a in 0..self.nn {
            let r = self.rhs_partial(a, y, u, |_| true, |_, _| true);
            axpy(out.at_mut(a), 1.0, &r);
        }
        out
    }

    pub fn state_residual(&self, y: &Field, u: &Field) -> f64 {
        let y0 = self.p.forcing_field(self.g);
        self.rhs(y, u, &y0).sup_distance(y)
    }

    pub fn solve_fredholm_state(
        &self,
        u: &Field,
        opts: &SolverOptions,
    ) -> Result<(Field, StateDiagnostics)> {
        self.check_control(u)?;
        let y0 = self.p.forcing_field(self.g);
        let mut y = y0.clone();
        if self.p.f1().is_zero() && self.p.f2().is_zero() {
            return Ok((y, StateDiagnostics { iterations: 0, residual: 0.0, used_newton: false }));
        }
        let alpha = opts.relaxation;
        let mut prev = f64::INFINITY;
        let mut best = (f64::INFINITY, y.clone());
        let mut iters = 0;
        for k in 0..opts.max_picard {
            iters = k + 1;
            let r = self.rhs(&y, u, &y0);
            let res = r.sup_distance(&y);
            if !res.is_finite() {
                break;
            }
            if res < best.0 {
                best = (res, y.clone());
            }
            if res <= opts.tol * y.sup_norm().max(1.0) {
                return Ok((y, StateDiagnostics { iterations: k, residual: res, used_newton: false }));
            }
            // contraction too slow or diverging: hand over to Newton
            if k >= 3 && res > 0.95 * prev {
                break;
            }
            prev = res;
            let mut next = y.clone();
            for (x, (yv, rv)) in next.as_mut_slice().iter_mut().zip(y.as_slice().iter().zip(r.as_slice())) {
                *x = (1.0 - alpha) * yv + alpha * rv;
            }
            y = next;
        }
        self.newton_fredholm(best.1, u, &y0, opts, iters)
    }

    fn newton_fredholm(
        &self,
        mut y: Field,
        u: &Field,
        y0: &Field,
        opts: &SolverOptions,
        picard_iters: usize,
    ) -> Result<(Field, StateDiagnostics)> {
        let dim = self.nn * self.n;
        let mut res = self.rhs(&y, u, y0).sup_distance(&y);
        for k in 0..opts.max_newton {
            if res <= opts.tol * y.sup_norm().max(1.0) {
                return Ok((
                    y,
                    StateDiagnostics { iterations: picard_iters + k, residual: res, used_newton: true },
                ));
            }
            let r = self.rhs(&y, u, y0);
            let rvec = DVector::from_iterator(
                dim,
                r.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a - b),
            );
            let lin = self.linearize(&y, u, false);
            let jm = DMatrix::identity(dim, dim) - self.l_matrix(&lin);
            let step = lu_solve_vec(&jm, rvec, "Newton matrix of the state equation", self.n)?;
            let step = Field::from_vec(self.n, step.as_slice().to_vec())?;
            let mut lambda = 1.0;
            loop {
                let trial = y.plus_scaled(lambda, &step);
                let tres = self.rhs(&trial, u, y0).sup_distance(&trial);
                if tres < res || lambda < 1e-6 {
                    y = trial;
                    res = tres;
                    break;
                }
                lambda *= 0.5;
            }
        }
        if res <= opts.tol * y.sup_norm().max(1.0) {
            return Ok((
                y,
                StateDiagnostics {
                    iterations: picard_iters + opts.max_newton,
                    residual: res,
                    used_newton: true,
                },
            ));
        }
        Err(Error::NonConvergence {
            what: "Fredholm state solve".into(),
            iterations: picard_iters + opts.max_newton,
            residual: res,
        })
    }

    /// Node-by-node march; `y_i` enters both integrals through the diagonal
    /// weight and is found by relaxed fixed point, with Newton as fallback.
    pub fn solve_volterra_state(
        &self,
        u: &Field,
        opts: &SolverOptions,
    ) -> Result<(Field, StateDiagnostics)> {
        self.check_control(u)?;
        let y0 = self.p.forcing_field(self.g);
        let mut y = y0.clone();
        let mut total = 0;
        let mut worst: f64 = 0.0;
        let mut used_newton = false;
        if self.p.f1().is_zero() && self.p.f2().is_zero() {
            return Ok((y, StateDiagnostics { iterations: 0, residual: 0.0, used_newton }));
        }
        for i in 1..self.nn {
            // terms not involving y_i
            let mut fixed = y0.at(i).to_vec();
            let r = self.rhs_partial(i, &y, u, |b| b != i, |b, c| b != i && c != i);
            axpy(&mut fixed, 1.0, &r);
            let node_rhs = |y: &Field| {
                let mut v = fixed.clone();
                let r = self.rhs_partial(i, y, u, |b| b == i, |b, c| b == i || c == i);
                axpy(&mut v, 1.0, &r);
                v
            };
            // initial guess: previous node
            let guess = y.at(i - 1).to_vec();
            y.at_mut(i).copy_from_slice(&guess);
            let alpha = opts.node_relaxation;
            let mut res = f64::INFINITY;
            let mut prev = f64::INFINITY;
            let mut converged = false;
            for k in 0..opts.max_picard {
                total += 1;
                let v = node_rhs(&y);
                res = sup_diff(&v, y.at(i));
                let scale = sup(y.at(i)).max(1.0);
                if res <= opts.tol * scale {
                    converged = true;
                    break;
                }
                if !res.is_finite() || (k >= 3 && res > 0.9 * prev) {
                    break;
                }
                prev = res;
                let yi = y.at_mut(i);
                for (x, vv) in yi.iter_mut().zip(&v) {
                    *x = (1.0 - alpha) * *x + alpha * vv;
                }
            }
            if !converged {
                used_newton = true;
                if !res.is_finite() {
                    y.at_mut(i).copy_from_slice(&guess);
                }
                for _ in 0..opts.max_newton {
                    total += 1;
                    let v = node_rhs(&y);
                    res = sup_diff(&v, y.at(i));
                    if res <= opts.tol * sup(y.at(i)).max(1.0) {
                        converged = true;
                        break;
                    }
                    let jac = DMatrix::identity(self.n, self.n) - self.node_jacobian(i, &y, u);
                    let rv = DVector::from_iterator(self.n, v.iter().zip(y.at(i)).map(|(a, b)| a - b));
                    let step = lu_solve_vec(&jac, rv, &format!("Volterra node equation at node {i}"), self.n)?;
                    for (x, s) in y.at_mut(i).iter_mut().zip(step.iter()) {
                        *x += s;
                    }
                }
            }
            if !converged {
                return Err(Error::NonConvergence {
                    what: format!("Volterra state solve at node {i} (t = {})", self.g.point(i)[0]),
                    iterations: total,
                    residual: res,
                });
            }
            worst = worst.max(res);
        }
        Ok((y, StateDiagnostics { iterations: total, residual: worst, used_newton }))
    }

    /// `∂ RHS_i / ∂ y_i` for the Volterra node equation.
    fn node_jacobian(&self, i: usize, y: &Field, u: &Field) -> DMatrix<f64> {
        let wii = self.wab(i, i);
        let mut j = DMatrix::zeros(self.n, self.n);
        if !self.p.f1().is_zero() {
            j += self.p.f1().jacobian(&self.pts2(i, i), &[y.at(i), u.at(i)], 0) * wii;
        }
        if !self.p.f2().is_zero() {
            for c in 0..=i {
                let wc = self.wab(i, c);
                if wc == 0.0 {
                    continue;
                }
                let pts = self.pts3(i, i, c);
                let slots = [y.at(i), y.at(c), u.at(i), u.at(c)];
                j += self.p.f2().jacobian(&pts, &slots, 0) * (wii * wc);
            }
        }
        j
    }

    // ---- linearization -------------------------------------------------

    pub fn linearize(&self, y: &Field, u: &Field, need_b: bool) -> Lin {
        let (n, m, nn) = (self.n, self.m, self.nn);
        let mut a_blocks = vec![DMatrix::zeros(n, n); nn * nn];
        let mut b_blocks = if need_b { vec![DMatrix::zeros(n, m); nn * nn] } else { Vec::new() };
        let (f1, f2) = (self.p.f1(), self.p.f2());
        for a in 0..nn {
            for b in 0..nn {
                if self.wab(a, b) == 0.0 {
                    continue;
                }
                let idx = a * nn + b;
                if !f1.is_zero() {
                    let pts = self.pts2(a, b);
                    let slots = [y.at(b), u.at(b)];
                    a_blocks[idx] += f1.jacobian(&pts, &slots, 0);
                    if need_b {
                        b_blocks[idx] += f1.jacobian(&pts, &slots, 1);
                    }
                }
                if !f2.is_zero() {
                    for c in 0..nn {
                        let wc = self.wab(a, c);
                        if wc == 0.0 {
                            continue;
                        }
                        let pts = self.pts3(a, b, c);
                        let slots = [y.at(b), y.at(c), u.at(b), u.at(c)];
                        a_blocks[idx] += f2.jacobian(&pts, &slots, 0) * wc;
                        if need_b {
                            b_blocks[idx] += f2.jacobian(&pts, &slots, 2) * wc;
                        }
                    }
                }
            }
        }
        Lin { a: a_blocks, b: b_blocks }
    }

    /// Dense `(N·n)²` matrix with blocks `W_ab A_ab`.
    pub fn l_matrix(&self, lin: &Lin) -> DMatrix<f64> {
        let (n, nn) = (self.n, self.nn);
        let mut l = DMatrix::zeros(nn * n, nn * n);
        for a in 0..nn {
            for b in 0..nn {
                let w = self.wab(a, b);
                if w != 0.0 {
                    l.view_mut((a * n, b * n), (n, n)).copy_from(&(&lin.a[a * nn + b] * w));
                }
            }
        }
        l
    }

    /// Solves `δy_a = Σ_b W_ab (A_ab δy_b + B_ab δu_b)`.
    pub fn linearized_solve(&self, lin: &Lin, du: &Field) -> Result<Field> {
        let (n, nn) = (self.n, self.nn);
        let mut r = vec![0.0; nn * n];
        for a in 0..nn {
            for b in 0..nn {
                let w = self.wab(a, b);
                if w == 0.0 {
                    continue;
                }
                let v = &lin.b[a * nn + b] * DVector::from_column_slice(du.at(b));
                for k in 0..n {
                    r[a * n + k] += w * v[k];
                }
            }
        }
        self.solve_i_minus_l(lin, r)
    }

    /// `(I − L) x = r`, forward block substitution for Volterra.
    pub fn solve_i_minus_l(&self, lin: &Lin, r: Vec<f64>) -> Result<Field> {
        let (n, nn) = (self.n, self.nn);
        if !self.volterra {
            let dim = nn * n;
            let m = DMatrix::identity(dim, dim) - self.l_matrix(lin);
            let x = lu_solve_vec(&m, DVector::from_vec(r), "I − A_w (linearized state operator)", n)?;
            return Field::from_vec(n, x.as_slice().to_vec());
        }
        let mut x = Field::zeros(nn, n);
        for a in 0..nn {
            let mut rhs = DVector::from_column_slice(&r[a * n..(a + 1) * n]);
            for b in 0..a {
                let w = self.wab(a, b);
                if w != 0.0 {
                    rhs += &lin.a[a * nn + b] * DVector::from_column_slice(x.at(b)) * w;
                }
            }
            let m = DMatrix::identity(n, n) - &lin.a[a * nn + a] * self.wab(a, a);
            let sol = lu_solve_vec(&m, rhs, &format!("linearized Volterra node system at node {a}"), n)?;
            x.at_mut(a).copy_from_slice(sol.as_slice());
        }
        Ok(x)
    }

    // ---- costate, gradient, Hamiltonian --------------------------------

    /// `ω = ∇_Y F0(T, y(T))`; zero for Fredholm.
    pub fn omega(&self, y: &Field) -> Vec<f64> {
        let f0 = self.p.terminal();
        if !self.volterra || f0.is_zero() {
            return vec![0.0; self.n];
        }
        let tp = self.terminal_point();
        f0.jacobian(&[&tp], &[y.at(self.last())], 0).row(0).iter().copied().collect()
    }

    /// Explicit part of the costate equation: `∇_y F1 + Σ_k w_k ∇_{y1} F2(i,k)`.
    fn costate_source(&self, y: &Field, u: &Field) -> Vec<DVector<f64>> {
        let (n, nn) = (self.n, self.nn);
        let (c1, c2) = (self.p.cost1(), self.p.cost2());
        (0..nn)
            .map(|i| {
                let mut c = DVector::zeros(n);
                if !c1.is_zero() {
                    c += c1.jacobian(&[self.g.point(i)], &[y.at(i), u.at(i)], 0).row(0).transpose();
                }
                if !c2.is_zero() {
                    for k in 0..nn {
                        let j = c2.jacobian(&self.pts2(i, k), &[y.at(i), y.at(k), u.at(i), u.at(k)], 0);
                        c += j.row(0).transpose() * self.g.weight(k);
                    }
                }
                c
            })
            .collect()
    }

    pub fn costate(&self, y: &Field, u: &Field, lin: &Lin) -> Result<(Field, Vec<f64>)> {
        let (n, nn) = (self.n, self.nn);
        let omega = self.omega(y);
        let mut src = self.costate_source(y, u);
        if self.volterra && omega.iter().any(|v| *v != 0.0) {
            let om = DVector::from_column_slice(&omega);
            let last = self.last();
            for (i, s) in src.iter_mut().enumerate() {
                *s += lin.a[last * nn + i].transpose() * &om;
            }
        }
        if !self.volterra {
            // (I − L)^T ψ̃ = D c with ψ̃_i = w_i ψ_i^T
            let dim = nn * n;
            let mut rhs = DVector::zeros(dim);
            for i in 0..nn {
                rhs.rows_mut(i * n, n).copy_from(&(&src[i] * self.g.weight(i)));
            }
            let m = (DMatrix::identity(dim, dim) - self.l_matrix(lin)).transpose();
            let sol = lu_solve_vec(&m, rhs, "costate operator (I − A_w)ᵀ", n)?;
            let mut psi = Field::zeros(nn, n);
            for i in 0..nn {
                let wi = self.g.weight(i);
                for k in 0..n {
                    psi.at_mut(i)[k] = sol[i * n + k] / wi;
                }
            }
            return Ok((psi, omega));
        }
        let mut psi = Field::zeros(nn, n);
        for i in (0..nn).rev() {
            let mut rhs = src[i].clone();
            for a in i + 1..nn {
                let r = self.rho(a, i);
                if r != 0.0 {
                    rhs += lin.a[a * nn + i].transpose() * DVector::from_column_slice(psi.at(a)) * r;
                }
            }
            let m = DMatrix::identity(n, n) - lin.a[i * nn + i].transpose() * self.wab(i, i);
            let sol = lu_solve_vec(&m, rhs, &format!("costate node system at node {i}"), n)?;
            psi.at_mut(i).copy_from_slice(sol.as_slice());
        }
        Ok((psi, omega))
    }

    pub fn costate_residual(&self, y: &Field, u: &Field, psi: &Field, omega: &[f64], lin: &Lin) -> f64 {
        let (n, nn) = (self.n, self.nn);
        let src = self.costate_source(y, u);
        let mut th = vec![0.0; n];
        let mut worst: f64 = 0.0;
        for i in 0..nn {
            let mut r = src[i].clone();
            for a in 0..nn {
                if self.wab(a, i) != 0.0 && self.coef(a, i, psi, omega, &mut th) {
                    r += lin.a[a * nn + i].transpose() * DVector::from_column_slice(&th);
                }
            }
            for k in 0..n {
                worst = worst.max((r[k] - psi.at(i)[k]).abs());
            }
        }
        worst
    }

    /// Costate weight multiplying the kernels of equation `a` in the
    /// Hamiltonian at node `i`.
    #[inline]
    fn coef(&self, a: usize, i: usize, psi: &Field, omega: &[f64], out: &mut [f64]) -> bool {
        let r = self.rho(a, i);
        let mut any = false;
        for (k, o) in out.iter_mut().enumerate() {
            *o = r * psi.at(a)[k];
            if self.volterra && a == self.last() {
                *o += omega[k];
            }
            any |= *o != 0.0;
        }
        any
    }

    #[inline]
    fn coef2(&self, a: usize, i: usize, k: usize, psi: &Field, omega: &[f64], out: &mut [f64]) -> bool {
        let r = self.rho2(a, i, k);
        let mut any = false;
        for (j, o) in out.iter_mut().enumerate() {
            *o = r * psi.at(a)[j];
            if self.volterra && a == self.last() {
                *o += omega[j];
            }
            any |= *o != 0.0;
        }
        any
    }

    /// `∇_{u_i} H` at every node.
    pub fn gradient(&self, y: &Field, u: &Field, psi: &Field, omega: &[f64], lin: &Lin) -> Field {
        let (n, m, nn) = (self.n, self.m, self.nn);
        let (c1, c2) = (self.p.cost1(), self.p.cost2());
        let mut g = Field::zeros(nn, m);
        let mut th = vec![0.0; n];
        for i in 0..nn {
            let mut gi = DVector::zeros(m);
            if !c1.is_zero() {
                gi += c1.jacobian(&[self.g.point(i)], &[y.at(i), u.at(i)], 1).row(0).transpose();
            }
            if !c2.is_zero() {
                for k in 0..nn {
                    let j = c2.jacobian(&self.pts2(i, k), &[y.at(i), y.at(k), u.at(i), u.at(k)], 2);
                    gi += j.row(0).transpose() * self.g.weight(k);
                }
            }
            for a in 0..nn {
                if self.wab(a, i) == 0.0 || !self.coef(a, i, psi, omega, &mut th) {
                    continue;
                }
                gi += lin.b[a * nn + i].transpose() * DVector::from_column_slice(&th);
            }
            g.at_mut(i).copy_from_slice(gi.as_slice());
        }
        g
    }

    /// Value of the Hamiltonian at node `i`.
    pub fn hamiltonian(&self, i: usize, y: &Field, u: &Field, psi: &Field, omega: &[f64]) -> f64 {
        let (n, nn) = (self.n, self.nn);
        let (f1, f2, c1, c2) = (self.p.f1(), self.p.f2(), self.p.cost1(), self.p.cost2());
        let mut h = c1.eval_scalar(&[self.g.point(i)], &[y.at(i), u.at(i)]);
        if !c2.is_zero() {
            for k in 0..nn {
                h += self.g.weight(k)
                    * c2.eval_scalar(&self.pts2(i, k), &[y.at(i), y.at(k), u.at(i), u.at(k)]);
            }
        }
        if self.volterra {
            let tp = self.terminal_point();
            h += self.p.terminal().eval_scalar(&[&tp], &[y.at(self.last())]);
        }
        let mut th = vec![0.0; n];
        for a in 0..nn {
            if self.wab(a, i) == 0.0 || !self.coef(a, i, psi, omega, &mut th) {
                continue;
            }
            let mut e = vec![0.0; n];
            if !f1.is_zero() {
                e = f1.eval(&self.pts2(a, i), &[y.at(i), u.at(i)]);
            }
            if !f2.is_zero() {
                for c in 0..nn {
                    let wc = self.wab(a, c);
                    if wc != 0.0 {
                        let v = f2.eval(&self.pts3(a, i, c), &[y.at(i), y.at(c), u.at(i), u.at(c)]);
                        axpy(&mut e, wc, &v);
                    }
                }
            }
            h += dot(&th, &e);
        }
        h
    }

    /// Ancillary second-order Hamiltonian `h2` at the node pair `(i, k)`.
    pub fn h2(&self, i: usize, k: usize, y: &Field, u: &Field, psi: &Field, omega: &[f64]) -> f64 {
        let n = self.n;
        let slots = [y.at(i), y.at(k), u.at(i), u.at(k)];
        let mut h = self.p.cost2().eval_scalar(&self.pts2(i, k), &slots);
        let f2 = self.p.f2();
        if f2.is_zero() {
            return h;
        }
        let mut th = vec![0.0; n];
        for a in 0..self.nn {
            if self.wab(a, i) == 0.0 || self.wab(a, k) == 0.0 {
                continue;
            }
            if self.coef2(a, i, k, psi, omega, &mut th) {
                h += dot(&th, &f2.eval(&self.pts3(a, i, k), &slots));
            }
        }
        h
    }

    pub fn cost(&self, y: &Field, u: &Field) -> f64 {
        let (c1, c2) = (self.p.cost1(), self.p.cost2());
        let mut j = 0.0;
        if self.volterra {
            let tp = self.terminal_point();
            j += self.p.terminal().eval_scalar(&[&tp], &[y.at(self.last())]);
        }
        for i in 0..self.nn {
            let wi = self.g.weight(i);
            if !c1.is_zero() {
                j += wi * c1.eval_scalar(&[self.g.point(i)], &[y.at(i), u.at(i)]);
            }
            if !c2.is_zero() {
                for k in 0..self.nn {
                    j += 0.5
                        * wi
                        * self.g.weight(k)
                        * c2.eval_scalar(&self.pts2(i, k), &[y.at(i), y.at(k), u.at(i), u.at(k)]);
                }
            }
        }
        j
    }

    // ---- second order --------------------------------------------------

    pub fn second_order(&self, y: &Field, u: &Field, psi: &Field, omega: &[f64], lin: Lin) -> SecondOrder {
        let (n, m, nn) = (self.n, self.m, self.nn);
        let (f1, f2, c1, c2) = (self.p.f1(), self.p.f2(), self.p.cost1(), self.p.cost2());
        let mut hyy = vec![DMatrix::zeros(n, n); nn];
        let mut hyu = vec![DMatrix::zeros(n, m); nn];
        let mut huu = vec![DMatrix::zeros(m, m); nn];
        let mut p2 = vec![DMatrix::zeros(n, n); nn * nn];
        let mut q2 = vec![DMatrix::zeros(n, m); nn * nn];
        let mut r2 = vec![DMatrix::zeros(m, m); nn * nn];
        let one = [1.0];
        let mut th = vec![0.0; n];

        for i in 0..nn {
            if !c1.is_zero() {
                let pts = [self.g.point(i)];
                let slots = [y.at(i), u.at(i)];
                hyy[i] += c1.hessian(&pts, &slots, 0, 0).contract_lower_unchecked(&one);
                hyu[i] += c1.hessian(&pts, &slots, 0, 1).contract_lower_unchecked(&one);
                huu[i] += c1.hessian(&pts, &slots, 1, 1).contract_lower_unchecked(&one);
            }
            if !c2.is_zero() {
                for k in 0..nn {
                    let wk = self.g.weight(k);
                    let pts = self.pts2(i, k);
                    let slots = [y.at(i), y.at(k), u.at(i), u.at(k)];
                    hyy[i] += c2.hessian(&pts, &slots, 0, 0).contract_lower_unchecked(&one) * wk;
                    hyu[i] += c2.hessian(&pts, &slots, 0, 2).contract_lower_unchecked(&one) * wk;
                    huu[i] += c2.hessian(&pts, &slots, 2, 2).contract_lower_unchecked(&one) * wk;
                    let idx = i * nn + k;
                    p2[idx] += c2.hessian(&pts, &slots, 0, 1).contract_lower_unchecked(&one);
                    q2[idx] += c2.hessian(&pts, &slots, 0, 3).contract_lower_unchecked(&one);
                    r2[idx] += c2.hessian(&pts, &slots, 2, 3).contract_lower_unchecked(&one);
                }
            }
            for a in 0..nn {
                if self.wab(a, i) == 0.0 || !self.coef(a, i, psi, omega, &mut th) {
                    continue;
                }
                if !f1.is_zero() {
                    let pts = self.pts2(a, i);
                    let slots = [y.at(i), u.at(i)];
                    hyy[i] += f1.hessian(&pts, &slots, 0, 0).contract_lower_unchecked(&th);
                    hyu[i] += f1.hessian(&pts, &slots, 0, 1).contract_lower_unchecked(&th);
                    huu[i] += f1.hessian(&pts, &slots, 1, 1).contract_lower_unchecked(&th);
                }
                if !f2.is_zero() {
                    for c in 0..nn {
                        let wc = self.wab(a, c);
                        if wc == 0.0 {
                            continue;
                        }
                        let pts = self.pts3(a, i, c);
                        let slots = [y.at(i), y.at(c), u.at(i), u.at(c)];
                        hyy[i] += f2.hessian(&pts, &slots, 0, 0).contract_lower_unchecked(&th) * wc;
                        hyu[i] += f2.hessian(&pts, &slots, 0, 2).contract_lower_unchecked(&th) * wc;
                        huu[i] += f2.hessian(&pts, &slots, 2, 2).contract_lower_unchecked(&th) * wc;
                    }
                }
            }
        }
        if !f2.is_zero() {
            for i in 0..nn {
                for k in 0..nn {
                    let idx = i * nn + k;
                    let slots = [y.at(i), y.at(k), u.at(i), u.at(k)];
                    for a in 0..nn {
                        if self.wab(a, i) == 0.0
                            || self.wab(a, k) == 0.0
                            || !self.coef2(a, i, k, psi, omega, &mut th)
                        {
                            continue;
                        }
                        let pts = self.pts3(a, i, k);
                        p2[idx] += f2.hessian(&pts, &slots, 0, 1).contract_lower_unchecked(&th);
                        q2[idx] += f2.hessian(&pts, &slots, 0, 3).contract_lower_unchecked(&th);
                        r2[idx] += f2.hessian(&pts, &slots, 2, 3).contract_lower_unchecked(&th);
                    }
                }
            }
        }
        let p0 = if self.volterra && !self.p.terminal().is_zero() {
            let tp = self.terminal_point();
            self.p
                .terminal()
                .hessian(&[&tp], &[y.at(self.last())], 0, 0)
                .contract_lower_unchecked(&one)
        } else {
            DMatrix::zeros(n, n)
        };
        SecondOrder { lin, hyy, hyu, huu, p2, q2, r2, p0 }
    }

    /// Terms of the second variation for `δu`; returns
    /// `(terminal, pointwise, cross)`.
    pub fn second_variation_terms(&self, so: &SecondOrder, du: &Field) -> Result<(f64, f64, f64)> {
        let nn = self.nn;
        let dy = self.linearized_solve(&so.lin, du)?;
        let col = |f: &Field, i: usize| DVector::from_column_slice(f.at(i));
        let terminal = if self.volterra {
            let d = col(&dy, self.last());
            d.dot(&(&so.p0 * &d))
        } else {
            0.0
        };
        let mut pointwise = 0.0;
        for i in 0..nn {
            let (y, v) = (col(&dy, i), col(du, i));
            pointwise += self.g.weight(i)
                * (y.dot(&(&so.hyy[i] * &y)) + 2.0 * y.dot(&(&so.hyu[i] * &v)) + v.dot(&(&so.huu[i] * &v)));
        }
        let mut cross = 0.0;
        for i in 0..nn {
            let (yi, vi) = (col(&dy, i), col(du, i));
            for k in 0..nn {
                let (yk, vk) = (col(&dy, k), col(du, k));
                let idx = i * nn + k;
                cross += self.g.weight(i)
                    * self.g.weight(k)
                    * (yi.dot(&(&so.p2[idx] * &yk))
                        + 2.0 * yi.dot(&(&so.q2[idx] * &vk))
                        + vi.dot(&(&so.r2[idx] * &vk)));
            }
        }
        Ok((terminal, pointwise, cross))
    }

    /// Newton step on `∇_u H = 0` with `y`, `ψ` frozen:
    /// `(diag H_uu + [w_k R2(i,k)]) Δu = −g`.
    pub fn stationarity_step(&self, so: &SecondOrder, g: &Field) -> Result<Field> {
        let (m, nn) = (self.m, self.nn);
        let dim = m * nn;
        let mut mat = DMatrix::zeros(dim, dim);
        for i in 0..nn {
            let mut blk = so.huu[i].clone();
            blk += &so.r2[i * nn + i] * self.g.weight(i);
            mat.view_mut((i * m, i * m), (m, m)).copy_from(&blk);
            for k in 0..nn {
                if k != i {
                    mat.view_mut((i * m, k * m), (m, m))
                        .copy_from(&(&so.r2[i * nn + k] * self.g.weight(k)));
                }
            }
        }
        let rhs = -DVector::from_column_slice(g.as_slice());
        let sol = lu_solve_vec(&mat, rhs, "control operator of the stationarity system", m)?;
        Field::from_vec(m, sol.as_slice().to_vec())
    }
}

/// LU solve that rejects numerically singular matrices (pivot ratio below
/// `1e-13`) with a diagnostic naming the near-null mode.
pub(crate) fn lu_solve(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    what: &str,
    block: usize,
) -> Result<DMatrix<f64>> {
    let lu = m.clone().lu();
    let u = lu.u();
    let d = u.diagonal();
    let big = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let small = d.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if !(small > 1e-13 * big) {
        return Err(singular_detail(what, m, block));
    }
    match lu.solve(rhs) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok(x),
        _ => Err(singular_detail(what, m, block)),
    }
}

pub(crate) fn lu_solve_vec(m: &DMatrix<f64>, rhs: DVector<f64>, what: &str, block: usize) -> Result<DVector<f64>> {
    let n = rhs.len();
    let x = lu_solve(m, &DMatrix::from_column_slice(n, 1, rhs.as_slice()), what, block)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

pub(crate) fn singular_detail(what: &str, m: &DMatrix<f64>, block: usize) -> Error {
    let svd = m.clone().svd(false, true);
    let sv = &svd.singular_values;
    let (mut imin, mut smin) = (0, f64::INFINITY);
    for (i, s) in sv.iter().enumerate() {
        if *s < smin {
            smin = *s;
            imin = i;
        }
    }
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let mut detail = format!("smallest singular value {smin:.3e}, condition estimate {:.3e}", smax / smin.max(f64::MIN_POSITIVE));
    if let Some(vt) = svd.v_t.as_ref() {
        let row = vt.row(imin);
        let (mut best, mut at) = (0.0, 0);
        for (j, v) in row.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                at = j;
            }
        }
        detail.push_str(&format!("; near-null mode peaks at node {} component {}", at / block.max(1), at % block.max(1)));
    }
    Error::Singular { what: what.into(), detail }
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], s: f64, v: &[f64]) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += s * x;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

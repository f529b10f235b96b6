//! Quasi linear-quadratic control of second-order Fredholm systems.
//!
//! The control enters the dynamics affinely and the cost quadratically:
//!
//! ```text
//! φ(x) = φ0(x) + ∫[f0(x,y,φ(y)) + f1(x,y,φ(y)) u(y)] dy
//!      + ½∫∫[g0(x,y,z,φ(y),φ(z)) + g1(x,y,z,φ(y),φ(z)) u(y)] dz dy
//! J = ∫[F0 + F1·u + ½uᵀF2u] dx
//!   + ½∫∫[F3 + F4·u(x) + ½u(x)ᵀF5 u(x) + ½u(x)ᵀF6 u(z)] dz dx
//! ```
//!
//! For frozen `(φ, ψ)` the stationarity condition `∇_u H = 0` is linear in
//! all node values of `u` and is solved as one dense system.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::engine::{Disc, SolverOptions};
use crate::error::{Error, Result};
use crate::multiarray::{Signature, Tri3};
use crate::problem::{CoField, Control, Family, Field, Kernel, Problem};
use crate::quadrature::Grid;

/// `(x, y, φ(y))`.
pub type DynFn<T> = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> T + Send + Sync>;
/// `(x, y, z, φ(y), φ(z))`.
pub type DynPairFn<T> = Arc<dyn Fn(&[f64], &[f64], &[f64], &[f64], &[f64]) -> T + Send + Sync>;
/// `(x, φ(x))`.
pub type CostFn<T> = Arc<dyn Fn(&[f64], &[f64]) -> T + Send + Sync>;
/// `(x, z, φ(x), φ(z))`.
pub type CostPairFn<T> = Arc<dyn Fn(&[f64], &[f64], &[f64], &[f64]) -> T + Send + Sync>;

/// Data of a quasi-LQC problem. Absent blocks are zero.
#[derive(Clone)]
pub struct LqcProblem {
    pub n: usize,
    pub m: usize,
    pub phi0: CostFn<Vec<f64>>,
    pub f0: Option<DynFn<Vec<f64>>>,
    /// `n × m`.
    pub f1: Option<DynFn<DMatrix<f64>>>,
    pub g0: Option<DynPairFn<Vec<f64>>>,
    /// `n × m`, acting on `u(y)`.
    pub g1: Option<DynPairFn<DMatrix<f64>>>,
    pub cost_f0: Option<CostFn<f64>>,
    /// Row covector of length `m`.
    pub cost_f1: Option<CostFn<Vec<f64>>>,
    /// `m × m`, symmetric positive-definite.
    pub cost_f2: Option<CostFn<DMatrix<f64>>>,
    pub cost_f3: Option<CostPairFn<f64>>,
    pub cost_f4: Option<CostPairFn<Vec<f64>>>,
    pub cost_f5: Option<CostPairFn<DMatrix<f64>>>,
    pub cost_f6: Option<CostPairFn<DMatrix<f64>>>,
}

impl std::fmt::Debug for LqcProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LqcProblem").field("n", &self.n).field("m", &self.m).finish_non_exhaustive()
    }
}

fn mat_vec(a: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (a * DVector::from_column_slice(v)).as_slice().to_vec()
}

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn row(v: Vec<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), &v)
}

fn tri_from(m: &DMatrix<f64>) -> Tri3 {
    Tri3::from_fn([m.nrows(), m.ncols(), 1], Signature::OneLowerTwoUpper, |j, k, _| m[(j, k)])
}

fn zero_tri(a: usize, b: usize, out: usize) -> Tri3 {
    Tri3::zeros([a, b, out], Signature::OneLowerTwoUpper)
}

impl LqcProblem {
    pub fn new(n: usize, m: usize, phi0: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self {
            n,
            m,
            phi0: Arc::new(move |x, _| phi0(x)),
            f0: None,
            f1: None,
            g0: None,
            g1: None,
            cost_f0: None,
            cost_f1: None,
            cost_f2: None,
            cost_f3: None,
            cost_f4: None,
            cost_f5: None,
            cost_f6: None,
        }
    }

    /// The same problem in the generic second-order Fredholm form, with
    /// analytic control derivatives and finite-difference state derivatives.
    pub fn to_problem(&self) -> Result<Problem> {
        let (n, m) = (self.n, self.m);
        let phi0 = self.phi0.clone();
        let mut b = Problem::builder(Family::Fredholm, n, m).forcing_fn(move |x| phi0(x, &[]));

        if self.f0.is_some() || self.f1.is_some() {
            let (f0, f1) = (self.f0.clone(), self.f1.clone());
            let f1j = self.f1.clone();
            let k = Kernel::new(2, &[n, m], n, move |p, s| {
                let mut v = match &f0 {
                    Some(f) => f(p[0], p[1], s[0]),
                    None => vec![0.0; n],
                };
                if let Some(f) = &f1 {
                    for (o, e) in v.iter_mut().zip(mat_vec(&f(p[0], p[1], s[0]), s[1])) {
                        *o += e;
                    }
                }
                v
            })
            .with_jacobian(1, move |p, s| match &f1j {
                Some(f) => f(p[0], p[1], s[0]),
                None => DMatrix::zeros(n, m),
            })
            .with_hessian(1, 1, move |_, _| zero_tri(m, m, n));
            b = b.f1(k);
        }

        if self.g0.is_some() || self.g1.is_some() {
            let (g0, g1) = (self.g0.clone(), self.g1.clone());
            let g1j = self.g1.clone();
            let k = Kernel::new(3, &[n, n, m, m], n, move |p, s| {
                let mut v = match &g0 {
                    Some(g) => g(p[0], p[1], p[2], s[0], s[1]),
                    None => vec![0.0; n],
                };
                if let Some(g) = &g1 {
                    for (o, e) in v.iter_mut().zip(mat_vec(&g(p[0], p[1], p[2], s[0], s[1]), s[2])) {
                        *o += e;
                    }
                }
                v
            })
            .with_jacobian(2, move |p, s| match &g1j {
                Some(g) => g(p[0], p[1], p[2], s[0], s[1]),
                None => DMatrix::zeros(n, m),
            })
            .with_jacobian(3, move |_, _| DMatrix::zeros(n, m))
            .with_hessian(2, 2, move |_, _| zero_tri(m, m, n))
            .with_hessian(2, 3, move |_, _| zero_tri(m, m, n))
            .with_hessian(3, 3, move |_, _| zero_tri(m, m, n))
            .with_hessian(0, 3, move |_, _| zero_tri(n, m, n))
            .with_hessian(1, 3, move |_, _| zero_tri(n, m, n));
            b = b.f2(k);
        }

        if self.cost_f0.is_some() || self.cost_f1.is_some() || self.cost_f2.is_some() {
            let (c0, c1, c2) = (self.cost_f0.clone(), self.cost_f1.clone(), self.cost_f2.clone());
            let (d1, d2) = (c1.clone(), c2.clone());
            let h2 = c2.clone();
            let k = Kernel::new(1, &[n, m], 1, move |p, s| {
                let (x, y, u) = (p[0], s[0], s[1]);
                let mut v = c0.as_ref().map_or(0.0, |f| f(x, y));
                if let Some(f) = &c1 {
                    v += f(x, y).iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(f) = &c2 {
                    let uv = DVector::from_column_slice(u);
                    v += 0.5 * uv.dot(&(f(x, y) * &uv));
                }
                vec![v]
            })
            .with_jacobian(1, move |p, s| {
                let (x, y, u) = (p[0], s[0], s[1]);
                let mut g = d1.as_ref().map_or(vec![0.0; m], |f| f(x, y));
                if let Some(f) = &d2 {
                    for (o, e) in g.iter_mut().zip(mat_vec(&sym(&f(x, y)), u)) {
                        *o += e;
                    }
                }
                row(g)
            })
            .with_hessian(1, 1, move |p, s| match &h2 {
                Some(f) => tri_from(&sym(&f(p[0], s[0]))),
                None => zero_tri(m, m, 1),
            });
            b = b.running_cost(k);
        }

        if self.cost_f3.is_some() || self.cost_f4.is_some() || self.cost_f5.is_some() || self.cost_f6.is_some() {
            let (c3, c4, c5, c6) =
                (self.cost_f3.clone(), self.cost_f4.clone(), self.cost_f5.clone(), self.cost_f6.clone());
            let (d4, d5, d6) = (c4.clone(), c5.clone(), c6.clone());
            let e6 = c6.clone();
            let (h5, h6) = (c5.clone(), c6.clone());
            let k = Kernel::new(2, &[n, n, m, m], 1, move |p, s| {
                let (x, z, yx, yz) = (p[0], p[1], s[0], s[1]);
                let (ux, uz) = (DVector::from_column_slice(s[2]), DVector::from_column_slice(s[3]));
                let mut v = c3.as_ref().map_or(0.0, |f| f(x, z, yx, yz));
                if let Some(f) = &c4 {
                    v += f(x, z, yx, yz).iter().zip(s[2]).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(f) = &c5 {
                    v += 0.5 * ux.dot(&(f(x, z, yx, yz) * &ux));
                }
                if let Some(f) = &c6 {
                    v += 0.5 * ux.dot(&(f(x, z, yx, yz) * &uz));
                }
                vec![v]
            })
            .with_jacobian(2, move |p, s| {
                let (x, z, yx, yz) = (p[0], p[1], s[0], s[1]);
                let mut g = d4.as_ref().map_or(vec![0.0; m], |f| f(x, z, yx, yz));
                if let Some(f) = &d5 {
                    for (o, e) in g.iter_mut().zip(mat_vec(&sym(&f(x, z, yx, yz)), s[2])) {
                        *o += e;
                    }
                }
                if let Some(f) = &d6 {
                    for (o, e) in g.iter_mut().zip(mat_vec(&f(x, z, yx, yz), s[3])) {
                        *o += 0.5 * e;
                    }
                }
                row(g)
            })
            .with_jacobian(3, move |p, s| match &e6 {
                Some(f) => row(mat_vec(&f(p[0], p[1], s[0], s[1]).transpose(), s[2]).iter().map(|e| 0.5 * e).collect()),
                None => DMatrix::zeros(1, m),
            })
            .with_hessian(2, 2, move |p, s| match &h5 {
                Some(f) => tri_from(&sym(&f(p[0], p[1], s[0], s[1]))),
                None => zero_tri(m, m, 1),
            })
            .with_hessian(2, 3, move |p, s| match &h6 {
                Some(f) => tri_from(&(f(p[0], p[1], s[0], s[1]) * 0.5)),
                None => zero_tri(m, m, 1),
            })
            .with_hessian(3, 3, move |_, _| zero_tri(m, m, 1));
            b = b.pair_cost(k);
        }
        b.build()
    }
}

/// Control solving `∇_u H(φ, ψ, u) = 0` for frozen `(φ, ψ)`, together with
/// the sup norm of the remaining gradient.
pub fn solve_stationarity(problem: &LqcProblem, grid: &Grid, phi: &Field, psi: &CoField) -> Result<(Control, f64)> {
    let p = problem.to_problem()?;
    stationarity(&p, grid, phi, psi)
}

fn stationarity(p: &Problem, grid: &Grid, phi: &Field, psi: &CoField) -> Result<(Control, f64)> {
    let d = Disc::new(p, grid, Family::Fredholm)?;
    d.check_state(phi)?;
    psi.check(grid.len(), d.n, "costate")?;
    let omega = vec![0.0; d.n];
    let mut u = Field::zeros(grid.len(), d.m);
    let lin = d.linearize(phi, &u, true);
    let mut g = d.gradient(phi, &u, psi, &omega, &lin);
    // The operator on u depends on φ only, so it is assembled once; the
    // extra sweeps only clean up rounding in the first solve.
    let so = d.second_order(phi, &u, psi, &omega, lin);
    let mut res = g.sup_norm();
    for _ in 0..4 {
        let du = d.stationarity_step(&so, &g)?;
        let next = u.plus_scaled(1.0, &du);
        let lin = d.linearize(phi, &next, true);
        let gn = d.gradient(phi, &next, psi, &omega, &lin);
        let rn = gn.sup_norm();
        if rn >= res {
            break;
        }
        u = next;
        g = gn;
        res = rn;
        if res <= 1e-13 {
            break;
        }
    }
    Ok((u, res))
}

#[derive(Debug, Clone, Copy)]
pub struct LqcOptions {
    /// Outer stop: successive controls within this sup distance.
    pub tol: f64,
    pub max_outer: usize,
    /// Weight of the new control in each outer update.
    pub relaxation: f64,
    pub state: SolverOptions,
}

impl Default for LqcOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_outer: 200, relaxation: 1.0, state: SolverOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub struct LqcSolution {
    pub state: Field,
    pub costate: CoField,
    pub control: Control,
    /// `‖∇_u H‖∞` at the returned triple.
    pub stationarity_residual: f64,
    pub outer_iterations: usize,
    pub cost: f64,
}

pub fn solve_lqc(problem: &LqcProblem, grid: &Grid) -> Result<LqcSolution> {
    solve_lqc_with(problem, grid, &LqcOptions::default())
}

/// Alternates state solve, costate solve and stationarity solve until the
/// control settles.
pub fn solve_lqc_with(problem: &LqcProblem, grid: &Grid, opts: &LqcOptions) -> Result<LqcSolution> {
    let p = problem.to_problem()?;
    let d = Disc::new(&p, grid, Family::Fredholm)?;
    let mut u = Field::zeros(grid.len(), problem.m);
    let mut diff = f64::INFINITY;
    for it in 1..=opts.max_outer {
        let (phi, _) = d.solve_fredholm_state(&u, &opts.state)?;
        let lin = d.linearize(&phi, &u, false);
        let (psi, _) = d.costate(&phi, &u, &lin)?;
        let (star, res) = stationarity(&p, grid, &phi, &psi)?;
        diff = star.sup_distance(&u);
        if diff <= opts.tol {
            let cost = d.cost(&phi, &star);
            return Ok(LqcSolution {
                state: phi,
                costate: psi,
                control: star,
                stationarity_residual: res,
                outer_iterations: it,
                cost,
            });
        }
        let step = star.plus_scaled(-1.0, &u);
        u = u.plus_scaled(opts.relaxation, &step);
    }
    Err(Error::NonConvergence { what: "quasi-LQC outer iteration".into(), iterations: opts.max_outer, residual: diff })
}

/// Scalar linear-quadratic preset on `[0, 1]`:
/// `φ = 1 + ∫[a(x,y)φ(y) + b·u(y)] dy`, `J = ∫[½φ² + ½r·u²] dx`.
pub fn scalar_lq_preset(a: f64, b: f64, r: f64) -> LqcProblem {
    let mut p = LqcProblem::new(1, 1, |_| vec![1.0]);
    p.f0 = Some(Arc::new(move |x, y, phi| vec![a * (1.0 + 0.5 * (x[0] - y[0])) * phi[0]]));
    p.f1 = Some(Arc::new(move |_, _, _| DMatrix::from_element(1, 1, b)));
    p.cost_f0 = Some(Arc::new(|_, phi| 0.5 * phi[0] * phi[0]));
    p.cost_f2 = Some(Arc::new(move |_, _| DMatrix::from_element(1, 1, r)));
    p
}

/// Scalar preset with every block present, including the `F6` coupling
/// between control values at different points.
pub fn coupled_preset() -> LqcProblem {
    let mut p = LqcProblem::new(1, 1, |x| vec![1.0 + 0.2 * x[0]]);
    p.f0 = Some(Arc::new(|x, y, phi| vec![0.2 * (x[0] * y[0]).cos() * phi[0].sin()]));
    p.f1 = Some(Arc::new(|x, y, phi| DMatrix::from_element(1, 1, 0.3 + 0.1 * (x[0] - y[0]) + 0.05 * phi[0])));
    p.g0 = Some(Arc::new(|_, y, z, py, pz| vec![0.1 * (y[0] + z[0]) * py[0] * pz[0]]));
    p.g1 = Some(Arc::new(|x, _, z, _, pz| DMatrix::from_element(1, 1, 0.1 * (1.0 + x[0] * z[0]) * pz[0].cos())));
    p.cost_f0 = Some(Arc::new(|x, phi| 0.5 * phi[0] * phi[0] + 0.1 * x[0] * phi[0]));
    p.cost_f1 = Some(Arc::new(|x, phi| vec![0.2 * phi[0] - 0.1 * x[0]]));
    p.cost_f2 = Some(Arc::new(|x, _| DMatrix::from_element(1, 1, 1.0 + 0.5 * x[0])));
    p.cost_f3 = Some(Arc::new(|x, z, px, pz| 0.1 * (x[0] - z[0]).cos() * px[0] * pz[0]));
    p.cost_f4 = Some(Arc::new(|_, z, _, pz| vec![0.1 * z[0] * pz[0]]));
    p.cost_f5 = Some(Arc::new(|x, z, _, _| DMatrix::from_element(1, 1, 0.2 + 0.1 * x[0] * z[0])));
    p.cost_f6 = Some(Arc::new(|x, z, _, _| DMatrix::from_element(1, 1, 0.3 * (1.0 - (x[0] - z[0]).abs()))));
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fredholm;
    use crate::quadrature::build_grid;

    #[test]
    fn identity_cost_gives_zero_control() {
        let g = build_grid(1.0, 8).unwrap();
        let mut p = LqcProblem::new(1, 1, |_| vec![1.0]);
        p.cost_f2 = Some(Arc::new(|_, _| DMatrix::identity(1, 1)));
        let phi = Field::constant(g.len(), &[1.0]);
        let (u, res) = solve_stationarity(&p, &g, &phi, &Field::zeros(g.len(), 1)).unwrap();
        assert_eq!(u.sup_norm(), 0.0);
        assert_eq!(res, 0.0);
    }

    #[test]
    fn linear_term_gives_minus_phi() {
        let g = build_grid(1.0, 8).unwrap();
        let mut p = LqcProblem::new(1, 1, |_| vec![1.0]);
        p.cost_f1 = Some(Arc::new(|_, phi| vec![phi[0]]));
        p.cost_f2 = Some(Arc::new(|_, _| DMatrix::identity(1, 1)));
        let phi = Field::from_fn(&g, 1, |x| vec![(3.0 * x[0]).sin() + 0.5]);
        let (u, res) = solve_stationarity(&p, &g, &phi, &Field::zeros(g.len(), 1)).unwrap();
        assert!(u.sup_distance(&phi.plus_scaled(-2.0, &phi)) < 1e-14);
        assert!(res < 1e-14);
    }

    #[test]
    fn decoupled_problem() {
        let g = build_grid(1.0, 8).unwrap();
        let mut p = LqcProblem::new(1, 1, |x| vec![2.0 + x[0]]);
        p.cost_f0 = Some(Arc::new(|_, phi| 0.5 * phi[0] * phi[0]));
        p.cost_f2 = Some(Arc::new(|_, _| DMatrix::identity(1, 1)));
        let sol = solve_lqc(&p, &g).unwrap();
        assert_eq!(sol.control.sup_norm(), 0.0);
        let phi0 = Field::from_fn(&g, 1, |x| vec![2.0 + x[0]]);
        assert_eq!(sol.state, phi0);
        assert!(sol.costate.sup_distance(&phi0) < 1e-9);
    }

    #[test]
    fn singular_control_operator_is_reported() {
        let g = build_grid(1.0, 8).unwrap();
        let mut p = LqcProblem::new(1, 1, |_| vec![1.0]);
        p.cost_f1 = Some(Arc::new(|_, _| vec![1.0]));
        p.cost_f2 = Some(Arc::new(|_, _| DMatrix::zeros(1, 1)));
        let phi = Field::constant(g.len(), &[1.0]);
        let err = solve_stationarity(&p, &g, &phi, &Field::zeros(g.len(), 1)).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }), "{err}");
    }

    #[test]
    fn scalar_lq_gradient_vanishes() {
        let g = build_grid(1.0, 16).unwrap();
        let lq = scalar_lq_preset(0.3, 0.5, 1.0);
        let sol = solve_lqc(&lq, &g).unwrap();
        assert!(sol.stationarity_residual <= 1e-10);
        let p = lq.to_problem().unwrap();
        let fs = fredholm::FredholmSolution {
            state: sol.state.clone(),
            costate: sol.costate.clone(),
            control: sol.control.clone(),
            cost: sol.cost,
            diagnostics: Default::default(),
        };
        assert!(fredholm::gradient(&p, &g, &fs).unwrap().sup_norm() < 1e-8);
    }
}

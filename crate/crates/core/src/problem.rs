//! Problem definitions: kernels with derivative suites, grid-sampled fields,
//! symmetrization of two-point kernels and causal-kernel folding.
//!
//! Every kernel is a map `(points, slots) -> R^out`. `points` are grid
//! coordinates (each a slice of length `d`), `slots` are the state/control
//! arguments. The slot layouts used by [`Problem`] are:
//!
//! | kernel      | points      | slots                |
//! |-------------|-------------|----------------------|
//! | forcing     | `x`         | none                 |
//! | `f1`        | `x, y`      | `φ, u`               |
//! | `f2`        | `x, y, z`   | `φ1, φ2, u1, u2`     |
//! | `F1`        | `x`         | `φ, u`               |
//! | `F2`        | `x, z`      | `φ1, φ2, u1, u2`     |
//! | `F0`        | `T`         | `Y`                  |

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::multiarray::{Signature, Transposition, Tri3};
use crate::quadrature::Grid;

pub type EvalFn = Arc<dyn Fn(&[&[f64]], &[&[f64]]) -> Vec<f64> + Send + Sync>;
/// Jacobian `out × dim(slot)`.
pub type JacFn = Arc<dyn Fn(&[&[f64]], &[&[f64]]) -> DMatrix<f64> + Send + Sync>;
/// Hessian with storage `(j, k, i)` = `∂²f_i/∂a_j∂b_k`.
pub type HessFn = Arc<dyn Fn(&[&[f64]], &[&[f64]]) -> Tri3 + Send + Sync>;

pub const SLOT_STATE: usize = 0;
pub const SLOT_CONTROL: usize = 1;
pub const SLOT_STATE1: usize = 0;
pub const SLOT_STATE2: usize = 1;
pub const SLOT_CONTROL1: usize = 2;
pub const SLOT_CONTROL2: usize = 3;

const FD_STEP_FIRST: f64 = 1e-5;
const FD_STEP_SECOND: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeSource {
    Analytic,
    FiniteDifference,
}

#[derive(Clone)]
enum Deriv<F> {
    Analytic(F),
    /// Supplied, but built on top of finite differences somewhere.
    Composite(F),
    Fd,
}

impl<F> Deriv<F> {
    fn source(&self) -> DerivativeSource {
        match self {
            Deriv::Analytic(_) => DerivativeSource::Analytic,
            _ => DerivativeSource::FiniteDifference,
        }
    }
}

/// A smooth kernel with its first and second derivative suite.
///
/// Derivatives that are not supplied are synthesized by central finite
/// differences on demand.
#[derive(Clone)]
pub struct Kernel {
    n_points: usize,
    slot_dims: Vec<usize>,
    out_dim: usize,
    eval: EvalFn,
    jac: Vec<Deriv<JacFn>>,
    hess: Vec<Deriv<HessFn>>,
    zero: bool,
}

impl std::fmt::Debug for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kernel")
            .field("n_points", &self.n_points)
            .field("slot_dims", &self.slot_dims)
            .field("out_dim", &self.out_dim)
            .field("zero", &self.zero)
            .finish()
    }
}

impl Kernel {
    pub fn new<F>(n_points: usize, slot_dims: &[usize], out_dim: usize, eval: F) -> Self
    where
        F: Fn(&[&[f64]], &[&[f64]]) -> Vec<f64> + Send + Sync + 'static,
    {
        let ns = slot_dims.len();
        Self {
            n_points,
            slot_dims: slot_dims.to_vec(),
            out_dim,
            eval: Arc::new(eval),
            jac: (0..ns).map(|_| Deriv::Fd).collect(),
            hess: (0..ns * ns).map(|_| Deriv::Fd).collect(),
            zero: false,
        }
    }

    /// Identically zero kernel; all derivatives are analytic zeros.
    pub fn zero(n_points: usize, slot_dims: &[usize], out_dim: usize) -> Self {
        let mut k = Self::new(n_points, slot_dims, out_dim, move |_, _| vec![0.0; out_dim]);
        k.zero = true;
        let dims = slot_dims.to_vec();
        for s in 0..dims.len() {
            let d = dims[s];
            k.jac[s] = Deriv::Analytic(Arc::new(move |_, _| DMatrix::zeros(out_dim, d)));
            for b in 0..dims.len() {
                let db = dims[b];
                k.hess[s * dims.len() + b] = Deriv::Analytic(Arc::new(move |_, _| {
                    Tri3::zeros([d, db, out_dim], Signature::OneLowerTwoUpper)
                }));
            }
        }
        k
    }

    pub fn with_jacobian<F>(mut self, slot: usize, f: F) -> Self
    where
        F: Fn(&[&[f64]], &[&[f64]]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac[slot] = Deriv::Analytic(Arc::new(f));
        self
    }

    /// Supplies `∂²f/∂a∂b`; the `(b, a)` block is derived by transposition.
    pub fn with_hessian<F>(mut self, a: usize, b: usize, f: F) -> Self
    where
        F: Fn(&[&[f64]], &[&[f64]]) -> Tri3 + Send + Sync + 'static,
    {
        let ns = self.slot_dims.len();
        let f: HessFn = Arc::new(f);
        if a != b {
            let g = f.clone();
            self.hess[b * ns + a] = Deriv::Analytic(Arc::new(move |p, s| {
                g(p, s).transpose(Transposition::Swap).expect("swap is always valid")
            }));
        }
        self.hess[a * ns + b] = Deriv::Analytic(f);
        self
    }

    /// Declares every Hessian block not yet supplied to be zero (for kernels
    /// that are affine in each slot pair, e.g. purely linear dynamics).
    pub fn with_zero_hessians(mut self) -> Self {
        let ns = self.slot_dims.len();
        let out = self.out_dim;
        for a in 0..ns {
            for b in 0..ns {
                if matches!(self.hess[a * ns + b], Deriv::Fd) {
                    let (da, db) = (self.slot_dims[a], self.slot_dims[b]);
                    self.hess[a * ns + b] = Deriv::Analytic(Arc::new(move |_, _| {
                        Tri3::zeros([da, db, out], Signature::OneLowerTwoUpper)
                    }));
                }
            }
        }
        self
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn slot_dims(&self) -> &[usize] {
        &self.slot_dims
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn jacobian_source(&self, slot: usize) -> DerivativeSource {
        self.jac[slot].source()
    }

    pub fn hessian_source(&self, a: usize, b: usize) -> DerivativeSource {
        self.hess[a * self.slot_dims.len() + b].source()
    }

    #[inline]
    pub fn eval(&self, points: &[&[f64]], slots: &[&[f64]]) -> Vec<f64> {
        (self.eval)(points, slots)
    }

    /// Scalar value of a kernel with `out_dim == 1`.
    #[inline]
    pub fn eval_scalar(&self, points: &[&[f64]], slots: &[&[f64]]) -> f64 {
        if self.zero {
            return 0.0;
        }
        (self.eval)(points, slots)[0]
    }

    pub fn jacobian(&self, points: &[&[f64]], slots: &[&[f64]], slot: usize) -> DMatrix<f64> {
        match &self.jac[slot] {
            Deriv::Analytic(f) | Deriv::Composite(f) => f(points, slots),
            Deriv::Fd => fd_jacobian(&self.eval, self.out_dim, points, slots, slot),
        }
    }

    pub fn hessian(&self, points: &[&[f64]], slots: &[&[f64]], a: usize, b: usize) -> Tri3 {
        match &self.hess[a * self.slot_dims.len() + b] {
            Deriv::Analytic(f) | Deriv::Composite(f) => f(points, slots),
            Deriv::Fd => fd_hessian(&self.eval, self.out_dim, points, slots, a, b),
        }
    }

    /// `½[k(p, s) + k(p∘π, s∘σ)]` with the derivative suite carried along.
    pub fn symmetrized(&self, point_perm: &[usize], slot_perm: &[usize]) -> Kernel {
        let sum = self.permuted_sum(point_perm, slot_perm, |_, _| 0.5, |_, _| 0.5);
        Kernel { zero: self.zero, ..sum }
    }

    /// `ca(p)·k(p, s) + cb(p)·k(p∘π, s∘σ)` for weights depending on points only.
    fn permuted_sum(
        &self,
        point_perm: &[usize],
        slot_perm: &[usize],
        ca: impl Fn(&[&[f64]], &[&[f64]]) -> f64 + Send + Sync + Clone + 'static,
        cb: impl Fn(&[&[f64]], &[&[f64]]) -> f64 + Send + Sync + Clone + 'static,
    ) -> Kernel {
        let ns = self.slot_dims.len();
        let pp: Arc<[usize]> = point_perm.into();
        let sp: Arc<[usize]> = slot_perm.into();
        let mut inv = vec![0; ns];
        for (q, &r) in slot_perm.iter().enumerate() {
            inv[r] = q;
        }
        let inv: Arc<[usize]> = inv.into();
        let base = Arc::new(self.clone());

        let eval: EvalFn = {
            let (base, pp, sp, ca, cb) = (base.clone(), pp.clone(), sp.clone(), ca.clone(), cb.clone());
            Arc::new(move |p, s| {
                let (a, b) = (ca(p, s), cb(p, s));
                let mut v = if a != 0.0 { base.eval(p, s) } else { vec![0.0; base.out_dim] };
                if b != 0.0 {
                    let (p2, s2) = (permute_refs(&pp, p), permute_refs(&sp, s));
                    let w = base.eval(&p2, &s2);
                    for (x, y) in v.iter_mut().zip(w) {
                        *x = a * *x + b * y;
                    }
                } else {
                    v.iter_mut().for_each(|x| *x *= a);
                }
                v
            })
        };

        let jac = (0..ns)
            .map(|r| {
                let (base, pp, sp, inv, ca, cb) =
                    (base.clone(), pp.clone(), sp.clone(), inv.clone(), ca.clone(), cb.clone());
                let analytic = base.jac[r].source() == DerivativeSource::Analytic
                    && base.jac[inv[r]].source() == DerivativeSource::Analytic;
                let f: JacFn = Arc::new(move |p, s| {
                    let (a, b) = (ca(p, s), cb(p, s));
                    let mut m = if a != 0.0 {
                        base.jacobian(p, s, r) * a
                    } else {
                        DMatrix::zeros(base.out_dim, base.slot_dims[r])
                    };
                    if b != 0.0 {
                        let (p2, s2) = (permute_refs(&pp, p), permute_refs(&sp, s));
                        m += base.jacobian(&p2, &s2, inv[r]) * b;
                    }
                    m
                });
                if analytic {
                    Deriv::Analytic(f)
                } else {
                    Deriv::Composite(f)
                }
            })
            .collect();

        let hess = (0..ns * ns)
            .map(|ab| {
                let (ra, rb) = (ab / ns, ab % ns);
                let (base, pp, sp, inv, ca, cb) =
                    (base.clone(), pp.clone(), sp.clone(), inv.clone(), ca.clone(), cb.clone());
                let analytic = base.hessian_source(ra, rb) == DerivativeSource::Analytic
                    && base.hessian_source(inv[ra], inv[rb]) == DerivativeSource::Analytic;
                let f: HessFn = Arc::new(move |p, s| {
                    let (a, b) = (ca(p, s), cb(p, s));
                    let mut h = base.hessian(p, s, ra, rb);
                    h.scale(a);
                    if b != 0.0 {
                        let (p2, s2) = (permute_refs(&pp, p), permute_refs(&sp, s));
                        h.axpy(b, &base.hessian(&p2, &s2, inv[ra], inv[rb]));
                    }
                    h
                });
                if analytic {
                    Deriv::Analytic(f)
                } else {
                    Deriv::Composite(f)
                }
            })
            .collect();

        Kernel {
            n_points: self.n_points,
            slot_dims: self.slot_dims.clone(),
            out_dim: self.out_dim,
            eval,
            jac,
            hess,
            zero: false,
        }
    }

    /// Replaces every supplied derivative with its finite-difference
    /// counterpart; used to compare analytic suites against the fallback.
    pub fn fd_only(&self) -> Kernel {
        let ns = self.slot_dims.len();
        Kernel {
            jac: (0..ns).map(|_| Deriv::Fd).collect(),
            hess: (0..ns * ns).map(|_| Deriv::Fd).collect(),
            zero: false,
            ..self.clone()
        }
    }
}

fn permute_refs<'a>(perm: &[usize], v: &[&'a [f64]]) -> Vec<&'a [f64]> {
    perm.iter().map(|&q| v[q]).collect()
}

pub(crate) fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| x.as_slice()).collect()
}

fn fd_jacobian(
    eval: &EvalFn,
    out: usize,
    points: &[&[f64]],
    slots: &[&[f64]],
    slot: usize,
) -> DMatrix<f64> {
    let mut owned: Vec<Vec<f64>> = slots.iter().map(|s| s.to_vec()).collect();
    let dim = owned[slot].len();
    let mut jac = DMatrix::zeros(out, dim);
    for c in 0..dim {
        let x = owned[slot][c];
        let h = FD_STEP_FIRST * x.abs().max(1.0);
        owned[slot][c] = x + h;
        let fp = eval(points, &refs(&owned));
        owned[slot][c] = x - h;
        let fm = eval(points, &refs(&owned));
        owned[slot][c] = x;
        for i in 0..out {
            jac[(i, c)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

fn fd_hessian(
    eval: &EvalFn,
    out: usize,
    points: &[&[f64]],
    slots: &[&[f64]],
    a: usize,
    b: usize,
) -> Tri3 {
    let mut owned: Vec<Vec<f64>> = slots.iter().map(|s| s.to_vec()).collect();
    let (da, db) = (owned[a].len(), owned[b].len());
    let mut h = Tri3::zeros([da, db, out], Signature::OneLowerTwoUpper);
    for j in 0..da {
        for k in 0..db {
            let xj = owned[a][j];
            let xk = owned[b][k];
            let hj = FD_STEP_SECOND * xj.abs().max(1.0);
            let hk = FD_STEP_SECOND * xk.abs().max(1.0);
            let mut at = |sj: f64, sk: f64| {
                owned[a][j] += sj * hj;
                owned[b][k] += sk * hk;
                let v = eval(points, &refs(&owned));
                owned[a][j] = xj;
                owned[b][k] = xk;
                v
            };
            let fpp = at(1.0, 1.0);
            let fpm = at(1.0, -1.0);
            let fmp = at(-1.0, 1.0);
            let fmm = at(-1.0, -1.0);
            for i in 0..out {
                h.set(j, k, i, (fpp[i] - fpm[i] - fmp[i] + fmm[i]) / (4.0 * hj * hk));
            }
        }
    }
    h
}

/// Finite-difference derivative closure of a kernel.
#[derive(Clone)]
pub enum DerivativeFn {
    First(JacFn),
    Second(HessFn),
}

/// Central-difference derivative with respect to `slot`: first order with
/// step `1e-5·max(1,|arg|)`, second order by nested differences with step
/// `1e-4·max(1,|arg|)`.
pub fn fd_derivative(kernel: &Kernel, slot: usize, order: u8) -> Result<DerivativeFn> {
    if slot >= kernel.slot_dims.len() {
        return Err(Error::Shape(format!("kernel has no slot {slot}")));
    }
    let eval = kernel.eval.clone();
    let out = kernel.out_dim;
    match order {
        1 => Ok(DerivativeFn::First(Arc::new(move |p, s| fd_jacobian(&eval, out, p, s, slot)))),
        2 => Ok(DerivativeFn::Second(Arc::new(move |p, s| {
            fd_hessian(&eval, out, p, s, slot, slot)
        }))),
        _ => Err(Error::Shape(format!("derivative order must be 1 or 2, got {order}"))),
    }
}

/// Which two-point symmetry a kernel is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKernel {
    /// `f2(x,y,z,φ1,φ2,u1,u2) = f2(x,z,y,φ2,φ1,u2,u1)`.
    Dynamics,
    /// `F2(x,z,φ1,φ2,u1,u2) = F2(z,x,φ2,φ1,u2,u1)`.
    Cost,
}

impl PairKernel {
    fn point_perm(self) -> &'static [usize] {
        match self {
            PairKernel::Dynamics => &[0, 2, 1],
            PairKernel::Cost => &[1, 0],
        }
    }

    fn slot_perm(self) -> &'static [usize] {
        &[1, 0, 3, 2]
    }
}

/// Symmetrization of a two-point kernel; integrals over the pair variables
/// are unchanged.
pub fn symmetrize(kernel: &Kernel, kind: PairKernel) -> Kernel {
    kernel.symmetrized(kind.point_perm(), kind.slot_perm())
}

/// `|k(p, s) − k(p∘π, s∘σ)|_∞` at one probe.
pub fn symmetry_residual_at(
    kernel: &Kernel,
    kind: PairKernel,
    points: &[&[f64]],
    slots: &[&[f64]],
) -> f64 {
    let p2: Vec<&[f64]> = kind.point_perm().iter().map(|&q| points[q]).collect();
    let s2: Vec<&[f64]> = kind.slot_perm().iter().map(|&q| slots[q]).collect();
    kernel
        .eval(points, slots)
        .iter()
        .zip(kernel.eval(&p2, &s2))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Largest symmetry residual over `probes` random arguments (points in the
/// unit cube of dimension `point_dim`, slot values in `[-2, 2]`).
pub fn check_symmetry(
    kernel: &Kernel,
    kind: PairKernel,
    point_dim: usize,
    probes: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes.max(1) {
        let pts: Vec<Vec<f64>> = (0..kernel.n_points)
            .map(|_| (0..point_dim).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let slots: Vec<Vec<f64>> = kernel
            .slot_dims
            .iter()
            .map(|&d| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        worst = worst.max(symmetry_residual_at(kernel, kind, &refs(&pts), &refs(&slots)));
    }
    worst
}

/// Folds a causal kernel `g(…, s, σ, a, b)` (meaningful for `s ≥ σ`) into
/// the symmetric kernel
/// `g̃ = H(s−σ)·g(…, s, σ, a, b) + H(σ−s)·g(…, σ, s, b, a)`, `H(0) = ½`,
/// so that `∫_0^t∫_0^s g dσ ds = ½∫_0^t∫_0^t g̃ dσ ds`.
///
/// The last two point arguments are the pair `(s, σ)`; slots come in
/// swapped pairs (`a, b` or `a, b, c, d` with `(a,b)` and `(c,d)` paired).
pub fn fold_causal(g: &Kernel) -> Result<Kernel> {
    let np = g.n_points;
    if np < 2 {
        return Err(Error::Shape("causal kernel needs two time arguments".into()));
    }
    let slot_perm: Vec<usize> = match g.slot_dims.len() {
        2 => vec![1, 0],
        4 => vec![1, 0, 3, 2],
        k => return Err(Error::Shape(format!("causal kernel needs 2 or 4 slots, got {k}"))),
    };
    let mut point_perm: Vec<usize> = (0..np).collect();
    point_perm.swap(np - 2, np - 1);
    let heaviside = move |first: bool| {
        move |p: &[&[f64]], _: &[&[f64]]| {
            let (s, sigma) = (p[np - 2][0], p[np - 1][0]);
            let d = if first { s - sigma } else { sigma - s };
            if d > 0.0 {
                1.0
            } else if d == 0.0 {
                0.5
            } else {
                0.0
            }
        }
    };
    let folded = g.permuted_sum(&point_perm, &slot_perm, heaviside(true), heaviside(false));
    Ok(Kernel { zero: g.zero, ..folded })
}

/// Problem family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Fredholm,
    Volterra,
}

/// Grid-sampled values: one `dim`-vector per node, stored node-major.
///
/// The same container holds states, costates (row covectors) and controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    dim: usize,
    values: Vec<f64>,
}

/// Costate samples (row covectors per node).
pub type CoField = Field;
/// Control samples.
pub type Control = Field;

impl Field {
    pub fn zeros(nodes: usize, dim: usize) -> Self {
        Self { dim, values: vec![0.0; nodes * dim] }
    }

    pub fn constant(nodes: usize, value: &[f64]) -> Self {
        Self { dim: value.len(), values: value.repeat(nodes) }
    }

    pub fn from_vec(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not split into {dim}-vectors", values.len())));
        }
        Ok(Self { dim, values })
    }

    pub fn from_fn(grid: &Grid, dim: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let mut values = Vec::with_capacity(grid.len() * dim);
        for i in 0..grid.len() {
            let v = f(grid.point(i));
            assert_eq!(v.len(), dim, "sample dimension");
            values.extend(v);
        }
        Self { dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.dim.max(1)
    }

    #[inline]
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `self + s·other`.
    pub fn plus_scaled(&self, s: f64, other: &Field) -> Field {
        Field {
            dim: self.dim,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect(),
        }
    }

    /// Quadrature-weighted pairing `Σ_i w_i ⟨a_i, b_i⟩`.
    pub fn weighted_dot(&self, other: &Field, grid: &Grid) -> f64 {
        (0..self.nodes())
            .map(|i| {
                grid.weight(i)
                    * self.at(i).iter().zip(other.at(i)).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    pub(crate) fn check(&self, nodes: usize, dim: usize, what: &str) -> Result<()> {
        if self.dim != dim || self.nodes() != nodes {
            return Err(Error::Shape(format!(
                "{what}: {} nodes of dimension {}, expected {nodes} of dimension {dim}",
                self.nodes(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// A controlled double integral equation with its cost functional.
///
/// The two-point kernels `f2` and `F2` are symmetrized at construction; the
/// kernels as supplied are kept in [`Problem::original_f2`] and
/// [`Problem::original_cost2`].
#[derive(Clone, Debug)]
pub struct Problem {
    family: Family,
    n: usize,
    m: usize,
    forcing: Kernel,
    f1: Kernel,
    f2: Kernel,
    cost1: Kernel,
    cost2: Kernel,
    terminal: Kernel,
    f2_original: Kernel,
    cost2_original: Kernel,
}

impl Problem {
    pub fn builder(family: Family, n: usize, m: usize) -> ProblemBuilder {
        ProblemBuilder {
            family,
            n,
            m,
            forcing: None,
            f1: None,
            f2: None,
            cost1: None,
            cost2: None,
            terminal: None,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Control dimension.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn forcing(&self) -> &Kernel {
        &self.forcing
    }

    pub fn f1(&self) -> &Kernel {
        &self.f1
    }

    pub fn f2(&self) -> &Kernel {
        &self.f2
    }

    pub fn cost1(&self) -> &Kernel {
        &self.cost1
    }

    pub fn cost2(&self) -> &Kernel {
        &self.cost2
    }

    /// Terminal cost `F0(T, Y)`; identically zero for Fredholm problems.
    pub fn terminal(&self) -> &Kernel {
        &self.terminal
    }

    pub fn original_f2(&self) -> &Kernel {
        &self.f2_original
    }

    pub fn original_cost2(&self) -> &Kernel {
        &self.cost2_original
    }

    /// Forcing samples `φ0(x_i)` / `y0(t_i)`.
    pub fn forcing_field(&self, grid: &Grid) -> Field {
        Field::from_fn(grid, self.n, |x| self.forcing.eval(&[x], &[]))
    }

    /// The same problem with `f2`/`F2` taken verbatim as the stored kernels
    /// (no symmetrization). Only meaningful when they are already symmetric.
    pub fn with_raw_pair_kernels(&self) -> Problem {
        Problem {
            f2: self.f2_original.clone(),
            cost2: self.cost2_original.clone(),
            ..self.clone()
        }
    }
}

pub struct ProblemBuilder {
    family: Family,
    n: usize,
    m: usize,
    forcing: Option<Kernel>,
    f1: Option<Kernel>,
    f2: Option<Kernel>,
    cost1: Option<Kernel>,
    cost2: Option<Kernel>,
    terminal: Option<Kernel>,
}

impl ProblemBuilder {
    /// `φ0(x)` / `y0(t)`: one point, no slots, `n` outputs.
    pub fn forcing(mut self, k: Kernel) -> Self {
        self.forcing = Some(k);
        self
    }

    pub fn forcing_fn(self, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        let n = self.n;
        self.forcing(Kernel::new(1, &[], n, move |p, _| f(p[0])))
    }

    pub fn f1(mut self, k: Kernel) -> Self {
        self.f1 = Some(k);
        self
    }

    pub fn f2(mut self, k: Kernel) -> Self {
        self.f2 = Some(k);
        self
    }

    pub fn running_cost(mut self, k: Kernel) -> Self {
        self.cost1 = Some(k);
        self
    }

    pub fn pair_cost(mut self, k: Kernel) -> Self {
        self.cost2 = Some(k);
        self
    }

    pub fn terminal_cost(mut self, k: Kernel) -> Self {
        self.terminal = Some(k);
        self
    }

    pub fn build(self) -> Result<Problem> {
        let (n, m) = (self.n, self.m);
        if n == 0 {
            return Err(Error::Problem("state dimension must be positive".into()));
        }
        let check = |k: &Kernel, name: &str, np: usize, slots: &[usize], out: usize| {
            if k.n_points != np || k.slot_dims != slots || k.out_dim != out {
                return Err(Error::Problem(format!(
                    "{name}: expected {np} points, slots {slots:?}, {out} outputs; got {} points, slots {:?}, {} outputs",
                    k.n_points, k.slot_dims, k.out_dim
                )));
            }
            Ok(())
        };
        let forcing = self.forcing.unwrap_or_else(|| Kernel::zero(1, &[], n));
        let f1 = self.f1.unwrap_or_else(|| Kernel::zero(2, &[n, m], n));
        let f2 = self.f2.unwrap_or_else(|| Kernel::zero(3, &[n, n, m, m], n));
        let cost1 = self.cost1.unwrap_or_else(|| Kernel::zero(1, &[n, m], 1));
        let cost2 = self.cost2.unwrap_or_else(|| Kernel::zero(2, &[n, n, m, m], 1));
        let terminal = self.terminal.unwrap_or_else(|| Kernel::zero(1, &[n], 1));
        check(&forcing, "forcing", 1, &[], n)?;
        check(&f1, "f1", 2, &[n, m], n)?;
        check(&f2, "f2", 3, &[n, n, m, m], n)?;
        check(&cost1, "F1", 1, &[n, m], 1)?;
        check(&cost2, "F2", 2, &[n, n, m, m], 1)?;
        check(&terminal, "F0", 1, &[n], 1)?;
        if self.family == Family::Fredholm && !terminal.is_zero() {
            return Err(Error::Problem("terminal cost is only defined for Volterra problems".into()));
        }
        let f2_sym = if f2.is_zero() { f2.clone() } else { symmetrize(&f2, PairKernel::Dynamics) };
        let cost2_sym =
            if cost2.is_zero() { cost2.clone() } else { symmetrize(&cost2, PairKernel::Cost) };
        Ok(Problem {
            family: self.family,
            n,
            m,
            forcing,
            f1,
            f2: f2_sym,
            cost1,
            cost2: cost2_sym,
            terminal,
            f2_original: f2,
            cost2_original: cost2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::build_grid;

    fn f2_phi1() -> Kernel {
        Kernel::new(3, &[1, 1, 1, 1], 1, |_, s| vec![s[0][0]])
    }

    #[test]
    fn symmetrize_average() {
        let k = symmetrize(&f2_phi1(), PairKernel::Dynamics);
        let p = [0.1, 0.2, 0.3];
        let pts: Vec<&[f64]> = p.iter().map(std::slice::from_ref).collect();
        let v = k.eval(&pts, &[&[3.0], &[5.0], &[0.0], &[0.0]]);
        assert_eq!(v, vec![4.0]);
    }

    #[test]
    fn symmetrize_fixed_point() {
        let sym = Kernel::new(3, &[1, 1, 1, 1], 1, |p, s| {
            vec![p[0][0] * (s[0][0] * s[1][0] + p[1][0] * p[2][0] + s[2][0] + s[3][0])]
        });
        let k = symmetrize(&sym, PairKernel::Dynamics);
        let pts: [&[f64]; 3] = [&[0.3], &[0.7], &[0.2]];
        let slots: [&[f64]; 4] = [&[1.5], &[-0.5], &[2.0], &[0.25]];
        assert!((k.eval(&pts, &slots)[0] - sym.eval(&pts, &slots)[0]).abs() < 1e-15);
    }

    #[test]
    fn symmetrize_preserves_double_integral() {
        // f2 = y·u2 with fixed x
        let f2 = Kernel::new(3, &[1, 1, 1, 1], 1, |p, s| vec![p[1][0] * s[3][0]]);
        let k = symmetrize(&f2, PairKernel::Dynamics);
        let g = build_grid(1.0, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi: Vec<f64> = (0..g.len()).map(|_| rng.gen()).collect();
        let u: Vec<f64> = (0..g.len()).map(|_| rng.gen()).collect();
        let double = |k: &Kernel| {
            let mut s = 0.0;
            for j in 0..g.len() {
                for l in 0..g.len() {
                    let v = k.eval(
                        &[&[0.5], g.point(j), g.point(l)],
                        &[&[phi[j]], &[phi[l]], &[u[j]], &[u[l]]],
                    )[0];
                    s += g.weight(j) * g.weight(l) * v;
                }
            }
            s
        };
        assert!((double(&f2) - double(&k)).abs() < 1e-12);
    }

    #[test]
    fn symmetry_residuals() {
        let sym = symmetrize(&f2_phi1(), PairKernel::Dynamics);
        assert_eq!(check_symmetry(&sym, PairKernel::Dynamics, 1, 20, 0), 0.0);
        let pts: [&[f64]; 3] = [&[0.0], &[0.1], &[0.2]];
        let r = symmetry_residual_at(&f2_phi1(), PairKernel::Dynamics, &pts, &[&[1.0], &[0.0], &[0.0], &[0.0]]);
        assert_eq!(r, 1.0);
        let messy = Kernel::new(3, &[1, 1, 1, 1], 1, |p, s| {
            vec![(p[1][0] * s[0][0]).sin() + p[2][0].exp() * s[3][0] * s[1][0].powi(3) + p[0][0]]
        });
        let r = check_symmetry(&symmetrize(&messy, PairKernel::Dynamics), PairKernel::Dynamics, 1, 50, 1);
        assert!(r <= 1e-14, "{r}");
        let cost = Kernel::new(2, &[1, 1, 1, 1], 1, |p, s| vec![p[0][0] * s[0][0] * s[3][0]]);
        let r = check_symmetry(&symmetrize(&cost, PairKernel::Cost), PairKernel::Cost, 1, 50, 2);
        assert!(r <= 1e-14);
    }

    #[test]
    fn fold_examples() {
        let g = Kernel::new(2, &[1, 1], 1, |p, _| vec![p[0][0]]);
        let gt = fold_causal(&g).unwrap();
        let at = |s: f64, t: f64| gt.eval(&[&[s], &[t]], &[&[0.0], &[0.0]])[0];
        // below the diagonal only the causal branch contributes
        assert_eq!(at(0.8, 0.3), 0.8);
        assert_eq!(at(0.3, 0.8), 0.8);
        assert_eq!(at(0.5, 0.5), 0.5);
        let z = fold_causal(&Kernel::zero(2, &[1, 1], 1)).unwrap();
        assert_eq!(z.eval(&[&[0.2], &[0.1]], &[&[1.0], &[2.0]]), vec![0.0]);
    }

    #[test]
    fn fold_preserves_triangle_integral() {
        let g = Kernel::new(2, &[1, 1], 1, |p, _| vec![p[0][0] * p[1][0]]);
        let gt = fold_causal(&g).unwrap();
        let grid = build_grid(1.0, 64).unwrap();
        let mut folded = 0.0;
        for j in 0..grid.len() {
            for k in 0..grid.len() {
                folded += grid.weight(j)
                    * grid.weight(k)
                    * gt.eval(&[grid.point(j), grid.point(k)], &[&[0.0], &[0.0]])[0];
            }
        }
        assert!((0.5 * folded - 0.125).abs() < 1e-4);
    }

    #[test]
    fn fd_examples() {
        let half_sq = Kernel::new(1, &[1], 1, |_, s| vec![0.5 * s[0][0] * s[0][0]]);
        let DerivativeFn::First(d) = fd_derivative(&half_sq, 0, 1).unwrap() else { panic!() };
        assert!((d(&[&[0.0]], &[&[3.0]])[(0, 0)] - 3.0).abs() < 1e-8);
        let c = Kernel::new(1, &[1], 1, |_, _| vec![2.5]);
        let DerivativeFn::First(d) = fd_derivative(&c, 0, 1).unwrap() else { panic!() };
        assert_eq!(d(&[&[0.0]], &[&[1.0]])[(0, 0)], 0.0);
        let s = Kernel::new(1, &[1], 1, |_, s| vec![s[0][0].sin()]);
        let DerivativeFn::First(d) = fd_derivative(&s, 0, 1).unwrap() else { panic!() };
        assert!((d(&[&[0.0]], &[&[0.7]])[(0, 0)] - 0.7f64.cos()).abs() < 1e-9);
        let DerivativeFn::Second(h) = fd_derivative(&s, 0, 2).unwrap() else { panic!() };
        assert!((h(&[&[0.0]], &[&[0.7]]).get(0, 0, 0) + 0.7f64.sin()).abs() < 1e-7);
        assert!(fd_derivative(&s, 1, 1).is_err());
        assert!(fd_derivative(&s, 0, 3).is_err());
    }

    #[test]
    fn mixed_fd_hessian() {
        let k = Kernel::new(1, &[2, 1], 2, |_, s| {
            vec![s[0][0] * s[0][1] * s[1][0], s[0][1].powi(2) * s[1][0]]
        });
        let h = k.hessian(&[&[0.0]], &[&[1.0, 2.0], &[3.0]], 0, 1);
        assert_eq!(h.dims(), [2, 1, 2]);
        assert!((h.get(0, 0, 0) - 2.0).abs() < 1e-7);
        assert!((h.get(1, 0, 0) - 1.0).abs() < 1e-7);
        assert!((h.get(1, 0, 1) - 4.0).abs() < 1e-7);
        let hs = k.hessian(&[&[0.0]], &[&[1.0, 2.0], &[3.0]], 0, 0);
        assert!((hs.get(0, 1, 0) - 3.0).abs() < 1e-7);
        assert!((hs.get(1, 1, 1) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn builder_checks_shapes_and_symmetrizes() {
        let bad = Problem::builder(Family::Fredholm, 1, 1)
            .f1(Kernel::zero(2, &[2, 1], 1))
            .build();
        assert!(bad.is_err());
        let p = Problem::builder(Family::Fredholm, 1, 1).f2(f2_phi1()).build().unwrap();
        assert!(check_symmetry(p.f2(), PairKernel::Dynamics, 1, 30, 0) <= 1e-12);
        assert!(check_symmetry(p.original_f2(), PairKernel::Dynamics, 1, 30, 0) > 0.1);
        let term = Problem::builder(Family::Fredholm, 1, 1)
            .terminal_cost(Kernel::new(1, &[1], 1, |_, s| vec![s[0][0]]))
            .build();
        assert!(term.is_err());
    }

    #[test]
    fn field_basics() {
        let g = build_grid(1.0, 4).unwrap();
        let f = Field::from_fn(&g, 2, |x| vec![x[0], 1.0]);
        assert_eq!(f.nodes(), 5);
        assert_eq!(f.at(2), &[0.5, 1.0]);
        assert!((f.weighted_dot(&Field::constant(5, &[0.0, 1.0]), &g) - 1.0).abs() < 1e-15);
        assert!(Field::from_vec(2, vec![1.0; 3]).is_err());
    }
}

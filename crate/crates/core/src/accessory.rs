//! Accessory linear-quadratic data, second-order quadratic integral forms and
//! their positive-definiteness checks.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::problem::Field;
use crate::quadrature::Grid;

/// Eigenvalues above this are treated as positive, below its negative as
/// negative; anything between is inconclusive.
pub const PD_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    PositiveDefinite,
    Indefinite,
    Inconclusive,
}

impl Verdict {
    pub fn from_min_eig(lambda: f64) -> Self {
        if lambda > PD_THRESHOLD {
            Verdict::PositiveDefinite
        } else if lambda > -PD_THRESHOLD {
            Verdict::Inconclusive
        } else {
            Verdict::Indefinite
        }
    }

    pub fn is_pd(self) -> bool {
        self == Verdict::PositiveDefinite
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::PositiveDefinite => "positive-definite",
            Verdict::Indefinite => "indefinite",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PDReport {
    /// Headline verdict: the pointwise test for Fredholm forms, the discrete
    /// Gram test for Volterra forms.
    pub verdict: Verdict,
    /// Smallest eigenvalue of the pointwise block matrix `M(x1, x2)` over all
    /// node pairs.
    pub min_eig_pointwise: f64,
    /// Smallest eigenvalue of the weighted Gram matrix of the discrete form.
    pub min_eig_discrete: f64,
    pub pointwise_verdict: Verdict,
    pub discrete_verdict: Verdict,
}

/// `scale · (Σ_i w_i U_iᵀ R1_i U_i + Σ_i Σ_k w_i w_k U_iᵀ K_ik U_k)`.
#[derive(Debug, Clone)]
pub struct QuadIntegralForm {
    pub m: usize,
    pub r1: Vec<DMatrix<f64>>,
    /// Node-pair blocks, index `i * nodes + k`.
    pub k: Vec<DMatrix<f64>>,
    pub scale: f64,
    pub verdict: Option<Verdict>,
}

impl QuadIntegralForm {
    pub fn new(r1: Vec<DMatrix<f64>>, k: Vec<DMatrix<f64>>, scale: f64) -> Result<Self> {
        let nodes = r1.len();
        if nodes == 0 || k.len() != nodes * nodes {
            return Err(Error::Shape(format!(
                "{} pointwise blocks need {} pair blocks, got {}",
                nodes,
                nodes * nodes,
                k.len()
            )));
        }
        let m = r1[0].nrows();
        if r1.iter().chain(&k).any(|b| b.nrows() != m || b.ncols() != m) {
            return Err(Error::Shape(format!("all form blocks must be {m}×{m}")));
        }
        Ok(Self { m, r1, k, scale, verdict: None })
    }

    pub fn nodes(&self) -> usize {
        self.r1.len()
    }

    #[inline]
    pub fn kernel(&self, i: usize, k: usize) -> &DMatrix<f64> {
        &self.k[i * self.nodes() + k]
    }

    pub fn value(&self, grid: &Grid, u: &Field) -> Result<f64> {
        let nn = self.nodes();
        u.check(nn, self.m, "form argument")?;
        if grid.len() != nn {
            return Err(Error::Shape(format!("form on {nn} nodes, grid has {}", grid.len())));
        }
        let col = |i: usize| nalgebra::DVector::from_column_slice(u.at(i));
        let mut v = 0.0;
        for i in 0..nn {
            let ui = col(i);
            v += grid.weight(i) * ui.dot(&(&self.r1[i] * &ui));
            for k in 0..nn {
                v += grid.weight(i) * grid.weight(k) * ui.dot(&(self.kernel(i, k) * col(k)));
            }
        }
        Ok(self.scale * v)
    }

    /// `max |K(i,k) − K(k,i)ᵀ|` and `max |R1_i − R1_iᵀ|`.
    pub fn symmetry_residual(&self) -> f64 {
        let nn = self.nodes();
        let mut r: f64 = 0.0;
        for i in 0..nn {
            r = r.max((&self.r1[i] - self.r1[i].transpose()).amax());
            for k in 0..nn {
                r = r.max((self.kernel(i, k) - self.kernel(k, i).transpose()).amax());
            }
        }
        r
    }

    /// Weighted Gram matrix `δ_ik R1_i + √(w_i w_k) K_ik`; its eigenvalues
    /// govern the sign of the discrete form.
    pub fn gram(&self, grid: &Grid) -> DMatrix<f64> {
        let (nn, m) = (self.nodes(), self.m);
        let mut g = DMatrix::zeros(nn * m, nn * m);
        for i in 0..nn {
            for k in 0..nn {
                let mut blk = self.kernel(i, k) * (grid.weight(i) * grid.weight(k)).sqrt();
                if i == k {
                    blk += &self.r1[i];
                }
                g.view_mut((i * m, k * m), (m, m)).copy_from(&blk);
            }
        }
        sym(&g)
    }

    /// Smallest eigenvalue of `M(x1,x2) = [[R1(x1)/|G|, K(x1,x2)], [K(x2,x1), R1(x2)/|G|]]`
    /// over every node pair.
    pub fn pointwise_min_eig(&self, measure: f64) -> f64 {
        let (nn, m) = (self.nodes(), self.m);
        let mut worst = f64::INFINITY;
        let mut blk = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..nn {
            for k in i..nn {
                blk.view_mut((0, 0), (m, m)).copy_from(&(&self.r1[i] / measure));
                blk.view_mut((m, m), (m, m)).copy_from(&(&self.r1[k] / measure));
                blk.view_mut((0, m), (m, m)).copy_from(self.kernel(i, k));
                blk.view_mut((m, 0), (m, m)).copy_from(self.kernel(k, i));
                worst = worst.min(min_eig(&sym(&blk)));
            }
        }
        worst
    }
}

pub(crate) fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Linear accessory dynamics and quadratic cost blocks on a grid.
///
/// Dynamics: `δy_a = Σ_b W_ab (A_ab δy_b + B_ab δu_b)`; cost:
/// `δy_Nᵀ P0 δy_N + Σ w [δyᵀP1δy + 2δyᵀQ1δu + δuᵀR1δu]
///  + ΣΣ w w [δyᵀP2δy' + 2δyᵀQ2δu' + δuᵀR2δu']`.
/// Pair blocks are indexed `a * nodes + b`.
#[derive(Debug, Clone)]
pub struct AccessoryData {
    pub n: usize,
    pub m: usize,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub p0: DMatrix<f64>,
    pub p1: Vec<DMatrix<f64>>,
    pub q1: Vec<DMatrix<f64>>,
    pub r1: Vec<DMatrix<f64>>,
    pub p2: Vec<DMatrix<f64>>,
    pub q2: Vec<DMatrix<f64>>,
    pub r2: Vec<DMatrix<f64>>,
}

impl AccessoryData {
    pub fn zeros(nodes: usize, n: usize, m: usize) -> Self {
        let np = nodes * nodes;
        Self {
            n,
            m,
            a: vec![DMatrix::zeros(n, n); np],
            b: vec![DMatrix::zeros(n, m); np],
            p0: DMatrix::zeros(n, n),
            p1: vec![DMatrix::zeros(n, n); nodes],
            q1: vec![DMatrix::zeros(n, m); nodes],
            r1: vec![DMatrix::zeros(m, m); nodes],
            p2: vec![DMatrix::zeros(n, n); np],
            q2: vec![DMatrix::zeros(n, m); np],
            r2: vec![DMatrix::zeros(m, m); np],
        }
    }

    pub fn nodes(&self) -> usize {
        self.r1.len()
    }

    /// Samples every block from point functions on the grid.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        grid: &Grid,
        n: usize,
        m: usize,
        a: impl Fn(&[f64], &[f64]) -> DMatrix<f64>,
        b: impl Fn(&[f64], &[f64]) -> DMatrix<f64>,
        pointwise: impl Fn(&[f64]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>),
        pair: impl Fn(&[f64], &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>),
    ) -> Self {
        let nn = grid.len();
        let mut d = Self::zeros(nn, n, m);
        for i in 0..nn {
            let (p, q, r) = pointwise(grid.point(i));
            d.p1[i] = p;
            d.q1[i] = q;
            d.r1[i] = r;
            for k in 0..nn {
                let (x, z) = (grid.point(i), grid.point(k));
                d.a[i * nn + k] = a(x, z);
                d.b[i * nn + k] = b(x, z);
                let (p, q, r) = pair(x, z);
                d.p2[i * nn + k] = p;
                d.q2[i * nn + k] = q;
                d.r2[i * nn + k] = r;
            }
        }
        d
    }

    pub(crate) fn check(&self) -> Result<()> {
        let (n, m, nn) = (self.n, self.m, self.nodes());
        let ok = |v: &[DMatrix<f64>], len: usize, r: usize, c: usize| {
            v.len() == len && v.iter().all(|b| b.nrows() == r && b.ncols() == c)
        };
        let np = nn * nn;
        if !(ok(&self.a, np, n, n)
            && ok(&self.b, np, n, m)
            && ok(&self.p1, nn, n, n)
            && ok(&self.q1, nn, n, m)
            && ok(&self.r1, nn, m, m)
            && ok(&self.p2, np, n, n)
            && ok(&self.q2, np, n, m)
            && ok(&self.r2, np, m, m)
            && self.p0.nrows() == n
            && self.p0.ncols() == n)
        {
            return Err(Error::Shape(format!(
                "accessory blocks inconsistent with {nn} nodes, n = {n}, m = {m}"
            )));
        }
        Ok(())
    }

    /// Accessory cost for a given pair `(δy, δu)`, without the form scale.
    pub fn cost(&self, grid: &Grid, dy: &Field, du: &Field, terminal: Option<usize>) -> f64 {
        let nn = self.nodes();
        let y = |i: usize| nalgebra::DVector::from_column_slice(dy.at(i));
        let v = |i: usize| nalgebra::DVector::from_column_slice(du.at(i));
        let mut j = terminal.map_or(0.0, |t| y(t).dot(&(&self.p0 * y(t))));
        for i in 0..nn {
            let (yi, vi) = (y(i), v(i));
            j += grid.weight(i)
                * (yi.dot(&(&self.p1[i] * &yi))
                    + 2.0 * yi.dot(&(&self.q1[i] * &vi))
                    + vi.dot(&(&self.r1[i] * &vi)));
            for k in 0..nn {
                let idx = i * nn + k;
                let (yk, vk) = (y(k), v(k));
                j += grid.weight(i)
                    * grid.weight(k)
                    * (yi.dot(&(&self.p2[idx] * &yk))
                        + 2.0 * yi.dot(&(&self.q2[idx] * &vk))
                        + vi.dot(&(&self.r2[idx] * &vk)));
            }
        }
        j
    }

    /// Reduced two-point kernel given the control-to-state representation
    /// `δy_a = Σ_b w_b C_ab δu_b` (`c` is the dense `(N·n)×(N·m)` matrix of
    /// the blocks `C_ab`). The result is symmetrized so that
    /// `K(i,k) = K(k,i)ᵀ`.
    pub(crate) fn reduce(&self, grid: &Grid, c: &DMatrix<f64>, terminal: Option<usize>) -> Vec<DMatrix<f64>> {
        let (n, m, nn) = (self.n, self.m, self.nodes());
        let mut wn = DMatrix::zeros(nn * n, nn * n);
        let mut p1 = DMatrix::zeros(nn * n, nn * n);
        let mut q1 = DMatrix::zeros(nn * n, nn * m);
        let mut p2 = DMatrix::zeros(nn * n, nn * n);
        let mut q2 = DMatrix::zeros(nn * n, nn * m);
        let mut r2 = DMatrix::zeros(nn * m, nn * m);
        for i in 0..nn {
            for k in 0..n {
                wn[(i * n + k, i * n + k)] = grid.weight(i);
            }
            p1.view_mut((i * n, i * n), (n, n)).copy_from(&self.p1[i]);
            q1.view_mut((i * n, i * m), (n, m)).copy_from(&self.q1[i]);
            for k in 0..nn {
                let idx = i * nn + k;
                p2.view_mut((i * n, k * n), (n, n)).copy_from(&self.p2[idx]);
                q2.view_mut((i * n, k * m), (n, m)).copy_from(&self.q2[idx]);
                r2.view_mut((i * m, k * m), (m, m)).copy_from(&self.r2[idx]);
            }
        }
        let ct = c.transpose();
        let wc = &wn * c;
        let mut k = &ct * &p1 * &wc;
        let kq1 = &ct * &q1;
        let kq2 = &ct * (&wn * &q2);
        k += &kq1 + kq1.transpose();
        k += &kq2 + kq2.transpose();
        k += wc.transpose() * &p2 * &wc;
        k += r2;
        if let Some(t) = terminal {
            let row = c.rows(t * n, n);
            k += row.transpose() * &self.p0 * row;
        }
        let k = sym(&k);
        let mut out = Vec::with_capacity(nn * nn);
        for i in 0..nn {
            for j in 0..nn {
                out.push(k.view((i * m, j * m), (m, m)).into_owned());
            }
        }
        out
    }
}

/// Value of a second variation split into its contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondVariationReport {
    /// Sum of the four contributions below.
    pub value: f64,
    /// `∇²F0(δy(T), δy(T))`; zero for Fredholm problems.
    pub terminal: f64,
    /// Pointwise Hamiltonian Hessian term.
    pub pointwise: f64,
    /// Two-point ancillary Hamiltonian term.
    pub cross: f64,
    /// `∫ ∇_u H · δ²u`; zero for linear control variations.
    pub d2u_term: f64,
}

impl SecondVariationReport {
    pub(crate) fn new(terminal: f64, pointwise: f64, cross: f64, d2u_term: f64) -> Self {
        Self { value: terminal + pointwise + cross + d2u_term, terminal, pointwise, cross, d2u_term }
    }
}

/// Samples a two-point matrix kernel at every node pair (index `i * N + k`).
pub fn sample_pair_kernel(grid: &Grid, f: impl Fn(&[f64], &[f64]) -> DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let nn = grid.len();
    let mut out = Vec::with_capacity(nn * nn);
    for i in 0..nn {
        for k in 0..nn {
            out.push(f(grid.point(i), grid.point(k)));
        }
    }
    out
}

/// Runs both the pointwise and the Gram test. `pointwise_headline` selects
/// which verdict becomes [`PDReport::verdict`].
pub(crate) fn pd_report(form: &QuadIntegralForm, grid: &Grid, pointwise_headline: bool) -> Result<PDReport> {
    if form.nodes() != grid.len() {
        return Err(Error::Shape(format!("form on {} nodes, grid has {}", form.nodes(), grid.len())));
    }
    let residual = form.symmetry_residual();
    if residual > 1e-10 {
        return Err(Error::Asymmetric { what: "quadratic form blocks".into(), residual });
    }
    let min_eig_pointwise = form.pointwise_min_eig(grid.measure());
    let min_eig_discrete = min_eig(&form.gram(grid));
    let pointwise_verdict = Verdict::from_min_eig(min_eig_pointwise);
    let discrete_verdict = Verdict::from_min_eig(min_eig_discrete);
    Ok(PDReport {
        verdict: if pointwise_headline { pointwise_verdict } else { discrete_verdict },
        min_eig_pointwise,
        min_eig_discrete,
        pointwise_verdict,
        discrete_verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::build_grid;

    #[test]
    fn verdict_thresholds() {
        assert_eq!(Verdict::from_min_eig(1e-9), Verdict::PositiveDefinite);
        assert_eq!(Verdict::from_min_eig(1e-10), Verdict::Inconclusive);
        assert_eq!(Verdict::from_min_eig(0.0), Verdict::Inconclusive);
        assert_eq!(Verdict::from_min_eig(-1e-10), Verdict::Indefinite);
        assert_eq!(Verdict::from_min_eig(-1.0), Verdict::Indefinite);
    }

    #[test]
    fn gram_matches_form_value() {
        let g = build_grid(1.0, 5).unwrap();
        let nn = g.len();
        let r1 = (0..nn).map(|i| DMatrix::from_element(1, 1, 1.0 + i as f64)).collect();
        let mut k = Vec::new();
        for i in 0..nn {
            for j in 0..nn {
                k.push(DMatrix::from_element(1, 1, 0.1 * (i + j) as f64));
            }
        }
        let f = QuadIntegralForm::new(r1, k, 1.0).unwrap();
        let u = Field::from_vec(1, (0..nn).map(|i| (i as f64).sin()).collect()).unwrap();
        let v: Vec<f64> = (0..nn).map(|i| g.weight(i).sqrt() * u.at(i)[0]).collect();
        let gv = f.gram(&g) * nalgebra::DVector::from_vec(v.clone());
        let quad: f64 = v.iter().zip(gv.iter()).map(|(a, b)| a * b).sum();
        assert!((quad - f.value(&g, &u).unwrap()).abs() < 1e-12);
    }
}

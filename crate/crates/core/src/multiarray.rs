//! Tridimensional matrices with upper/lower index placement.
//!
//! A [`Tri3`] stores its entries densely, row-major over three storage
//! positions `(p0, p1, p2)`, and records for each position whether the index
//! is written as a superscript (upper) or a subscript (lower). The two
//! signatures used throughout the crate are
//!
//! * [`Signature::OneLowerTwoUpper`]: `A_k^{ij}` stored at `(i, j, k)`;
//! * [`Signature::TwoLowerOneUpper`]: `A_{ij}^k` stored at `(i, j, k)`.
//!
//! Indices are 0-based. Mathematical texts usually write them 1-based, so
//! `A_1^{21}` is `a.get(1, 0, 0)` here.
//!
//! Hessians of vector-valued maps, `(∇xx f)_i^{jk} = ∂²f_i/∂x_j∂x_k`, are
//! stored with the `OneLowerTwoUpper` signature at `(j, k, i)`, so the free
//! (lower) output index always sits in the last storage position.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Placement of a single index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Index {
    Upper,
    Lower,
}

impl Index {
    fn flipped(self) -> Self {
        match self {
            Index::Upper => Index::Lower,
            Index::Lower => Index::Upper,
        }
    }
}

/// The two named index signatures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signature {
    /// `A_k^{ij}` at storage `(i, j, k)`.
    OneLowerTwoUpper,
    /// `A_{ij}^k` at storage `(i, j, k)`.
    TwoLowerOneUpper,
}

impl Signature {
    pub fn placement(self) -> [Index; 3] {
        match self {
            Signature::OneLowerTwoUpper => [Index::Upper, Index::Upper, Index::Lower],
            Signature::TwoLowerOneUpper => [Index::Lower, Index::Lower, Index::Upper],
        }
    }

    pub fn of(placement: [Index; 3]) -> Option<Self> {
        [Signature::OneLowerTwoUpper, Signature::TwoLowerOneUpper]
            .into_iter()
            .find(|s| s.placement() == placement)
    }
}

/// General rearrangement descriptor: a permutation of the storage positions
/// together with the resulting index placement.
///
/// The transposed array `B` satisfies
/// `B[idx] = A[[idx[perm[0]], idx[perm[1]], idx[perm[2]]]]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexMap {
    pub perm: [usize; 3],
    pub placement: [Index; 3],
}

/// The transposition family on tridimensional matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transposition {
    /// `(A^{T+})_k^{ij} = A_j^{ki}`; order 3.
    Plus,
    /// `(A^{T−})_k^{ij} = A_i^{jk}`; inverse of [`Transposition::Plus`].
    Minus,
    /// `(A^{T⇕})_k^{ij} = A_{ij}^k`: swaps upper and lower placement.
    Flip,
    /// `(A^{T↔})_k^{ij} = A_k^{ji}`.
    Swap,
    /// `(A^{T↷})_k^{ij} = A_i^{kj}`, `(A^{T↷})_{ij}^k = A_{ik}^j`.
    Clockwise,
    /// `(A^{T↶})_k^{ij} = A_j^{ik}`, `(A^{T↶})_{ij}^k = A_{kj}^i`.
    CounterClockwise,
    General(IndexMap),
}

impl Transposition {
    /// Resolves the transposition into an explicit descriptor for an array
    /// with the given placement.
    pub fn index_map(&self, placement: [Index; 3]) -> Result<IndexMap> {
        let keep = |perm| Ok(IndexMap { perm, placement });
        match self {
            Transposition::Plus => keep([2, 0, 1]),
            Transposition::Minus => keep([1, 2, 0]),
            Transposition::Swap => keep([1, 0, 2]),
            Transposition::Flip => Ok(IndexMap {
                perm: [0, 1, 2],
                placement: placement.map(Index::flipped),
            }),
            Transposition::Clockwise | Transposition::CounterClockwise => {
                let sig = Signature::of(placement).ok_or_else(|| {
                    Error::Shape(format!(
                        "rotational transposition needs A_k^ij or A_ij^k placement, got {placement:?}"
                    ))
                })?;
                let cw = matches!(self, Transposition::Clockwise);
                let perm = match (sig, cw) {
                    (Signature::OneLowerTwoUpper, true) | (Signature::TwoLowerOneUpper, false) => {
                        [2, 1, 0]
                    }
                    _ => [0, 2, 1],
                };
                keep(perm)
            }
            Transposition::General(map) => {
                let mut seen = [false; 3];
                for &p in &map.perm {
                    if p > 2 || seen[p] {
                        return Err(Error::Shape(format!("{:?} is not a permutation", map.perm)));
                    }
                    seen[p] = true;
                }
                Ok(*map)
            }
        }
    }

    /// The transposition undoing `self` on an array whose placement before
    /// transposing was `source`.
    pub fn inverse(&self, source: [Index; 3]) -> Result<Transposition> {
        Ok(match self {
            Transposition::Plus => Transposition::Minus,
            Transposition::Minus => Transposition::Plus,
            Transposition::Flip | Transposition::Swap => *self,
            _ => {
                let map = self.index_map(source)?;
                let mut inv = [0; 3];
                for (q, &p) in map.perm.iter().enumerate() {
                    inv[p] = q;
                }
                Transposition::General(IndexMap { perm: inv, placement: source })
            }
        })
    }
}

/// Dense tridimensional matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tri3 {
    dims: [usize; 3],
    placement: [Index; 3],
    data: Vec<f64>,
}

impl Tri3 {
    pub fn zeros(dims: [usize; 3], signature: Signature) -> Self {
        Self {
            dims,
            placement: signature.placement(),
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(
        dims: [usize; 3],
        signature: Signature,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, placement: signature.placement(), data }
    }

    pub fn from_vec(dims: [usize; 3], signature: Signature, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "{} entries for dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self { dims, placement: signature.placement(), data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn placement(&self) -> [Index; 3] {
        self.placement
    }

    pub fn signature(&self) -> Option<Signature> {
        Signature::of(self.placement)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`; shapes must agree.
    pub fn axpy(&mut self, s: f64, other: &Tri3) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn transpose(&self, sigma: Transposition) -> Result<Tri3> {
        let map = sigma.index_map(self.placement)?;
        let mut dims = [0; 3];
        for q in 0..3 {
            dims[map.perm[q]] = self.dims[q];
        }
        let mut out = Tri3 { dims, placement: map.placement, data: vec![0.0; self.data.len()] };
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let idx = [i, j, k];
                    let v = self.get(idx[map.perm[0]], idx[map.perm[1]], idx[map.perm[2]]);
                    out.set(i, j, k, v);
                }
            }
        }
        Ok(out)
    }

    fn require_lower_last(&self, what: &str) -> Result<()> {
        if self.signature() != Some(Signature::OneLowerTwoUpper) {
            return Err(Error::Shape(format!("{what} needs an A_i^jk array")));
        }
        Ok(())
    }

    /// One of the two vector actions of `A_i^{jk}`: mode 1 contracts `j`,
    /// mode 2 contracts `k`. Rows of the result carry the lower index `i`.
    pub fn act(&self, w: &[f64], mode: u8) -> Result<DMatrix<f64>> {
        self.require_lower_last("act")?;
        let [dj, dk, di] = self.dims;
        match mode {
            1 => {
                check_len("act mode 1", w.len(), dj)?;
                Ok(DMatrix::from_fn(di, dk, |i, k| (0..dj).map(|j| self.get(j, k, i) * w[j]).sum()))
            }
            2 => {
                check_len("act mode 2", w.len(), dk)?;
                Ok(DMatrix::from_fn(di, dj, |i, j| (0..dk).map(|k| self.get(j, k, i) * w[k]).sum()))
            }
            _ => Err(Error::Shape(format!("act mode must be 1 or 2, got {mode}"))),
        }
    }

    /// `A(u ⊗ v)_i = A_i^{jk} u_j v_k`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.require_lower_last("bilinear")?;
        check_len("bilinear u", u.len(), self.dims[0])?;
        check_len("bilinear v", v.len(), self.dims[1])?;
        Ok(self.bilinear_unchecked(u, v))
    }

    pub(crate) fn bilinear_unchecked(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let [dj, dk, di] = self.dims;
        let mut out = vec![0.0; di];
        for j in 0..dj {
            if u[j] == 0.0 {
                continue;
            }
            for k in 0..dk {
                let uv = u[j] * v[k];
                if uv == 0.0 {
                    continue;
                }
                let base = (j * dk + k) * di;
                for (o, a) in out.iter_mut().zip(&self.data[base..base + di]) {
                    *o += a * uv;
                }
            }
        }
        out
    }

    /// `w^i A_i^{jk}`: contracts the lower index against a covector and
    /// returns the `(j, k)` matrix.
    pub fn contract_lower(&self, w: &[f64]) -> Result<DMatrix<f64>> {
        self.require_lower_last("contract_lower")?;
        check_len("contract_lower", w.len(), self.dims[2])?;
        Ok(self.contract_lower_unchecked(w))
    }

    pub(crate) fn contract_lower_unchecked(&self, w: &[f64]) -> DMatrix<f64> {
        let [dj, dk, di] = self.dims;
        DMatrix::from_fn(dj, dk, |j, k| {
            let base = (j * dk + k) * di;
            self.data[base..base + di].iter().zip(w).map(|(a, b)| a * b).sum()
        })
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: dimension {got}, expected {want}")));
    }
    Ok(())
}

/// Column vector `u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(pub Vec<f64>);

/// Row vector (covector) `w^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoVector(pub Vec<f64>);

impl Vector {
    /// `(u^T)^i = u_i`.
    pub fn t(&self) -> CoVector {
        CoVector(self.0.clone())
    }
}

impl CoVector {
    /// `(w^T)_i = w^i`.
    pub fn t(&self) -> Vector {
        Vector(self.0.clone())
    }

    pub fn dot(&self, u: &Vector) -> Result<f64> {
        check_len("covector pairing", u.0.len(), self.0.len())?;
        Ok(self.0.iter().zip(&u.0).map(|(a, b)| a * b).sum())
    }
}

/// `(u ⊗ v)_{ij} = u_i v_j`.
pub fn tensor_product(u: &Vector, v: &Vector) -> DMatrix<f64> {
    DMatrix::from_fn(u.0.len(), v.0.len(), |i, j| u.0[i] * v.0[j])
}

pub fn act(a: &Tri3, w: &Vector, mode: u8) -> Result<DMatrix<f64>> {
    a.act(&w.0, mode)
}

pub fn bilinear(a: &Tri3, u: &Vector, v: &Vector) -> Result<Vector> {
    a.bilinear(&u.0, &v.0).map(Vector)
}

/// `w A (u ⊗ v) = w^i A_i^{jk} u_j v_k`.
pub fn trilinear(w: &CoVector, a: &Tri3, u: &Vector, v: &Vector) -> Result<f64> {
    let au = bilinear(a, u, v)?;
    w.dot(&au)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tri3 {
        // a(i,j,k) = 100 i + 10 j + k with 1-based labels
        Tri3::from_fn([2, 2, 2], Signature::OneLowerTwoUpper, |i, j, k| {
            (100 * (i + 1) + 10 * (j + 1) + (k + 1)) as f64
        })
    }

    #[test]
    fn swap_entry() {
        let b = sample().transpose(Transposition::Swap).unwrap();
        // (i=1, j=2, k=1) in 1-based labels
        assert_eq!(b.get(0, 1, 0), 211.0);
    }

    #[test]
    fn plus_has_order_three() {
        let a = Tri3::from_fn([2, 3, 4], Signature::OneLowerTwoUpper, |i, j, k| {
            (i * 12 + j * 4 + k) as f64
        });
        let b = a
            .transpose(Transposition::Plus)
            .and_then(|x| x.transpose(Transposition::Plus))
            .and_then(|x| x.transpose(Transposition::Plus))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plus_matches_definition() {
        let a = Tri3::from_fn([2, 3, 4], Signature::OneLowerTwoUpper, |i, j, k| {
            (i * 12 + j * 4 + k) as f64 + 0.5
        });
        let b = a.transpose(Transposition::Plus).unwrap();
        assert_eq!(b.dims(), [3, 4, 2]);
        // (A^{T+})_k^{ij} = A_j^{ki}
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..2 {
                    assert_eq!(b.get(i, j, k), a.get(k, i, j));
                }
            }
        }
    }

    #[test]
    fn flip_changes_signature_only() {
        let a = sample();
        let b = a.transpose(Transposition::Flip).unwrap();
        assert_eq!(b.signature(), Some(Signature::TwoLowerOneUpper));
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn rotations_depend_on_signature() {
        let a = sample();
        let cw = a.transpose(Transposition::Clockwise).unwrap();
        // (A^{T↷})_k^{ij} = A_i^{kj}
        assert_eq!(cw.get(0, 1, 1), a.get(1, 1, 0));
        assert_eq!(cw.get(1, 0, 0), a.get(0, 0, 1));
        let up = a.transpose(Transposition::Flip).unwrap();
        let cw_up = up.transpose(Transposition::Clockwise).unwrap();
        // (A^{T↷})_{ij}^k = A_{ik}^j
        assert_eq!(cw_up.get(0, 1, 0), up.get(0, 0, 1));
    }

    #[test]
    fn general_rejects_non_permutation() {
        let t = Transposition::General(IndexMap {
            perm: [0, 0, 1],
            placement: Signature::OneLowerTwoUpper.placement(),
        });
        assert!(matches!(sample().transpose(t), Err(Error::Shape(_))));
    }

    #[test]
    fn rotation_rejects_mixed_placement() {
        let a = Tri3::zeros([1, 1, 1], Signature::OneLowerTwoUpper)
            .transpose(Transposition::General(IndexMap {
                perm: [0, 1, 2],
                placement: [Index::Upper, Index::Lower, Index::Upper],
            }))
            .unwrap();
        assert!(a.transpose(Transposition::Clockwise).is_err());
    }

    #[test]
    fn tensor_product_cases() {
        let t = tensor_product(&Vector(vec![1.0, 2.0]), &Vector(vec![3.0, 4.0, 5.0]));
        assert_eq!(t, DMatrix::from_row_slice(2, 3, &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]));
        let z = tensor_product(&Vector(vec![0.0, 0.0]), &Vector(vec![7.0, -1.0]));
        assert!(z.iter().all(|&x| x == 0.0));
        assert_eq!(tensor_product(&Vector(vec![1.0]), &Vector(vec![1.0]))[(0, 0)], 1.0);
    }

    #[test]
    fn act_single_entry() {
        let a = Tri3::from_vec([1, 1, 1], Signature::OneLowerTwoUpper, vec![1.0]).unwrap();
        let r = act(&a, &Vector(vec![5.0]), 1).unwrap();
        assert_eq!(r.shape(), (1, 1));
        assert_eq!(r[(0, 0)], 5.0);
        let z = Tri3::zeros([2, 3, 2], Signature::OneLowerTwoUpper);
        assert!(z.act(&[1.0, 2.0], 1).unwrap().iter().all(|&x| x == 0.0));
        assert!(z.act(&[1.0], 1).is_err());
        assert!(z.act(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn bilinear_and_trilinear_single_term() {
        let a = Tri3::from_vec([1, 1, 1], Signature::OneLowerTwoUpper, vec![1.0]).unwrap();
        let b = bilinear(&a, &Vector(vec![2.0]), &Vector(vec![3.0])).unwrap();
        assert_eq!(b.0, vec![6.0]);
        let t = trilinear(&CoVector(vec![1.0]), &a, &Vector(vec![2.0]), &Vector(vec![3.0])).unwrap();
        assert_eq!(t, 6.0);
    }

    #[test]
    fn vector_transpose_keeps_components() {
        let u = Vector(vec![1.0, -2.0]);
        assert_eq!(u.t().0, u.0);
        assert_eq!(u.t().t(), u);
    }
}

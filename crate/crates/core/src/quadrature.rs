//! Composite trapezoid discretization of an interval `[0, T]` or a box in
//! one or two dimensions.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Interval,
    Box,
}

/// Quadrature nodes and weights.
///
/// Nodes are stored flat with stride [`Grid::dim`]. Box nodes are ordered
/// with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    kind: GridKind,
    dim: usize,
    counts: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

fn trapezoid_axis(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (hi - lo) / n as f64;
    let nodes = (0..=n)
        .map(|i| if i == n { hi } else { lo + i as f64 * h })
        .collect();
    let weights = (0..=n)
        .map(|i| if i == 0 || i == n { 0.5 * h } else { h })
        .collect();
    (nodes, weights)
}

/// Uniform grid on `[0, T]` with `n` subdivisions (`n + 1` nodes).
pub fn build_grid(t: f64, n: usize) -> Result<Grid> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Grid(format!("interval length must be positive, got {t}")));
    }
    if n < 2 {
        return Err(Error::Grid(format!("need at least 2 subdivisions, got {n}")));
    }
    let (coords, weights) = trapezoid_axis(0.0, t, n);
    Ok(Grid {
        kind: GridKind::Interval,
        dim: 1,
        counts: vec![n],
        lower: vec![0.0],
        upper: vec![t],
        coords,
        weights,
    })
}

/// Tensor-product trapezoid grid on a box with at most two axes.
pub fn build_box_grid(bounds: &[(f64, f64)], counts: &[usize]) -> Result<Grid> {
    if bounds.is_empty() || bounds.len() > 2 {
        return Err(Error::Grid(format!("box dimension must be 1 or 2, got {}", bounds.len())));
    }
    if bounds.len() != counts.len() {
        return Err(Error::Grid("one subdivision count per axis required".into()));
    }
    for (&(lo, hi), &n) in bounds.iter().zip(counts) {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Grid(format!("axis [{lo}, {hi}] has nonpositive extent")));
        }
        if n < 1 {
            return Err(Error::Grid("each axis needs at least one subdivision".into()));
        }
    }
    let axes: Vec<_> = bounds
        .iter()
        .zip(counts)
        .map(|(&(lo, hi), &n)| trapezoid_axis(lo, hi, n))
        .collect();
    let (coords, weights) = if axes.len() == 1 {
        axes[0].clone()
    } else {
        let (ref x0, ref w0) = axes[0];
        let (ref x1, ref w1) = axes[1];
        let mut c = Vec::with_capacity(2 * x0.len() * x1.len());
        let mut w = Vec::with_capacity(x0.len() * x1.len());
        for (a, wa) in x0.iter().zip(w0) {
            for (b, wb) in x1.iter().zip(w1) {
                c.extend([*a, *b]);
                w.push(wa * wb);
            }
        }
        (c, w)
    };
    Ok(Grid {
        kind: GridKind::Box,
        dim: bounds.len(),
        counts: counts.to_vec(),
        lower: bounds.iter().map(|b| b.0).collect(),
        upper: bounds.iter().map(|b| b.1).collect(),
        coords,
        weights,
    })
}

impl Grid {
    pub fn kind(&self) -> GridKind {
        self.kind
    }

    /// Spatial dimension of a node.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Lebesgue measure of the domain.
    pub fn measure(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| b - a).product()
    }

    /// Right end `T` of an interval grid.
    pub fn horizon(&self) -> f64 {
        self.upper[0]
    }

    /// Node spacing of an interval grid.
    pub fn step(&self) -> f64 {
        (self.upper[0] - self.lower[0]) / self.counts[0] as f64
    }

    fn require_interval(&self) -> Result<()> {
        if self.kind != GridKind::Interval {
            return Err(Error::Grid("partial-range integration needs an interval grid".into()));
        }
        Ok(())
    }

    /// Trapezoid weight of node `j` in the rule for `∫_0^{t_i}`.
    ///
    /// Zero for `j > i` and for `i == 0`.
    #[inline]
    pub fn partial_weight(&self, i: usize, j: usize) -> f64 {
        if i == 0 || j > i {
            0.0
        } else if j == 0 || j == i {
            0.5 * self.step()
        } else {
            self.step()
        }
    }

    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} samples for a grid of {} nodes",
                values.len(),
                self.len()
            )));
        }
        Ok(self.weights.iter().zip(values).map(|(w, v)| w * v).sum())
    }

    /// Integrates vector samples stored node-major with the given stride.
    pub fn integrate_vec(&self, values: &[f64], dim: usize) -> Result<Vec<f64>> {
        if values.len() != self.len() * dim {
            return Err(Error::Shape(format!(
                "{} values for {} nodes of dimension {dim}",
                values.len(),
                self.len()
            )));
        }
        let mut out = vec![0.0; dim];
        for (w, chunk) in self.weights.iter().zip(values.chunks(dim.max(1))) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// `Σ_i Σ_j w_i w_j v_{ij}` for samples indexed `i * len + j`.
    pub fn integrate2(&self, values: &[f64]) -> Result<f64> {
        let n = self.len();
        if values.len() != n * n {
            return Err(Error::Shape(format!("{} pair samples for {n} nodes", values.len())));
        }
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| self.weights[j] * values[i * n + j]).sum();
            total += self.weights[i] * row;
        }
        Ok(total)
    }

    /// Trapezoid rule over nodes `0..=upto`, approximating `∫_0^{t_upto}`.
    pub fn integrate_partial(&self, values: &[f64], upto: usize) -> Result<f64> {
        self.require_interval()?;
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} samples for a grid of {} nodes",
                values.len(),
                self.len()
            )));
        }
        if upto >= self.len() {
            return Err(Error::Grid(format!("node index {upto} out of range")));
        }
        Ok((0..=upto).map(|j| self.partial_weight(upto, j) * values[j]).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_nodes_and_weights() {
        let g = build_grid(1.0, 4).unwrap();
        let nodes: Vec<f64> = (0..g.len()).map(|i| g.point(i)[0]).collect();
        assert_eq!(nodes, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.weights(), &[0.125, 0.25, 0.25, 0.25, 0.125]);
    }

    #[test]
    fn unit_square_single_cell() {
        let g = build_box_grid(&[(0.0, 1.0), (0.0, 1.0)], &[1, 1]).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.weights().iter().all(|&w| w == 0.25));
        assert_eq!(g.point(1), &[0.0, 1.0]);
    }

    #[test]
    fn weights_sum_to_measure() {
        let g = build_grid(2.0, 2).unwrap();
        assert_eq!(g.weights().iter().sum::<f64>(), 2.0);
        let b = build_box_grid(&[(0.0, 2.0), (-1.0, 0.5)], &[5, 7]).unwrap();
        assert!((b.weights().iter().sum::<f64>() - b.measure()).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_grid(0.0, 4).is_err());
        assert!(build_grid(1.0, 1).is_err());
        assert!(build_box_grid(&[(0.0, 1.0); 3], &[2, 2, 2]).is_err());
        assert!(build_box_grid(&[(1.0, 1.0)], &[2]).is_err());
    }

    #[test]
    fn integrate_examples() {
        let g = build_grid(1.0, 4).unwrap();
        let lin: Vec<f64> = (0..g.len()).map(|i| g.point(i)[0]).collect();
        assert_eq!(g.integrate(&lin).unwrap(), 0.5);
        let sq = build_box_grid(&[(0.0, 1.0), (0.0, 1.0)], &[3, 3]).unwrap();
        assert!((sq.integrate(&vec![1.0; sq.len()]).unwrap() - 1.0).abs() < 1e-15);
        let g = build_grid(1.0, 64).unwrap();
        let quad: Vec<f64> = (0..g.len()).map(|i| g.point(i)[0].powi(2)).collect();
        assert!((g.integrate(&quad).unwrap() - 1.0 / 3.0).abs() < 1e-4);
        assert!(g.integrate(&quad[1..]).is_err());
    }

    #[test]
    fn integrate_vec_components() {
        let g = build_grid(1.0, 4).unwrap();
        let vals: Vec<f64> = (0..g.len()).flat_map(|i| [1.0, g.point(i)[0]]).collect();
        assert_eq!(g.integrate_vec(&vals, 2).unwrap(), vec![1.0, 0.5]);
    }

    #[test]
    fn partial_examples() {
        let g = build_grid(1.0, 4).unwrap();
        let lin: Vec<f64> = (0..g.len()).map(|i| g.point(i)[0]).collect();
        assert_eq!(g.integrate_partial(&lin, 2).unwrap(), 0.125);
        assert_eq!(g.integrate_partial(&lin, 0).unwrap(), 0.0);
        assert!(g.integrate_partial(&lin, 5).is_err());
        let g = build_grid(1.0, 128).unwrap();
        let e: Vec<f64> = (0..g.len()).map(|i| g.point(i)[0].exp()).collect();
        let v = g.integrate_partial(&e, 128).unwrap();
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-4);
        assert_eq!(v, g.integrate(&e).unwrap());
    }

    #[test]
    fn partial_rejects_box() {
        let b = build_box_grid(&[(0.0, 1.0)], &[4]).unwrap();
        assert!(b.integrate_partial(&[0.0; 5], 1).is_err());
    }

    #[test]
    fn integrate2_separable() {
        let g = build_grid(1.5, 10).unwrap();
        let n = g.len();
        let f: Vec<f64> = (0..n).map(|i| g.point(i)[0].sin()).collect();
        let h: Vec<f64> = (0..n).map(|i| 1.0 + g.point(i)[0]).collect();
        let pair: Vec<f64> = (0..n * n).map(|k| f[k / n] * h[k % n]).collect();
        let lhs = g.integrate2(&pair).unwrap();
        let rhs = g.integrate(&f).unwrap() * g.integrate(&h).unwrap();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn trapezoid_order_on_exponential() {
        let err = |n| {
            let g = build_grid(1.0, n).unwrap();
            let v: Vec<f64> = (0..g.len()).map(|i| g.point(i)[0].exp()).collect();
            (g.integrate(&v).unwrap() - (1f64.exp() - 1.0)).abs()
        };
        let (e1, e2, e3) = (err(16), err(32), err(64));
        assert!((e1 / e2).log2() >= 1.9);
        assert!((e2 / e3).log2() >= 1.9);
    }
}

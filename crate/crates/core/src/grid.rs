//! Uniform tensor grids, fourth-order finite differences, interpolation and quadrature.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::Mat;

/// Minimum number of nodes per axis for the five-point stencils.
pub const MIN_POINTS: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("axis {axis} has {points} points; at least {MIN_POINTS} are needed")]
    GridTooSmall { axis: usize, points: usize },
    #[error("axis {axis} has an even number of points ({points})")]
    EvenPoints { axis: usize, points: usize },
    #[error("axis {axis}: the origin is not a grid node")]
    OriginNotNode { axis: usize },
    #[error("axis {axis}: invalid extent [{min}, {max}]")]
    BadExtent { axis: usize, min: f64, max: f64 },
    #[error("fields live on different grids")]
    GridMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub points: usize,
    pub h: f64,
}

/// A uniform grid on a box in ℝʳ. Node indices are row-major, the last axis fastest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(extents: &[(f64, f64)], points: &[usize]) -> Result<Self, GridError> {
        assert_eq!(extents.len(), points.len(), "one point count per axis");
        let mut axes = Vec::with_capacity(points.len());
        for (axis, (&(min, max), &n)) in extents.iter().zip(points).enumerate() {
            if !(min.is_finite() && max.is_finite() && min < max) {
                return Err(GridError::BadExtent { axis, min, max });
            }
            if n < MIN_POINTS {
                return Err(GridError::GridTooSmall { axis, points: n });
            }
            if n % 2 == 0 {
                return Err(GridError::EvenPoints { axis, points: n });
            }
            let h = (max - min) / (n - 1) as f64;
            let k = -min / h;
            if k < -1e-9 || k > (n - 1) as f64 + 1e-9 || (k - k.round()).abs() > 1e-9 {
                return Err(GridError::OriginNotNode { axis });
            }
            axes.push(Axis { min, max, points: n, h });
        }
        Ok(Self { axes })
    }

    /// The square box `[−L, L]ʳ` with `n` points per axis.
    pub fn square(half_width: f64, n: usize, r: usize) -> Result<Self, GridError> {
        Self::new(&vec![(-half_width, half_width); r], &vec![n; r])
    }

    /// Same box with every spacing halved.
    pub fn refined(&self) -> Self {
        let extents: Vec<(f64, f64)> = self.axes.iter().map(|a| (a.min, a.max)).collect();
        let points: Vec<usize> = self.axes.iter().map(|a| 2 * a.points - 1).collect();
        Self::new(&extents, &points).expect("refinement of a valid grid is valid")
    }

    pub fn r(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &Axis {
        &self.axes[k]
    }

    pub fn h(&self, axis: usize) -> f64 {
        self.axes[axis].h
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.axes[axis + 1..].iter().map(|a| a.points).product()
    }

    pub fn coord(&self, axis: usize, k: usize) -> f64 {
        let a = &self.axes[axis];
        if k == a.points - 1 {
            a.max
        } else {
            a.min + k as f64 * a.h
        }
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.r()];
        for axis in (0..self.r()).rev() {
            let n = self.axes[axis].points;
            out[axis] = idx % n;
            idx /= n;
        }
        out
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.axes).fold(0, |acc, (&k, a)| acc * a.points + k)
    }

    /// Index of node `idx` along `axis`.
    pub fn axis_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.stride(axis)) % self.axes[axis].points
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx).iter().enumerate().map(|(a, &k)| self.coord(a, k)).collect()
    }

    pub fn origin_multi_index(&self) -> Vec<usize> {
        self.axes.iter().map(|a| (-a.min / a.h).round() as usize).collect()
    }

    pub fn origin_index(&self) -> usize {
        self.index(&self.origin_multi_index())
    }

    /// Indices in this (fine) grid of the nodes of `coarse`, when `self == coarse.refined()`.
    pub fn coarse_nodes_in_fine(&self, coarse: &Grid) -> Result<Vec<usize>, GridError> {
        if coarse.refined() != *self {
            return Err(GridError::GridMismatch);
        }
        Ok((0..coarse.len())
            .map(|i| {
                let m: Vec<usize> = coarse.multi_index(i).iter().map(|k| 2 * k).collect();
                self.index(&m)
            })
            .collect())
    }

    /// Whether node `idx` lies on the boundary of the box.
    pub fn on_boundary(&self, idx: usize) -> bool {
        self.multi_index(idx)
            .iter()
            .zip(&self.axes)
            .any(|(&k, a)| k == 0 || k + 1 == a.points)
    }
}

/// Values a finite-difference stencil can act on.
pub trait FieldValue: Clone + Send + Sync {
    fn zero_like(&self) -> Self;
    fn add_scaled(&mut self, w: f64, other: &Self);
}

impl FieldValue for f64 {
    fn zero_like(&self) -> Self {
        0.0
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        *self += w * other;
    }
}

impl FieldValue for Mat {
    fn zero_like(&self) -> Self {
        Mat::zeros(self.nrows(), self.ncols())
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        self.zip_apply(other, |a, b| *a += b * w);
    }
}

/// Five-point fourth-order first-derivative weights (to be divided by `12h`) at
/// position `k` of a line with `n` nodes. Returns the offset of the first node used.
pub fn fd_weights(k: usize, n: usize) -> (isize, [f64; 5]) {
    debug_assert!(n >= 5);
    if k == 0 {
        (0, [-25.0, 48.0, -36.0, 16.0, -3.0])
    } else if k == 1 {
        (-1, [-3.0, -10.0, 18.0, -6.0, 1.0])
    } else if k == n - 2 {
        (-3, [-1.0, 6.0, -18.0, 10.0, 3.0])
    } else if k == n - 1 {
        (-4, [3.0, -16.0, 36.0, -48.0, 25.0])
    } else {
        (-2, [1.0, -8.0, 0.0, 8.0, -1.0])
    }
}

/// Fourth-order derivative at position `k` of a line of `n` values `get(0..n)`.
pub fn derivative_at<'a, T: FieldValue + 'a>(get: impl Fn(usize) -> &'a T, k: usize, n: usize, h: f64) -> T {
    let (off, w) = fd_weights(k, n);
    let start = (k as isize + off) as usize;
    let mut out = get(k).zero_like();
    let s = 1.0 / (12.0 * h);
    for (q, wq) in w.iter().enumerate() {
        if *wq != 0.0 {
            out.add_scaled(wq * s, get(start + q));
        }
    }
    out
}

/// Derivative of a 1-D sequence with spacing `h`.
pub fn derivative_1d<T: FieldValue>(vals: &[T], h: f64) -> Vec<T> {
    let n = vals.len();
    (0..n).map(|k| derivative_at(|q| &vals[q], k, n, h)).collect()
}

/// Derivative along `axis` of a field stored in grid order.
pub fn derivative<T: FieldValue>(grid: &Grid, vals: &[T], axis: usize) -> Vec<T> {
    assert_eq!(vals.len(), grid.len());
    let stride = grid.stride(axis);
    let n = grid.axis(axis).points;
    let h = grid.h(axis);
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let k = (idx / stride) % n;
            let base = idx - k * stride;
            derivative_at(|q| &vals[base + q * stride], k, n, h)
        })
        .collect()
}

/// Cubic Lagrange interpolation on a line of nodes at fractional position `k + theta`.
/// Returns the first node used and the four weights.
pub fn cubic_weights(k: usize, theta: f64, n: usize) -> (usize, [f64; 4]) {
    let start = k.saturating_sub(1).min(n - 4);
    let u = (k - start) as f64 + theta;
    let mut w = [0.0; 4];
    for (m, wm) in w.iter_mut().enumerate() {
        let mut l = 1.0;
        for q in 0..4 {
            if q != m {
                l *= (u - q as f64) / (m as f64 - q as f64);
            }
        }
        *wm = l;
    }
    (start, w)
}

/// Composite Simpson weights (without the `h/3` factor) for an odd number of nodes.
pub fn simpson_weights(n: usize) -> Vec<f64> {
    assert!(n % 2 == 1 && n >= 3, "Simpson needs an odd node count");
    (0..n)
        .map(|k| {
            if k == 0 || k == n - 1 {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            }
        })
        .collect()
}

/// Tensor Simpson integral of a scalar field over the grid box, summed in node order.
pub fn integrate(grid: &Grid, vals: &[f64]) -> f64 {
    let w: Vec<Vec<f64>> = grid.axes().iter().map(|a| simpson_weights(a.points)).collect();
    let scale: f64 = grid.axes().iter().map(|a| a.h / 3.0).product();
    let mut acc = 0.0;
    for (idx, v) in vals.iter().enumerate() {
        let m = grid.multi_index(idx);
        let wt: f64 = m.iter().enumerate().map(|(a, &k)| w[a][k]).product();
        acc += wt * v;
    }
    acc * scale
}

/// Simpson integral of a sampled 1-D function.
pub fn integrate_1d(vals: &[f64], h: f64) -> f64 {
    let w = simpson_weights(vals.len());
    w.iter().zip(vals).map(|(a, b)| a * b).sum::<f64>() * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_validation() {
        assert!(matches!(Grid::square(1.0, 7, 2), Err(GridError::GridTooSmall { .. })));
        assert!(matches!(Grid::square(1.0, 10, 2), Err(GridError::EvenPoints { .. })));
        assert!(matches!(Grid::new(&[(0.1, 1.0)], &[9]), Err(GridError::OriginNotNode { .. })));
        let g = Grid::new(&[(-1.0, 3.0), (-2.0, 2.0)], &[9, 11]).unwrap();
        assert_eq!(g.origin_multi_index(), vec![2, 5]);
        assert_eq!(g.point(g.origin_index()), vec![0.0, 0.0]);
        assert_eq!(g.len(), 99);
        assert_eq!(g.multi_index(g.index(&[3, 7])), vec![3, 7]);
        assert_eq!(g.axis_index(g.index(&[3, 7]), 0), 3);
    }

    #[test]
    fn refinement_maps_coarse_nodes() {
        let g = Grid::square(1.0, 9, 2).unwrap();
        let f = g.refined();
        let map = f.coarse_nodes_in_fine(&g).unwrap();
        for (ci, fi) in map.iter().enumerate() {
            assert_eq!(g.point(ci), f.point(*fi));
        }
    }

    #[test]
    fn derivative_exact_on_quartics() {
        let g = Grid::new(&[(-1.0, 1.0), (-0.5, 1.5)], &[9, 13]).unwrap();
        let vals: Vec<f64> = (0..g.len())
            .map(|i| {
                let p = g.point(i);
                p[0].powi(4) - 2.0 * p[0] * p[1].powi(3) + p[1]
            })
            .collect();
        let d0 = derivative(&g, &vals, 0);
        let d1 = derivative(&g, &vals, 1);
        for i in 0..g.len() {
            let p = g.point(i);
            assert!((d0[i] - (4.0 * p[0].powi(3) - 2.0 * p[1].powi(3))).abs() < 1e-12);
            assert!((d1[i] - (-6.0 * p[0] * p[1].powi(2) + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_converges_at_fourth_order() {
        let err = |n: usize| {
            let h = 2.0 / (n - 1) as f64;
            let v: Vec<f64> = (0..n).map(|k| (-1.0 + k as f64 * h).sin() * 3.0).collect();
            derivative_1d(&v, h)
                .iter()
                .enumerate()
                .map(|(k, d)| (d - 3.0 * (-1.0 + k as f64 * h).cos()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(33) / err(65);
        assert!((12.8..=19.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn simpson_exact_on_cubics() {
        let g = Grid::square(1.0, 9, 2).unwrap();
        let vals: Vec<f64> = (0..g.len())
            .map(|i| {
                let p = g.point(i);
                p[0].powi(2) * p[1].powi(2) + p[0].powi(3)
            })
            .collect();
        assert!((integrate(&g, &vals) - 4.0 / 9.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn cubic_weights_reproduce_cubics(k in 0usize..12, theta in 0.0f64..1.0, c in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let n = 13;
            let k = k.min(n - 2);
            let p = |x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x;
            let (s, w) = cubic_weights(k, theta, n);
            let v: f64 = (0..4).map(|q| w[q] * p((s + q) as f64)).sum();
            prop_assert!((v - p(k as f64 + theta)).abs() < 1e-10);
            prop_assert!(s + 3 < n);
        }
    }
}

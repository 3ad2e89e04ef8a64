//! The `Q`-recursion, conservation-law forms, flows, the flux identity and conserved
//! integrals.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::algebra::{centralizer, orth_complement, AlgebraError, Subspace, SymmetricPair, TOL_RANK};
use crate::dressing::{self, DressedGrid, DressingError, FlowTerm, RealityLoop, MAX_DEPTH};
use crate::grid::{self, derivative, Grid, GridError};
use crate::lax::{self, GridField, LaxError};
use crate::linalg::{self, commutator, fnorm, Mat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConservationError {
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("ad(a₁) is not invertible on the complement of its kernel")]
    NonRegularBasis,
    #[error("the kernel of ad(a₁) in 𝒰 is not abelian; the edge integration needs it to be")]
    NonAbelianKernel,
    #[error("the invariants of c do not determine the kernel of ad(a₁)")]
    UnderdeterminedKernel,
    #[error("conservation forms are implemented for r = 2 and r = 3, not r = {0}")]
    UnsupportedRank(usize),
    #[error("expansion depth {requested} exceeds the bound {max}")]
    DepthOverflow { requested: usize, max: usize },
    #[error("at least five time slices are needed, got {0}")]
    TooFewSlices(usize),
    #[error(transparent)]
    Dressing(#[from] DressingError),
    #[error(transparent)]
    Lax(#[from] LaxError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

impl From<GridError> for ConservationError {
    fn from(_: GridError) -> Self {
        ConservationError::GridMismatch
    }
}

/// Grid fields `Q_{c,0} … Q_{c,N}`; `levels[n][node]`.
#[derive(Clone, Debug)]
pub struct QSequence {
    pub grid: Grid,
    pub c: Mat,
    pub levels: Vec<Vec<Mat>>,
}

impl QSequence {
    /// Exact coefficients from the factorizations on a dressed grid.
    pub fn expand(dressed: &DressedGrid, c: &Mat, depth: usize) -> Result<Self, ConservationError> {
        Ok(Self { grid: dressed.grid.clone(), c: c.clone(), levels: dressed.q_fields(c, depth)? })
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    /// The density `(Q_{c,n}, a_i)` per node.
    pub fn density(&self, n: usize, a: &Mat, pair: &SymmetricPair) -> Vec<f64> {
        self.levels[n].par_iter().map(|q| pair.inner(q, a)).collect()
    }

    /// Largest `‖σQ_n − (−1)^{n+1} Q_n‖` over all levels and nodes (`Q_0 = c ∈ 𝒰₁`).
    pub fn parity_residual(&self, pair: &SymmetricPair) -> f64 {
        self.levels
            .iter()
            .enumerate()
            .map(|(n, lvl)| {
                let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
                lvl.par_iter()
                    .map(|q| linalg::dist(&pair.sigma().apply(q), &(q * Complex64::new(sign, 0.0))))
                    .reduce(|| 0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// Per-level residuals of `(Q_n)_{x_i} + [[a_i, v], Q_n] = [Q_{n+1}, a_i]`.
#[derive(Clone, Debug)]
pub struct RecursionReport {
    /// `per_level[n][node]`: maximum over the axes.
    pub per_level: Vec<Vec<f64>>,
    pub max_per_level: Vec<f64>,
}

pub fn q_recursion_residual(v: &GridField, q: &QSequence, pair: &SymmetricPair) -> Result<RecursionReport, ConservationError> {
    if v.grid != q.grid {
        return Err(ConservationError::GridMismatch);
    }
    let g = &v.grid;
    let a = pair.a();
    let mut per_level = Vec::new();
    for n in 0..q.depth() {
        let mut worst = vec![0.0f64; g.len()];
        for (i, ai) in a.iter().enumerate().take(g.r()) {
            let dq = derivative(g, &q.levels[n], i);
            let res: Vec<f64> = (0..g.len())
                .into_par_iter()
                .map(|k| {
                    let av = commutator(ai, &v.values[k]);
                    let lhs = &dq[k] + commutator(&av, &q.levels[n][k]);
                    linalg::dist(&lhs, &commutator(&q.levels[n + 1][k], ai))
                })
                .collect();
            for (w, r) in worst.iter_mut().zip(res) {
                *w = w.max(r);
            }
        }
        per_level.push(worst);
    }
    let max_per_level = per_level.iter().map(|l| l.iter().cloned().fold(0.0, f64::max)).collect();
    Ok(RecursionReport { per_level, max_per_level })
}

/// `ad(a₁)` on `𝒰`, split into its kernel `K` and range `R = K⊥`, with the inverse on `R`.
#[derive(Clone, Debug)]
pub struct RecursionOperator {
    a1: Mat,
    kernel: Vec<Mat>,
    range: Vec<Mat>,
    gram_inv: DMatrix<f64>,
    form_scale: f64,
    ad_inv: DMatrix<f64>,
}

impl RecursionOperator {
    pub fn new(pair: &SymmetricPair) -> Result<Self, ConservationError> {
        let a1 = pair.a()[0].clone();
        let u = pair.u_space();
        let kernel = centralizer(&a1, &u);
        for x in kernel.basis() {
            for y in kernel.basis() {
                if fnorm(&commutator(x, y)) > 1e-10 {
                    return Err(ConservationError::NonAbelianKernel);
                }
            }
        }
        let range = orth_complement(&kernel, &u)?;
        let full = Subspace::new(
            kernel.basis().iter().chain(range.basis()).cloned().collect(),
            pair.form_normalization(),
        );
        let gram = full.gram();
        let gram_inv = gram.try_inverse().ok_or(ConservationError::NonRegularBasis)?;
        let mut op = Self {
            a1,
            kernel: kernel.basis().to_vec(),
            range: range.basis().to_vec(),
            gram_inv,
            form_scale: pair.form_normalization(),
            ad_inv: DMatrix::zeros(0, 0),
        };
        let dr = op.range.len();
        let kd = op.kernel.len();
        let mut m = DMatrix::<f64>::zeros(dr, dr);
        for (j, b) in op.range.iter().enumerate() {
            let coords = op.coords(&commutator(&op.a1, b));
            for i in 0..dr {
                m[(i, j)] = coords[kd + i];
            }
        }
        let (smin, smax) = if dr > 0 { linalg::singular_extremes(&m) } else { (1.0, 1.0) };
        if smin <= TOL_RANK * smax {
            return Err(ConservationError::NonRegularBasis);
        }
        op.ad_inv = m.try_inverse().ok_or(ConservationError::NonRegularBasis)?;
        Ok(op)
    }

    fn coords(&self, x: &Mat) -> DVector<f64> {
        let rhs = DVector::from_iterator(
            self.kernel.len() + self.range.len(),
            self.kernel.iter().chain(&self.range).map(|b| self.form_scale * re_trace_product(x, b)),
        );
        &self.gram_inv * rhs
    }

    /// Splits `x ∈ 𝒰` into its kernel and range parts.
    pub fn split(&self, x: &Mat) -> (Mat, Mat) {
        let coords = self.coords(x);
        let kd = self.kernel.len();
        (combine(&self.kernel, coords.rows(0, kd).iter()), combine(&self.range, coords.rows(kd, self.range.len()).iter()))
    }

    /// The `y ∈ R` with `[y, a₁]` equal to the range part of `x`.
    pub fn solve(&self, x: &Mat) -> Mat {
        let coords = self.coords(x);
        let xr = coords.rows(self.kernel.len(), self.range.len()).into_owned();
        // [y, a₁] = −ad(a₁) y
        let y = &self.ad_inv * xr * -1.0;
        combine(&self.range, y.iter())
    }

    pub fn a1(&self) -> &Mat {
        &self.a1
    }

    pub fn kernel_dim(&self) -> usize {
        self.kernel.len()
    }
}

fn re_trace_product(x: &Mat, y: &Mat) -> f64 {
    let n = x.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..n {
            acc += (x[(i, k)] * y[(k, i)]).re;
        }
    }
    acc
}

fn combine<'a>(basis: &[Mat], coeffs: impl Iterator<Item = &'a f64>) -> Mat {
    let mut out = linalg::zeros(basis.first().map_or(0, |b| b.nrows()));
    for (b, w) in basis.iter().zip(coeffs) {
        out += b * Complex64::new(*w, 0.0);
    }
    out
}

/// Fixes the kernel part of `Q_{c,n+1}` from the constancy of `tr Q(λ)^k`, `k = 2 … size`:
/// the `λ^{−(n+1)}` coefficient gives `k·tr(c^{k−1} Q_{n+1})` in terms of lower levels.
#[derive(Clone, Debug)]
struct InvariantClosure {
    powers: Vec<Mat>,
    pinv: DMatrix<f64>,
}

impl InvariantClosure {
    fn new(op: &RecursionOperator, c: &Mat) -> Result<Self, ConservationError> {
        let size = c.nrows();
        let mut powers = vec![c.clone()];
        for k in 1..size.saturating_sub(1) {
            powers.push(&powers[k - 1] * c);
        }
        let kd = op.kernel.len();
        let mut m = DMatrix::<f64>::zeros(2 * powers.len(), kd);
        for (k, pk) in powers.iter().enumerate() {
            for (l, b) in op.kernel.iter().enumerate() {
                let t = (pk * b).trace();
                m[(2 * k, l)] = t.re;
                m[(2 * k + 1, l)] = t.im;
            }
        }
        if kd > 0 {
            let (smin, smax) = linalg::singular_extremes(&m);
            if m.nrows() < kd || smin <= TOL_RANK * smax {
                return Err(ConservationError::UnderdeterminedKernel);
            }
        }
        let mt = m.transpose();
        let pinv = (&mt * &m).try_inverse().ok_or(ConservationError::UnderdeterminedKernel)? * mt;
        Ok(Self { powers, pinv })
    }

    /// `lower` holds `Q_0 … Q_n` at one node; `range_part` is the already known range part
    /// of `Q_{n+1}`.
    fn kernel_part(&self, op: &RecursionOperator, lower: &[Mat], range_part: &Mat) -> Mat {
        let order = lower.len();
        let size = range_part.nrows();
        let base: Vec<Mat> = lower.iter().cloned().chain(std::iter::once(linalg::zeros(size))).collect();
        let mut series = base.clone();
        let mut rhs = DVector::<f64>::zeros(2 * self.powers.len());
        for (k, pk) in self.powers.iter().enumerate() {
            let exponent = k + 2;
            // series = base^exponent, truncated at λ^{−order}
            series = (0..=order)
                .map(|d| {
                    let mut acc = linalg::zeros(size);
                    for e in 0..=d {
                        acc += &series[e] * &base[d - e];
                    }
                    acc
                })
                .collect();
            let rest = series[order].trace();
            let target = -rest / exponent as f64 - (pk * range_part).trace();
            rhs[2 * k] = target.re;
            rhs[2 * k + 1] = target.im;
        }
        let coeffs = &self.pinv * rhs;
        combine(&op.kernel, coeffs.iter())
    }
}

/// Cumulative fourth-order integral of samples along a line, starting from zero at
/// index 0.
pub fn cumulative_integral<T: grid::FieldValue>(vals: &[T], h: f64) -> Vec<T> {
    let n = vals.len();
    assert!(n >= 4, "need at least four samples");
    let mut out = Vec::with_capacity(n);
    let mut acc = vals[0].zero_like();
    out.push(acc.clone());
    let s = h / 24.0;
    for k in 0..n - 1 {
        let (start, w): (usize, [f64; 4]) = if k == 0 {
            (0, [9.0, 19.0, -5.0, 1.0])
        } else if k == n - 2 {
            (n - 4, [1.0, -5.0, 19.0, 9.0])
        } else {
            (k - 1, [-1.0, 13.0, 13.0, -1.0])
        };
        for (q, wq) in w.iter().enumerate() {
            acc.add_scaled(wq * s, &vals[start + q]);
        }
        out.push(acc.clone());
    }
    out
}

/// Result of [`q_generate`].
#[derive(Clone, Debug)]
pub struct GeneratedQ {
    pub q: QSequence,
    /// `solvability[n]`: largest kernel component of the axis-1 recursion source at level `n`.
    pub solvability: Vec<f64>,
}

/// How [`q_generate`] fixes the part of each level that lies in the kernel of `ad(a₁)`.
#[derive(Clone, Copy, Debug)]
pub enum KernelClosure<'a> {
    /// Integrate `(Q^K_{n+1})_{x₁} = −P_K[[a₁, v], Q^R_{n+1}]` along `x₁` from the left
    /// edge, with edge values taken from the given sequence or zero.
    EdgeIntegration(Option<&'a QSequence>),
    /// Solve `tr(c^{k−1} Q_{n+1}) = ` (lower-level terms) node by node, from the constancy
    /// of `tr Q(λ)^k`. Needs the powers of `c` to separate the kernel.
    Invariants,
}

/// Generates `Q_{c,0} … Q_{c,N}` from `v` by inverting `ad(a₁)` level by level; the kernel
/// part of each level comes from `closure`.
pub fn q_generate(
    v: &GridField,
    c: &Mat,
    depth: usize,
    pair: &SymmetricPair,
    closure: KernelClosure<'_>,
) -> Result<GeneratedQ, ConservationError> {
    if depth > MAX_DEPTH {
        return Err(ConservationError::DepthOverflow { requested: depth, max: MAX_DEPTH });
    }
    if let KernelClosure::EdgeIntegration(Some(e)) = closure {
        if e.grid != v.grid || e.depth() < depth {
            return Err(ConservationError::GridMismatch);
        }
    }
    let op = RecursionOperator::new(pair)?;
    let invariants = match closure {
        KernelClosure::Invariants => Some(InvariantClosure::new(&op, c)?),
        KernelClosure::EdgeIntegration(_) => None,
    };
    let g = &v.grid;
    let stride = g.stride(0);
    let npts = g.axis(0).points;
    let h = g.h(0);
    let av: Vec<Mat> = v.values.par_iter().map(|x| commutator(op.a1(), x)).collect();
    let mut levels = vec![vec![c.clone(); g.len()]];
    let mut solvability = Vec::new();
    for n in 0..depth {
        let prev = &levels[n];
        let dq = derivative(g, prev, 0);
        let parts: Vec<(f64, Mat)> = (0..g.len())
            .into_par_iter()
            .map(|k| {
                let src = &dq[k] + commutator(&av[k], &prev[k]);
                let (kern, _) = op.split(&src);
                (fnorm(&kern), op.solve(&src))
            })
            .collect();
        solvability.push(parts.iter().map(|(s, _)| *s).fold(0.0, f64::max));
        let mut next: Vec<Mat> = parts.into_iter().map(|(_, r)| r).collect();
        match (&invariants, closure) {
            (Some(inv), _) => {
                let lv = &levels;
                next = next
                    .into_par_iter()
                    .enumerate()
                    .map(|(k, qr)| {
                        let lower: Vec<Mat> = lv.iter().map(|l| l[k].clone()).collect();
                        let qk = inv.kernel_part(&op, &lower, &qr);
                        qr + qk
                    })
                    .collect();
            }
            (None, KernelClosure::EdgeIntegration(edge)) => {
                // (Q^K)_{x₁} = −P_K [[a₁, v], Q^R]
                let rate: Vec<Mat> = (0..g.len())
                    .into_par_iter()
                    .map(|k| -op.split(&commutator(&av[k], &next[k])).0)
                    .collect();
                let line_starts: Vec<usize> = (0..g.len()).filter(|&i| g.axis_index(i, 0) == 0).collect();
                for start in line_starts {
                    let line: Vec<Mat> = (0..npts).map(|q| rate[start + q * stride].clone()).collect();
                    let integral = cumulative_integral(&line, h);
                    let base = match edge {
                        Some(e) => op.split(&e.levels[n + 1][start]).0,
                        None => linalg::zeros(c.nrows()),
                    };
                    for (q, val) in integral.iter().enumerate() {
                        next[start + q * stride] += &base + val;
                    }
                }
            }
            (None, KernelClosure::Invariants) => unreachable!("closure constructed above"),
        }
        levels.push(next);
    }
    Ok(GeneratedQ { q: QSequence { grid: g.clone(), c: c.clone(), levels }, solvability })
}

/// `∂_j (Q_{c,n}, a_i) − ∂_i (Q_{c,n}, a_j)` for every pair `i < j`; per-node maximum.
pub fn closedness_residual(q: &QSequence, n: usize, pair: &SymmetricPair) -> Result<Vec<f64>, ConservationError> {
    let g = &q.grid;
    let phi: Vec<Vec<f64>> = pair.a().iter().take(g.r()).map(|a| q.density(n, a, pair)).collect();
    let mut out = vec![0.0f64; g.len()];
    for i in 0..g.r() {
        for j in (i + 1)..g.r() {
            let dj_phi_i = derivative(g, &phi[i], j);
            let di_phi_j = derivative(g, &phi[j], i);
            for k in 0..g.len() {
                out[k] = out[k].max((dj_phi_i[k] - di_phi_j[k]).abs());
            }
        }
    }
    Ok(out)
}

/// The `(r−1)`-form `ψ^{ij}_{c,n} = φ_{c,n} ∧ *(dx_i ∧ dx_j)` with its exterior-derivative
/// residual.
#[derive(Clone, Debug)]
pub struct ConservationForm {
    pub r: usize,
    /// Component fields; for `r = 2` these are `φ_1, φ_2`, for `r = 3` the coefficients of
    /// `dx_l ∧ dx_k` listed as `(l, k, field)`.
    pub components: Vec<(usize, usize, Vec<f64>)>,
    /// Per-node `|dψ|`.
    pub d_residual: Vec<f64>,
}

pub fn eds_conservation_form(
    q: &QSequence,
    n: usize,
    i: usize,
    j: usize,
    pair: &SymmetricPair,
) -> Result<ConservationForm, ConservationError> {
    let g = &q.grid;
    let r = g.r();
    if !(2..=3).contains(&r) {
        return Err(ConservationError::UnsupportedRank(r));
    }
    let phi: Vec<Vec<f64>> = pair.a().iter().take(r).map(|a| q.density(n, a, pair)).collect();
    let d_of = |a: usize, b: usize| -> Vec<f64> {
        // ∂_a φ_b − ∂_b φ_a
        let x = derivative(g, &phi[b], a);
        let y = derivative(g, &phi[a], b);
        x.iter().zip(&y).map(|(p, q)| p - q).collect()
    };
    if r == 2 {
        let d = d_of(0, 1).iter().map(|x| x.abs()).collect();
        let comps = vec![(0, 0, phi[0].clone()), (1, 1, phi[1].clone())];
        return Ok(ConservationForm { r, components: comps, d_residual: d });
    }
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    if i == j || j >= 3 {
        return Err(ConservationError::UnsupportedRank(r));
    }
    let k = 3 - i - j;
    // *(dx_i ∧ dx_j) = ε_{ijk} dx_k
    let sign = if (i, j) == (0, 2) { -1.0 } else { 1.0 };
    let comps = vec![
        (i, k, phi[i].iter().map(|x| sign * x).collect()),
        (j, k, phi[j].iter().map(|x| sign * x).collect()),
    ];
    let d = d_of(i, j).iter().map(|x| x.abs()).collect();
    Ok(ConservationForm { r, components: comps, d_residual: d })
}

/// A time-sampled family of dressed solutions under the flow `b λ^j t`.
#[derive(Clone, Debug)]
pub struct FlowFamily {
    pub b: Mat,
    pub j: u32,
    pub times: Vec<f64>,
    pub h_t: f64,
    pub slices: Vec<DressedGrid>,
    pub v: Vec<GridField>,
}

impl FlowFamily {
    /// Dresses every time slice `t_m = t0 + m·h_t`, `m = 0 … samples − 1`.
    pub fn build(
        floop: &RealityLoop,
        pair: &SymmetricPair,
        grid: &Grid,
        b: &Mat,
        j: u32,
        t_range: (f64, f64),
        samples: usize,
    ) -> Result<Self, ConservationError> {
        if samples < 5 {
            return Err(ConservationError::TooFewSlices(samples));
        }
        let h_t = (t_range.1 - t_range.0) / (samples - 1) as f64;
        let times: Vec<f64> = (0..samples).map(|m| t_range.0 + m as f64 * h_t).collect();
        let mut slices = Vec::with_capacity(samples);
        let mut v = Vec::with_capacity(samples);
        for &t in &times {
            let d = dressing::dress_grid(floop, pair, grid, &[FlowTerm { b: b.clone(), j, t }])?;
            v.push(dressing::extract_solution(&d, pair)?);
            slices.push(d);
        }
        Ok(Self { b: b.clone(), j, times, h_t, slices, v })
    }

    pub fn grid(&self) -> &Grid {
        &self.slices[0].grid
    }

    fn t_derivative<T: grid::FieldValue>(&self, series: &[Vec<T>]) -> Vec<Vec<T>> {
        let m = series.len();
        (0..m)
            .map(|s| {
                (0..series[0].len())
                    .into_par_iter()
                    .map(|node| grid::derivative_at(|q| &series[q][node], s, m, self.h_t))
                    .collect()
            })
            .collect()
    }
}

/// Residuals of a flow family, indexed `[slice][node]`.
#[derive(Clone, Debug)]
pub struct FlowReport {
    pub residual: Vec<Vec<f64>>,
    pub max: f64,
    /// Largest `uu0_residual` over the slices.
    pub x_equation_max: f64,
}

/// `[a_i, v_t] − (Q_{b,k})_{x_i} − [[a_i, v], Q_{b,k}]` with `k = q_order` (normally `j`).
pub fn flow_residual_with_order(f: &FlowFamily, pair: &SymmetricPair, q_order: usize) -> Result<FlowReport, ConservationError> {
    let g = f.grid().clone();
    let vals: Vec<Vec<Mat>> = f.v.iter().map(|v| v.values.clone()).collect();
    let vt = f.t_derivative(&vals);
    let mut residual = Vec::with_capacity(f.slices.len());
    let mut x_eq = 0.0f64;
    for (s, slice) in f.slices.iter().enumerate() {
        let q = slice.q_fields(&f.b, q_order)?;
        let qb = &q[q_order];
        let mut worst = vec![0.0f64; g.len()];
        for (i, ai) in pair.a().iter().enumerate().take(g.r()) {
            let dq = derivative(&g, qb, i);
            for k in 0..g.len() {
                let v = &f.v[s].values[k];
                let lhs = commutator(ai, &vt[s][k]);
                let rhs = &dq[k] + commutator(&commutator(ai, v), &qb[k]);
                worst[k] = worst[k].max(linalg::dist(&lhs, &rhs));
            }
        }
        residual.push(worst);
        x_eq = x_eq.max(lax::uu0_residual(&f.v[s], pair)?.max);
    }
    let max = residual.iter().flatten().cloned().fold(0.0, f64::max);
    Ok(FlowReport { residual, max, x_equation_max: x_eq })
}

pub fn flow_residual(f: &FlowFamily, pair: &SymmetricPair) -> Result<FlowReport, ConservationError> {
    flow_residual_with_order(f, pair, f.j as usize)
}

/// The flux `Σ_{ℓ=0}^{j−1} Σ_{s=1}^{j−ℓ} (Q_{c,n+ℓ+s−1}, Q_{b,j−ℓ−s})` from the two
/// sequences at one node.
pub fn flux_density(qc: &[Mat], qb: &[Mat], n: usize, j: usize, pair: &SymmetricPair) -> f64 {
    let mut acc = 0.0;
    for l in 0..j {
        for s in 1..=(j - l) {
            acc += pair.inner(&qc[n + l + s - 1], &qb[j - l - s]);
        }
    }
    acc
}

/// `([Q_{c,n}, Q_{b,j}], a_i)` and `Σ_{s=1}^{j} (Q_{c,n+s−1}, Q_{b,j−s})` at every node;
/// the second is the potential whose `x_i`-derivative should equal the first.
pub fn stepping_identity_residual(
    qc: &QSequence,
    qb: &QSequence,
    n: usize,
    j: usize,
    i: usize,
    pair: &SymmetricPair,
) -> Result<Vec<f64>, ConservationError> {
    if qc.depth() < n + j || qb.depth() < j {
        return Err(ConservationError::DepthOverflow { requested: n + j, max: qc.depth() });
    }
    let g = &qc.grid;
    let ai = &pair.a()[i];
    let pot: Vec<f64> = (0..g.len())
        .map(|k| (1..=j).map(|s| pair.inner(&qc.levels[n + s - 1][k], &qb.levels[j - s][k])).sum())
        .collect();
    let dpot = derivative(g, &pot, i);
    Ok((0..g.len())
        .map(|k| {
            let lhs = pair.inner(&commutator(&qc.levels[n][k], &qb.levels[j][k]), ai);
            (lhs - dpot[k]).abs()
        })
        .collect())
}

/// Flux identity residuals `|∂_t(Q_{c,n}, a_i) − ∂_{x_i} flux|`, indexed `[slice][node]`.
#[derive(Clone, Debug)]
pub struct FluxReport {
    pub residual: Vec<Vec<f64>>,
    pub max: f64,
}

fn slice_sequences(
    f: &FlowFamily,
    c: &Mat,
    n: usize,
) -> Result<(Vec<Vec<Vec<Mat>>>, Vec<Vec<Vec<Mat>>>), ConservationError> {
    let j = f.j as usize;
    if n + j > MAX_DEPTH {
        return Err(ConservationError::DepthOverflow { requested: n + j, max: MAX_DEPTH });
    }
    let mut qcs = Vec::new();
    let mut qbs = Vec::new();
    for s in &f.slices {
        qcs.push(s.q_fields(c, n + j)?);
        qbs.push(s.q_fields(&f.b, j)?);
    }
    Ok((qcs, qbs))
}

fn node_levels(q: &[Vec<Mat>], node: usize) -> Vec<Mat> {
    q.iter().map(|lvl| lvl[node].clone()).collect()
}

pub fn flux_identity_residual(
    f: &FlowFamily,
    c: &Mat,
    n: usize,
    i: usize,
    pair: &SymmetricPair,
) -> Result<FluxReport, ConservationError> {
    let g = f.grid().clone();
    let j = f.j as usize;
    let (qcs, qbs) = slice_sequences(f, c, n)?;
    let ai = &pair.a()[i];
    let density: Vec<Vec<f64>> = qcs.iter().map(|q| q[n].iter().map(|x| pair.inner(x, ai)).collect()).collect();
    let dt = f.t_derivative(&density);
    let mut residual = Vec::new();
    for s in 0..f.slices.len() {
        let flux: Vec<f64> = (0..g.len())
            .map(|k| flux_density(&node_levels(&qcs[s], k), &node_levels(&qbs[s], k), n, j, pair))
            .collect();
        let dflux = derivative(&g, &flux, i);
        residual.push((0..g.len()).map(|k| (dt[s][k] - dflux[k]).abs()).collect());
    }
    let max = residual.iter().flatten().cloned().fold(0.0, f64::max);
    Ok(FluxReport { residual, max })
}

/// Conserved integral `∫ (Q_{c,n}, a_i) dx` per time slice with its drift and the
/// boundary-flux bound that limits how far a finite box can drift.
#[derive(Clone, Debug, Serialize)]
pub struct ConservedReport {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `max_t |I(t) − I(t₀)|`.
    pub drift: f64,
    /// `∫|density| dx` at `t₀`, the normalization for the relative quantities.
    pub scale: f64,
    pub relative_drift: f64,
    /// `∫_{t₀}^{t_M} ∫_{faces} |flux| dt`, the largest change boundary flux can cause.
    pub flux_bound: f64,
    pub relative_flux_bound: f64,
    /// `max_t |I(t) − I(t₀) − ∫_{t₀}^{t} (F(right face) − F(left face)) dt|`: the signed
    /// balance between the change of the integral and the flux through the faces.
    pub balance: f64,
    pub relative_balance: f64,
    /// Largest `|density|` on the boundary of the box.
    pub boundary_magnitude: f64,
}

pub fn conserved_quantity(
    f: &FlowFamily,
    c: &Mat,
    n: usize,
    i: usize,
    pair: &SymmetricPair,
) -> Result<ConservedReport, ConservationError> {
    let g = f.grid().clone();
    let j = f.j as usize;
    let (qcs, qbs) = slice_sequences(f, c, n)?;
    let ai = &pair.a()[i];
    let mut values = Vec::new();
    let mut face_abs = Vec::new();
    let mut face_net = Vec::new();
    let mut boundary_magnitude = 0.0f64;
    let mut scale = 0.0;
    for s in 0..f.slices.len() {
        let density: Vec<f64> = qcs[s][n].iter().map(|x| pair.inner(x, ai)).collect();
        values.push(grid::integrate(&g, &density));
        if s == 0 {
            scale = grid::integrate(&g, &density.iter().map(|x| x.abs()).collect::<Vec<_>>());
        }
        for k in 0..g.len() {
            if g.on_boundary(k) {
                boundary_magnitude = boundary_magnitude.max(density[k].abs());
            }
        }
        let flux: Vec<f64> = (0..g.len())
            .map(|k| flux_density(&node_levels(&qcs[s], k), &node_levels(&qbs[s], k), n, j, pair))
            .collect();
        let (lo, hi) = face_integrals(&g, &flux, i);
        face_abs.push(face_integrals(&g, &flux.iter().map(|x| x.abs()).collect::<Vec<_>>(), i));
        face_net.push(hi - lo);
    }
    let drift = values.iter().map(|v| (v - values[0]).abs()).fold(0.0, f64::max);
    let abs_sum: Vec<f64> = face_abs.iter().map(|(a, b)| a + b).collect();
    let flux_bound = grid::integrate_1d(&abs_sum, f.h_t);
    // d/dt ∫ρ = ∫ ∂_{x_i} F = F(right face) − F(left face)
    let transported = cumulative_integral(&face_net, f.h_t);
    let balance = values
        .iter()
        .zip(&transported)
        .map(|(v, t)| (v - values[0] - t).abs())
        .fold(0.0, f64::max);
    let norm = if scale > 0.0 { scale } else { 1.0 };
    Ok(ConservedReport {
        times: f.times.clone(),
        values,
        drift,
        scale,
        relative_drift: drift / norm,
        flux_bound,
        relative_flux_bound: flux_bound / norm,
        balance,
        relative_balance: balance / norm,
        boundary_magnitude,
    })
}

/// Integrals of `vals` over the faces `x_i = min` and `x_i = max` of the box.
fn face_integrals(g: &Grid, vals: &[f64], axis: usize) -> (f64, f64) {
    let others: Vec<usize> = (0..g.r()).filter(|&a| a != axis).collect();
    let npts = g.axis(axis).points;
    let w: Vec<Vec<f64>> = others.iter().map(|&a| grid::simpson_weights(g.axis(a).points)).collect();
    let sc: f64 = others.iter().map(|&a| g.h(a) / 3.0).product();
    let mut lo = 0.0;
    let mut hi = 0.0;
    for (k, v) in vals.iter().enumerate() {
        let m = g.multi_index(k);
        let wt: f64 = others.iter().zip(&w).map(|(&a, wa)| wa[m[a]]).product::<f64>() * sc;
        if m[axis] == 0 {
            lo += wt * v;
        } else if m[axis] == npts - 1 {
            hi += wt * v;
        }
    }
    (lo, hi)
}

/// Largest difference of `v` between applying two flows in either order, checked at
/// the given nodes.
pub fn commuting_flows_residual(
    floop: &RealityLoop,
    pair: &SymmetricPair,
    grid: &Grid,
    first: &FlowTerm,
    second: &FlowTerm,
) -> Result<f64, ConservationError> {
    let one = dressing::dress_grid(floop, pair, grid, &[first.clone(), second.clone()])?;
    let two = dressing::dress_grid(floop, pair, grid, &[second.clone(), first.clone()])?;
    let v1 = dressing::extract_solution(&one, pair)?;
    let v2 = dressing::extract_solution(&two, pair)?;
    Ok(v1.values.iter().zip(&v2.values).map(|(a, b)| linalg::dist(a, b)).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::builtin_pair;
    use crate::lax::ValueSpace;
    use crate::linalg::c;

    fn zero_v(g: &Grid) -> GridField {
        GridField::new(g.clone(), vec![linalg::zeros(3); g.len()], ValueSpace::U1PerpA)
    }

    #[test]
    fn vacuum_generation_is_trivial() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 9, 2).unwrap();
        let gen = q_generate(&zero_v(&g), &p.a()[0], 4, &p, KernelClosure::EdgeIntegration(None)).unwrap();
        assert!(gen.q.levels[1..].iter().flatten().all(|m| fnorm(m) < 1e-15));
        let rec = q_recursion_residual(&zero_v(&g), &gen.q, &p).unwrap();
        assert!(rec.max_per_level.iter().all(|&r| r < 1e-12));
        assert!(closedness_residual(&gen.q, 0, &p).unwrap().iter().all(|&r| r < 1e-12));
    }

    #[test]
    fn level_zero_identity_is_jacobi() {
        // [[a_i, v], c] − [[c, v], a_i] = 0 whenever [a_i, c] = 0
        let p = builtin_pair("sun_son", 3).unwrap();
        let w: Vec<Mat> = p.u1_perp_a().basis().to_vec();
        let v = &w[0] * c(0.3, 0.0) - &w[1] * c(1.2, 0.0) + &w[2] * c(0.7, 0.0);
        for ai in p.a() {
            for cc in p.a() {
                let r = commutator(&commutator(ai, &v), cc) - commutator(&commutator(cc, &v), ai);
                assert!(fnorm(&r) < 1e-14);
            }
        }
    }

    #[test]
    fn recursion_operator_splits_u() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let op = RecursionOperator::new(&p).unwrap();
        assert_eq!(op.kernel.len(), 2);
        assert_eq!(op.range.len(), 6);
        let x = &p.u0().basis()[1] + &p.a()[1];
        let (k, r) = op.split(&x);
        assert!(linalg::dist(&k, &p.a()[1]) < 1e-14);
        let y = op.solve(&r);
        assert!(linalg::dist(&commutator(&y, op.a1()), &r) < 1e-13);
    }

    #[test]
    fn cumulative_integral_is_fourth_order() {
        let err = |n: usize| {
            let h = 2.0 / (n - 1) as f64;
            let f: Vec<f64> = (0..n).map(|k| (k as f64 * h).exp()).collect();
            cumulative_integral(&f, h)
                .iter()
                .enumerate()
                .map(|(k, v)| (v - ((k as f64 * h).exp() - 1.0)).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(17) / err(33);
        assert!((12.8..=19.2).contains(&ratio), "{ratio}");
        let cubic: Vec<f64> = (0..9).map(|k| (k as f64 * 0.25).powi(3)).collect();
        let ci = cumulative_integral(&cubic, 0.25);
        assert!((ci[8] - 2.0f64.powi(4) / 4.0).abs() < 1e-13);
    }

    #[test]
    fn conservation_form_ranks() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 9, 2).unwrap();
        let q = QSequence { grid: g.clone(), c: p.a()[0].clone(), levels: vec![vec![p.a()[0].clone(); g.len()]] };
        let form = eds_conservation_form(&q, 0, 0, 1, &p).unwrap();
        assert_eq!(form.components.len(), 2);
        assert!(form.d_residual.iter().all(|&r| r < 1e-12));
        let p4 = builtin_pair("sun_son", 5).unwrap();
        let g4 = Grid::square(1.0, 9, 4).unwrap();
        let q4 = QSequence { grid: g4.clone(), c: p4.a()[0].clone(), levels: vec![vec![p4.a()[0].clone(); g4.len()]] };
        assert!(matches!(eds_conservation_form(&q4, 0, 0, 1, &p4), Err(ConservationError::UnsupportedRank(4))));
    }

    #[test]
    fn rank_three_form_matches_closedness() {
        let p = builtin_pair("sun_son", 4).unwrap();
        let g = Grid::square(1.0, 9, 3).unwrap();
        // a non-closed synthetic density: Q = x₂ a₁-direction weight
        let levels = vec![(0..g.len())
            .map(|k| {
                let x = g.point(k);
                &p.a()[0] * c(x[1] * x[2], 0.0) + &p.a()[2] * c(x[0], 0.0)
            })
            .collect()];
        let q = QSequence { grid: g.clone(), c: p.a()[0].clone(), levels };
        let form = eds_conservation_form(&q, 0, 0, 1, &p).unwrap();
        let closed = closedness_residual(&q, 0, &p).unwrap();
        assert_eq!(form.components.len(), 2);
        assert!(form.d_residual.iter().zip(&closed).all(|(a, b)| a <= &(b + 1e-12)));
        assert!(form.d_residual.iter().cloned().fold(0.0, f64::max) > 0.1);
    }
}

//! Connection fields on grids, curvature and residual checks, parallel frames and the
//! geometric objects built from them.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::algebra::SymmetricPair;
use crate::grid::{self, cubic_weights, Grid, GridError};
use crate::linalg::{self, commutator, fnorm, Mat};

/// Per-node membership tolerance for tagged fields.
pub const TOL_SPACE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LaxError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("expected a field with values in {expected:?}, got {found:?}")]
    WrongValueSpace { expected: ValueSpace, found: ValueSpace },
    #[error("grid dimension {grid} does not match pair rank {rank}")]
    RankMismatch { grid: usize, rank: usize },
    #[error("step at node {node} needs more than {max_substeps} substeps (exponent norm {arg:.3e})")]
    StepRejected { node: usize, arg: f64, max_substeps: usize },
    #[error("frame is singular at node {node}")]
    SingularFrame { node: usize },
    #[error("evaluation failed: {0}")]
    EvaluationFailure(String),
}

/// Which space the per-node values of a field are declared to lie in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ValueSpace {
    U,
    U0,
    U1,
    U1PerpA,
    Group,
    General,
}

/// Matrix values on every node of a grid.
#[derive(Clone, Debug)]
pub struct GridField {
    pub grid: Grid,
    pub values: Vec<Mat>,
    pub space: ValueSpace,
}

impl GridField {
    pub fn new(grid: Grid, values: Vec<Mat>, space: ValueSpace) -> Self {
        assert_eq!(grid.len(), values.len(), "one value per node");
        Self { grid, values, space }
    }

    pub fn from_fn(grid: &Grid, space: ValueSpace, f: impl Fn(&[f64]) -> Mat + Sync) -> Self {
        let values = (0..grid.len()).into_par_iter().map(|i| f(&grid.point(i))).collect();
        Self::new(grid.clone(), values, space)
    }

    pub fn derivative(&self, axis: usize) -> Vec<Mat> {
        grid::derivative(&self.grid, &self.values, axis)
    }

    /// Largest per-node violation of the declared value space, with its node.
    pub fn membership_residual(&self, pair: &SymmetricPair) -> (f64, usize) {
        let res: Vec<f64> = self
            .values
            .par_iter()
            .map(|x| membership(x, self.space, pair))
            .collect();
        argmax(&res)
    }
}

fn membership(x: &Mat, space: ValueSpace, pair: &SymmetricPair) -> f64 {
    let scale = fnorm(x).max(1.0);
    let r = match space {
        ValueSpace::U => linalg::dist(&pair.tau().apply(x), x) + x.trace().norm(),
        ValueSpace::U0 => pair.u0_residual(x) + x.trace().norm(),
        ValueSpace::U1 => pair.u1_residual(x) + x.trace().norm(),
        ValueSpace::U1PerpA => {
            pair.u1_residual(x)
                + x.trace().norm()
                + pair.a().iter().map(|a| pair.inner(x, a).abs()).sum::<f64>()
        }
        ValueSpace::Group => (x.determinant() - Complex64::new(1.0, 0.0)).norm(),
        ValueSpace::General => 0.0,
    };
    r / scale
}

/// Maximum of a slice and the first index where it is attained.
pub fn argmax(vals: &[f64]) -> (f64, usize) {
    let mut best = (0.0f64, 0usize);
    for (i, &v) in vals.iter().enumerate() {
        if v > best.0 || v.is_nan() {
            best = (v, i);
            if v.is_nan() {
                break;
            }
        }
    }
    best
}

/// Per-node Frobenius norms of a matrix field.
pub fn node_norms(vals: &[Mat]) -> Vec<f64> {
    vals.par_iter().map(fnorm).collect()
}

/// How the coefficients of a connection depend on the spectral parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum LambdaStructure {
    Constant,
    /// Evaluated at the stored λ from an affine family.
    Affine { re: f64, im: f64 },
    /// Evaluated at the stored λ from a polynomial family.
    Polynomial { re: f64, im: f64 },
}

/// A connection `Σ A_i dx_i` sampled on a grid; `coeffs[i]` holds `A_i` per node.
#[derive(Clone, Debug)]
pub struct ConnectionField {
    pub grid: Grid,
    pub coeffs: Vec<Vec<Mat>>,
    pub space: ValueSpace,
    pub structure: LambdaStructure,
}

impl ConnectionField {
    pub fn new(grid: Grid, coeffs: Vec<Vec<Mat>>, space: ValueSpace, structure: LambdaStructure) -> Self {
        assert_eq!(coeffs.len(), grid.r(), "one coefficient field per axis");
        assert!(coeffs.iter().all(|c| c.len() == grid.len()));
        Self { grid, coeffs, space, structure }
    }

    /// The constant connection `Σ c_i dx_i`.
    pub fn constant(grid: &Grid, consts: &[Mat]) -> Self {
        let coeffs = consts.iter().map(|c| vec![c.clone(); grid.len()]).collect();
        Self::new(grid.clone(), coeffs, ValueSpace::General, LambdaStructure::Constant)
    }
}

/// Per-pair residual fields `R_ij`, `i < j`.
#[derive(Clone, Debug)]
pub struct PairResiduals {
    pub pairs: Vec<(usize, usize)>,
    pub fields: Vec<Vec<Mat>>,
    pub max: f64,
    pub argmax: usize,
}

impl PairResiduals {
    fn from_fields(pairs: Vec<(usize, usize)>, fields: Vec<Vec<Mat>>) -> Self {
        let mut s = Self { pairs, fields, max: 0.0, argmax: 0 };
        let (m, i) = argmax(&s.node_norms());
        s.max = m;
        s.argmax = i;
        s
    }

    /// Per-node maximum over all pairs.
    pub fn node_norms(&self) -> Vec<f64> {
        let n = self.fields.first().map(|f| f.len()).unwrap_or(0);
        (0..n)
            .map(|k| self.fields.iter().map(|f| fnorm(&f[k])).fold(0.0, f64::max))
            .collect()
    }
}

fn index_pairs(r: usize) -> Vec<(usize, usize)> {
    (0..r).flat_map(|i| ((i + 1)..r).map(move |j| (i, j))).collect()
}

/// Curvature `F_ij = ∂_i A_j − ∂_j A_i + [A_i, A_j]`.
pub fn curvature(c: &ConnectionField) -> Result<PairResiduals, LaxError> {
    let g = &c.grid;
    let derivs: Vec<Vec<Vec<Mat>>> = (0..g.r())
        .map(|j| (0..g.r()).map(|i| grid::derivative(g, &c.coeffs[j], i)).collect())
        .collect();
    let pairs = index_pairs(g.r());
    let fields = pairs
        .iter()
        .map(|&(i, j)| {
            (0..g.len())
                .into_par_iter()
                .map(|k| &derivs[j][i][k] - &derivs[i][j][k] + commutator(&c.coeffs[i][k], &c.coeffs[j][k]))
                .collect()
        })
        .collect();
    Ok(PairResiduals::from_fields(pairs, fields))
}

fn check_v(v: &GridField, pair: &SymmetricPair) -> Result<(), LaxError> {
    if v.space != ValueSpace::U1PerpA {
        return Err(LaxError::WrongValueSpace { expected: ValueSpace::U1PerpA, found: v.space });
    }
    if v.grid.r() != pair.rank() {
        return Err(LaxError::RankMismatch { grid: v.grid.r(), rank: pair.rank() });
    }
    Ok(())
}

/// Residual of the system `[a_i, v_{x_j}] − [a_j, v_{x_i}] = [[a_i, v], [a_j, v]]`.
pub fn uu0_residual(v: &GridField, pair: &SymmetricPair) -> Result<PairResiduals, LaxError> {
    check_v(v, pair)?;
    let dv: Vec<Vec<Mat>> = (0..v.grid.r()).map(|i| v.derivative(i)).collect();
    let a = pair.a();
    let pairs = index_pairs(v.grid.r());
    let fields = pairs
        .iter()
        .map(|&(i, j)| {
            (0..v.grid.len())
                .into_par_iter()
                .map(|k| {
                    let x = &v.values[k];
                    commutator(&a[i], &dv[j][k]) - commutator(&a[j], &dv[i][k])
                        - commutator(&commutator(&a[i], x), &commutator(&a[j], x))
                })
                .collect()
        })
        .collect();
    Ok(PairResiduals::from_fields(pairs, fields))
}

/// The Lax connection `θ_λ = Σ (a_i λ + [a_i, v]) dx_i`.
pub fn lax_theta(v: &GridField, lambda: Complex64, pair: &SymmetricPair) -> Result<ConnectionField, LaxError> {
    check_v(v, pair)?;
    let coeffs = pair
        .a()
        .iter()
        .map(|a| {
            let al = a * lambda;
            v.values.par_iter().map(|x| &al + commutator(a, x)).collect()
        })
        .collect();
    Ok(ConnectionField::new(
        v.grid.clone(),
        coeffs,
        ValueSpace::General,
        LambdaStructure::Affine { re: lambda.re, im: lambda.im },
    ))
}

/// `ω_λ = Σ λ A_i dx_i` for a `𝒰₁`-valued connection `A`.
pub fn curvedflat_omega(a: &ConnectionField, lambda: Complex64) -> Result<ConnectionField, LaxError> {
    if a.space != ValueSpace::U1 {
        return Err(LaxError::WrongValueSpace { expected: ValueSpace::U1, found: a.space });
    }
    let coeffs = a.coeffs.iter().map(|c| c.iter().map(|m| m * lambda).collect()).collect();
    Ok(ConnectionField::new(
        a.grid.clone(),
        coeffs,
        ValueSpace::General,
        LambdaStructure::Affine { re: lambda.re, im: lambda.im },
    ))
}

/// Whether the reality identities are checked with the algebra or the group action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvolutionLevel {
    Algebra,
    Group,
}

/// Largest violation of `τ(F(λ̄)) = F(λ)` and `σ(F(−λ)) = F(λ)` over the samples.
/// The evaluator returns a list of matrices (one per node, or a single value).
pub fn reality_residual<F>(
    eval: F,
    samples: &[Complex64],
    pair: &SymmetricPair,
    level: InvolutionLevel,
) -> Result<f64, LaxError>
where
    F: Fn(Complex64) -> Result<Vec<Mat>, String>,
{
    let apply = |inv: &crate::algebra::InvolutionSpec, x: &Mat| -> Result<Mat, LaxError> {
        match level {
            InvolutionLevel::Algebra => Ok(inv.apply(x)),
            InvolutionLevel::Group => inv
                .apply_group(x)
                .ok_or_else(|| LaxError::EvaluationFailure("singular group value".into())),
        }
    };
    let mut worst = 0.0f64;
    for &lam in samples {
        let base = eval(lam).map_err(LaxError::EvaluationFailure)?;
        let at_conj = eval(lam.conj()).map_err(LaxError::EvaluationFailure)?;
        let at_neg = eval(-lam).map_err(LaxError::EvaluationFailure)?;
        for k in 0..base.len() {
            let s = fnorm(&base[k]).max(1.0);
            let t = linalg::dist(&apply(pair.tau(), &at_conj[k])?, &base[k]) / s;
            let u = linalg::dist(&apply(pair.sigma(), &at_neg[k])?, &base[k]) / s;
            worst = worst.max(t).max(u);
            if t.is_nan() || u.is_nan() {
                return Ok(f64::NAN);
            }
        }
    }
    Ok(worst)
}

/// Step-size control for frame integration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrameOptions {
    /// Largest allowed Frobenius norm of one exponent argument.
    pub max_step_arg: f64,
    /// Largest number of substeps per grid interval.
    pub max_substeps: usize,
}

impl Default for FrameOptions {
    fn default() -> Self {
        Self { max_step_arg: 1.0, max_substeps: 64 }
    }
}

/// The parallel frame `E(x, λ)` with `E(0, λ) = I` and its diagnostics.
#[derive(Clone, Debug)]
pub struct FrameField {
    pub grid: Grid,
    pub lambda: Complex64,
    pub values: Vec<Mat>,
    /// `max ‖E⁻¹ ∂_i E − A_i‖` with finite-difference derivatives.
    pub log_derivative_residual: f64,
    /// `max ‖E_A − E_B‖` between the two axis orderings of the staircase paths.
    pub path_independence_residual: f64,
    pub max_substeps_used: usize,
}

const C1: f64 = 0.5 - 0.288_675_134_594_812_9; // 1/2 − √3/6
const C2: f64 = 0.5 + 0.288_675_134_594_812_9;
const ALPHA_SMALL: f64 = 0.25 - 0.288_675_134_594_812_9; // 1/4 − √3/6
const ALPHA_LARGE: f64 = 0.25 + 0.288_675_134_594_812_9;

fn interp_line(line: &[&Mat], pos: f64) -> Mat {
    let n = line.len();
    let k = (pos.floor().max(0.0) as usize).min(n - 2);
    let (s, w) = cubic_weights(k, pos - k as f64, n);
    let mut out = line[s] * Complex64::new(w[0], 0.0);
    for q in 1..4 {
        out += line[s + q] * Complex64::new(w[q], 0.0);
    }
    out
}

/// Propagator over `[pos0, pos0 + dir]` in index units, right-multiplied
/// commutator-free fourth-order exponential steps.
fn interval_propagator(
    line: &[&Mat],
    pos0: f64,
    dir: f64,
    h: f64,
    opts: &FrameOptions,
    node: usize,
) -> Result<(Mat, usize), LaxError> {
    let n = line[0].nrows();
    let mut sub = 1usize;
    loop {
        let hs = dir * h / sub as f64;
        let mut phi = linalg::identity(n);
        let mut too_big = None;
        for q in 0..sub {
            let p = pos0 + dir * q as f64 / sub as f64;
            let a1 = interp_line(line, p + dir * C1 / sub as f64);
            let a2 = interp_line(line, p + dir * C2 / sub as f64);
            let x1 = &a1 * Complex64::new(ALPHA_LARGE * hs, 0.0) + &a2 * Complex64::new(ALPHA_SMALL * hs, 0.0);
            let x2 = &a1 * Complex64::new(ALPHA_SMALL * hs, 0.0) + &a2 * Complex64::new(ALPHA_LARGE * hs, 0.0);
            let arg = fnorm(&x1).max(fnorm(&x2));
            if arg > opts.max_step_arg {
                too_big = Some(arg);
                break;
            }
            phi = phi * linalg::expm(&x1) * linalg::expm(&x2);
        }
        match too_big {
            None => return Ok((phi, sub)),
            Some(arg) => {
                if sub * 2 > opts.max_substeps {
                    return Err(LaxError::StepRejected { node, arg, max_substeps: opts.max_substeps });
                }
                sub *= 2;
            }
        }
    }
}

/// Integrates `E⁻¹dE = Σ A_i dx_i` from `E(0) = I` along staircase paths that follow
/// the axes in `order`.
fn integrate_staircase(
    c: &ConnectionField,
    order: &[usize],
    opts: &FrameOptions,
) -> Result<(Vec<Option<Mat>>, usize), LaxError> {
    let g = &c.grid;
    let n = c.coeffs[0][0].nrows();
    let origin = g.origin_multi_index();
    let mut values: Vec<Option<Mat>> = vec![None; g.len()];
    values[g.index(&origin)] = Some(linalg::identity(n));
    let mut max_sub = 1;
    for (step, &axis) in order.iter().enumerate() {
        let stride = g.stride(axis);
        let npts = g.axis(axis).points;
        let k0 = origin[axis];
        // line starts: nodes with the axis at the origin index and later axes at origin
        let starts: Vec<usize> = (0..g.len())
            .filter(|&idx| {
                let m = g.multi_index(idx);
                m[axis] == k0 && order[step + 1..].iter().all(|&b| m[b] == origin[b])
            })
            .collect();
        let lines: Vec<Result<(Vec<(usize, Mat)>, usize), LaxError>> = starts
            .par_iter()
            .map(|&start| {
                let base = start - k0 * stride;
                let line: Vec<&Mat> = (0..npts).map(|q| &c.coeffs[axis][base + q * stride]).collect();
                let e0 = values[start].clone().expect("line start already integrated");
                let mut out = Vec::with_capacity(npts - 1);
                let mut used = 1;
                let h = g.h(axis);
                let mut e = e0.clone();
                for k in k0..npts - 1 {
                    let (phi, s) = interval_propagator(&line, k as f64, 1.0, h, opts, base + (k + 1) * stride)?;
                    used = used.max(s);
                    e = e * phi;
                    out.push((base + (k + 1) * stride, e.clone()));
                }
                let mut e = e0;
                for k in (1..=k0).rev() {
                    let (phi, s) = interval_propagator(&line, k as f64, -1.0, h, opts, base + (k - 1) * stride)?;
                    used = used.max(s);
                    e = e * phi;
                    out.push((base + (k - 1) * stride, e.clone()));
                }
                Ok((out, used))
            })
            .collect();
        for res in lines {
            let (entries, used) = res?;
            max_sub = max_sub.max(used);
            for (idx, m) in entries {
                values[idx] = Some(m);
            }
        }
    }
    Ok((values, max_sub))
}

/// Parallel frame of an arbitrary connection field.
pub fn integrate_frame(c: &ConnectionField, lambda: Complex64, opts: &FrameOptions) -> Result<FrameField, LaxError> {
    let r = c.grid.r();
    let forward: Vec<usize> = (0..r).collect();
    let backward: Vec<usize> = (0..r).rev().collect();
    let (va, sa) = integrate_staircase(c, &forward, opts)?;
    let (vb, sb) = integrate_staircase(c, &backward, opts)?;
    let values: Vec<Mat> = va.into_iter().map(|m| m.expect("all nodes reached")).collect();
    let other: Vec<Mat> = vb.into_iter().map(|m| m.expect("all nodes reached")).collect();
    let path = values
        .iter()
        .zip(&other)
        .map(|(a, b)| linalg::dist(a, b))
        .fold(0.0, f64::max);
    let mut logres = 0.0f64;
    for axis in 0..r {
        let d = grid::derivative(&c.grid, &values, axis);
        let worst = (0..values.len())
            .into_par_iter()
            .map(|k| match linalg::inverse(&values[k]) {
                Some(inv) => linalg::dist(&(inv * &d[k]), &c.coeffs[axis][k]),
                None => f64::INFINITY,
            })
            .reduce(|| 0.0, f64::max);
        logres = logres.max(worst);
    }
    Ok(FrameField {
        grid: c.grid.clone(),
        lambda,
        values,
        log_derivative_residual: logres,
        path_independence_residual: path,
        max_substeps_used: sa.max(sb),
    })
}

/// The parallel frame of `θ_λ`.
pub fn parallel_frame(
    v: &GridField,
    lambda: Complex64,
    pair: &SymmetricPair,
    opts: &FrameOptions,
) -> Result<FrameField, LaxError> {
    integrate_frame(&lax_theta(v, lambda, pair)?, lambda, opts)
}

/// Gauge action `g A_i g⁻¹ − g_{x_i} g⁻¹`.
pub fn gauge(g: &GridField, c: &ConnectionField) -> Result<ConnectionField, LaxError> {
    if g.grid != c.grid {
        return Err(LaxError::Grid(GridError::GridMismatch));
    }
    let inv: Vec<Mat> = g
        .values
        .par_iter()
        .enumerate()
        .map(|(k, m)| linalg::inverse(m).ok_or(LaxError::SingularFrame { node: k }))
        .collect::<Result<_, _>>()?;
    let coeffs = (0..c.grid.r())
        .map(|axis| {
            let dg = g.derivative(axis);
            (0..g.values.len())
                .into_par_iter()
                .map(|k| &g.values[k] * &c.coeffs[axis][k] * &inv[k] - &dg[k] * &inv[k])
                .collect()
        })
        .collect();
    Ok(ConnectionField::new(c.grid.clone(), coeffs, ValueSpace::General, c.structure))
}

/// Anything that can produce frames `E(·, λ)` on a grid.
pub trait FrameProvider: Sync {
    fn grid(&self) -> &Grid;
    fn frame(&self, lambda: Complex64) -> Result<Vec<Mat>, LaxError>;
}

/// Frames obtained by integrating `θ_λ` numerically.
pub struct IntegratedFrames<'a> {
    pub v: &'a GridField,
    pub pair: &'a SymmetricPair,
    pub opts: FrameOptions,
}

impl FrameProvider for IntegratedFrames<'_> {
    fn grid(&self) -> &Grid {
        &self.v.grid
    }
    fn frame(&self, lambda: Complex64) -> Result<Vec<Mat>, LaxError> {
        Ok(parallel_frame(self.v, lambda, self.pair, &self.opts)?.values)
    }
}

fn inverses(vals: &[Mat]) -> Result<Vec<Mat>, LaxError> {
    vals.par_iter()
        .enumerate()
        .map(|(k, m)| linalg::inverse(m).ok_or(LaxError::SingularFrame { node: k }))
        .collect()
}

/// The curved flat `ψ = E(·,1) E(·,−1)⁻¹`.
#[derive(Clone, Debug)]
pub struct CurvedFlat {
    pub psi: GridField,
    /// `max ‖σ(ψ)ψ − I‖`.
    pub sigma_residual: f64,
    /// `‖ψ(0) − I‖`.
    pub base_residual: f64,
}

pub fn curved_flat(frames: &dyn FrameProvider, pair: &SymmetricPair) -> Result<CurvedFlat, LaxError> {
    let one = Complex64::new(1.0, 0.0);
    let ep = frames.frame(one)?;
    let em_inv = inverses(&frames.frame(-one)?)?;
    let psi: Vec<Mat> = ep.iter().zip(&em_inv).map(|(a, b)| a * b).collect();
    let n = pair.n();
    let id = linalg::identity(n);
    let sigma_residual = psi
        .par_iter()
        .map(|p| match pair.sigma_group(p) {
            Some(s) => linalg::dist(&(s * p), &id),
            None => f64::INFINITY,
        })
        .reduce(|| 0.0, f64::max);
    let grid = frames.grid().clone();
    let base_residual = linalg::dist(&psi[grid.origin_index()], &id);
    Ok(CurvedFlat { psi: GridField::new(grid, psi, ValueSpace::Group), sigma_residual, base_residual })
}

/// The Cartan lift `f = E(·,1) E(·,0)⁻¹` together with `g = E(·,0)`.
#[derive(Clone, Debug)]
pub struct CartanLift {
    pub f: GridField,
    pub g: GridField,
    /// `max ‖f⁻¹f_{x_i}‖` distance from `𝒰₁`.
    pub u1_residual: f64,
    /// `max ‖[f⁻¹f_{x_i}, f⁻¹f_{x_j}]‖`.
    pub bracket_residual: f64,
    /// `max ‖f⁻¹f_{x_i} − g a_i g⁻¹‖`.
    pub conjugation_residual: f64,
    /// `max ‖g⁻¹g_{x_i} − [a_i, v]‖`.
    pub g_equation_residual: f64,
    /// Per-node maximum of the three derivative residuals above.
    pub node_residuals: Vec<f64>,
}

pub fn cartan_lift(frames: &dyn FrameProvider, v: &GridField, pair: &SymmetricPair) -> Result<CartanLift, LaxError> {
    check_v(v, pair)?;
    let e1 = frames.frame(Complex64::new(1.0, 0.0))?;
    let e0 = frames.frame(Complex64::new(0.0, 0.0))?;
    let e0_inv = inverses(&e0)?;
    let f: Vec<Mat> = e1.iter().zip(&e0_inv).map(|(a, b)| a * b).collect();
    let f_inv = inverses(&f)?;
    let grid = frames.grid().clone();
    let r = grid.r();
    let a = pair.a();
    let logf: Vec<Vec<Mat>> = (0..r)
        .map(|i| {
            let d = grid::derivative(&grid, &f, i);
            f_inv.iter().zip(&d).map(|(fi, df)| fi * df).collect()
        })
        .collect();
    let logg: Vec<Vec<Mat>> = (0..r)
        .map(|i| {
            let d = grid::derivative(&grid, &e0, i);
            e0_inv.iter().zip(&d).map(|(gi, dg)| gi * dg).collect()
        })
        .collect();
    let per_node: Vec<[f64; 4]> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let mut out = [0.0f64; 4];
            for i in 0..r {
                out[0] = out[0].max(pair.u1_residual(&logf[i][k]));
                let conj = &e0[k] * &a[i] * &e0_inv[k];
                out[2] = out[2].max(linalg::dist(&logf[i][k], &conj));
                out[3] = out[3].max(linalg::dist(&logg[i][k], &commutator(&a[i], &v.values[k])));
                for j in (i + 1)..r {
                    out[1] = out[1].max(fnorm(&commutator(&logf[i][k], &logf[j][k])));
                }
            }
            out
        })
        .collect();
    let col = |q: usize| per_node.iter().map(|p| p[q]).fold(0.0, f64::max);
    let node_residuals = per_node.iter().map(|p| p[0].max(p[1]).max(p[2]).max(p[3])).collect();
    Ok(CartanLift {
        f: GridField::new(grid.clone(), f, ValueSpace::Group),
        g: GridField::new(grid, e0, ValueSpace::Group),
        u1_residual: col(0),
        bracket_residual: col(1),
        conjugation_residual: col(2),
        g_equation_residual: col(3),
        node_residuals,
    })
}

/// The flat abelian map `Y = ∂_λE E⁻¹ |_{λ=0}`.
#[derive(Clone, Debug)]
pub struct FlatAbelian {
    pub y: GridField,
    pub delta: f64,
    /// `max` distance of `Y` from `𝒰₁`.
    pub u1_residual: f64,
    /// `max ‖[Y_{x_i}, Y_{x_j}]‖`.
    pub bracket_residual: f64,
    /// `max ‖Y_{x_i} − g a_i g⁻¹‖` with `g = E(·,0)`.
    pub derivative_residual: f64,
    /// Largest deviation of the Gram matrix `(Y_{x_i}, Y_{x_j})` from its value at the origin.
    pub gram_drift: f64,
}

pub fn flat_abelian(frames: &dyn FrameProvider, pair: &SymmetricPair, delta: f64) -> Result<FlatAbelian, LaxError> {
    let e0 = frames.frame(Complex64::new(0.0, 0.0))?;
    let e0_inv = inverses(&e0)?;
    let central = |d: f64| -> Result<Vec<Mat>, LaxError> {
        let p = frames.frame(Complex64::new(d, 0.0))?;
        let m = frames.frame(Complex64::new(-d, 0.0))?;
        Ok((0..p.len()).map(|k| (&p[k] - &m[k]) * &e0_inv[k] * Complex64::new(0.5 / d, 0.0)).collect())
    };
    let d1 = central(delta)?;
    let d2 = central(delta / 2.0)?;
    let y: Vec<Mat> = d1
        .iter()
        .zip(&d2)
        .map(|(a, b)| (b * Complex64::new(4.0, 0.0) - a) * Complex64::new(1.0 / 3.0, 0.0))
        .collect();
    let grid = frames.grid().clone();
    let r = grid.r();
    let dy: Vec<Vec<Mat>> = (0..r).map(|i| grid::derivative(&grid, &y, i)).collect();
    let a = pair.a();
    let u1_residual = y.iter().map(|m| pair.u1_residual(m)).fold(0.0, f64::max);
    let mut bracket_residual = 0.0f64;
    let mut derivative_residual = 0.0f64;
    let gram_at = |k: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(r * r);
        for i in 0..r {
            for j in 0..r {
                out.push(pair.inner(&dy[i][k], &dy[j][k]));
            }
        }
        out
    };
    let g0 = gram_at(grid.origin_index());
    let mut gram_drift = 0.0f64;
    for k in 0..grid.len() {
        for i in 0..r {
            let conj = &e0[k] * &a[i] * &e0_inv[k];
            derivative_residual = derivative_residual.max(linalg::dist(&dy[i][k], &conj));
            for j in (i + 1)..r {
                bracket_residual = bracket_residual.max(fnorm(&commutator(&dy[i][k], &dy[j][k])));
            }
        }
        let gk = gram_at(k);
        gram_drift = gk.iter().zip(&g0).map(|(p, q)| (p - q).abs()).fold(gram_drift, f64::max);
    }
    Ok(FlatAbelian {
        y: GridField::new(grid, y, ValueSpace::U1),
        delta,
        u1_residual,
        bracket_residual,
        derivative_residual,
        gram_drift,
    })
}

/// Vacuum frames `exp(λ Σ a_i x_i)` in closed form.
pub struct VacuumFrames<'a> {
    pub grid: &'a Grid,
    pub pair: &'a SymmetricPair,
}

impl FrameProvider for VacuumFrames<'_> {
    fn grid(&self) -> &Grid {
        self.grid
    }
    fn frame(&self, lambda: Complex64) -> Result<Vec<Mat>, LaxError> {
        let a = self.pair.a();
        Ok((0..self.grid.len())
            .into_par_iter()
            .map(|k| {
                let x = self.grid.point(k);
                let mut arg = linalg::zeros(self.pair.n());
                for (ai, xi) in a.iter().zip(&x) {
                    arg += ai * (lambda * *xi);
                }
                linalg::expm(&arg)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::builtin_pair;
    use crate::linalg::c;

    fn zero_v(grid: &Grid, n: usize) -> GridField {
        GridField::new(grid.clone(), vec![linalg::zeros(n); grid.len()], ValueSpace::U1PerpA)
    }

    #[test]
    fn curvature_of_constants() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 9, 2).unwrap();
        let flat = curvature(&ConnectionField::constant(&g, p.a())).unwrap();
        assert!(flat.max < 1e-14);
        let (x, y) = (p.u0().basis()[0].clone(), p.u1().basis()[1].clone());
        let bent = curvature(&ConnectionField::constant(&g, &[x.clone(), y.clone()])).unwrap();
        let expected = commutator(&x, &y);
        assert!(bent.fields[0].iter().all(|m| linalg::dist(m, &expected) < 1e-13));
    }

    #[test]
    fn uu0_residual_cases() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 9, 2).unwrap();
        assert_eq!(uu0_residual(&zero_v(&g, 3), &p).unwrap().max, 0.0);
        let w = p.u1_perp_a().basis()[0].clone() + &p.u1_perp_a().basis()[2] * c(0.5, 0.0);
        let v = GridField::new(g.clone(), vec![w.clone(); g.len()], ValueSpace::U1PerpA);
        let res = uu0_residual(&v, &p).unwrap();
        let (a1, a2) = (&p.a()[0], &p.a()[1]);
        let expected = -commutator(&commutator(a1, &w), &commutator(a2, &w));
        assert!(fnorm(&expected) > 1e-3);
        assert!(res.fields[0].iter().all(|m| linalg::dist(m, &expected) < 1e-13));
        for m in &res.fields[0] {
            assert!(p.u0_residual(m) < 1e-13);
        }
        let bad = GridField::new(g.clone(), vec![w; g.len()], ValueSpace::U1);
        assert!(matches!(uu0_residual(&bad, &p), Err(LaxError::WrongValueSpace { .. })));
    }

    #[test]
    fn lax_theta_and_reality_at_coefficient_level() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 9, 2).unwrap();
        let w = p.u1_perp_a().basis()[1].clone();
        let v = GridField::from_fn(&g, ValueSpace::U1PerpA, |x| &w * c((x[0] * x[1]).sin(), 0.0));
        let th0 = lax_theta(&v, c(0.0, 0.0), &p).unwrap();
        assert!(linalg::dist(&th0.coeffs[0][7], &commutator(&p.a()[0], &v.values[7])) < 1e-15);
        let th1 = lax_theta(&zero_v(&g, 3), c(1.0, 0.0), &p).unwrap();
        assert!(linalg::dist(&th1.coeffs[1][5], &p.a()[1]) < 1e-15);
        let samples = [c(0.3, 0.7), c(-1.2, 0.4), c(2.0, -0.1)];
        let eval = |lam: Complex64| -> Result<Vec<Mat>, String> {
            let th = lax_theta(&v, lam, &p).map_err(|e| e.to_string())?;
            Ok(th.coeffs.concat())
        };
        let res = reality_residual(eval, &samples, &p, InvolutionLevel::Algebra).unwrap();
        assert!(res < 1e-14, "{res}");
    }

    #[test]
    fn omega_cases() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 9, 2).unwrap();
        let mut a = ConnectionField::constant(&g, p.a());
        a.space = ValueSpace::U1;
        for lam in [c(1.0, 0.0), c(2.0, 0.0)] {
            assert!(curvature(&curvedflat_omega(&a, lam).unwrap()).unwrap().max < 1e-13);
        }
        let z = curvedflat_omega(&a, c(0.0, 0.0)).unwrap();
        assert!(z.coeffs.iter().flatten().all(|m| fnorm(m) == 0.0));
        a.space = ValueSpace::General;
        assert!(curvedflat_omega(&a, c(1.0, 0.0)).is_err());
    }

    #[test]
    fn vacuum_frame_matches_exponential() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 17, 2).unwrap();
        let lam = c(0.7, -0.4);
        let fr = parallel_frame(&zero_v(&g, 3), lam, &p, &FrameOptions::default()).unwrap();
        let exact = VacuumFrames { grid: &g, pair: &p }.frame(lam).unwrap();
        for (a, b) in fr.values.iter().zip(&exact) {
            assert!(linalg::dist(a, b) < 1e-12);
        }
        assert_eq!(fr.values[g.origin_index()], linalg::identity(3));
        assert!(fr.path_independence_residual < 1e-12);
    }

    #[test]
    fn frame_integrator_is_fourth_order() {
        // a non-commuting, x-dependent flat connection: θ = g⁻¹dg for g = exp(x₁X)exp(x₂Y)·exp(x₁x₂Z)
        let p = builtin_pair("sun_son", 3).unwrap();
        let (xm, ym, zm) = (p.u0().basis()[0].clone(), p.u1().basis()[0].clone(), p.u0().basis()[2].clone());
        let gmap = |x: &[f64]| {
            linalg::expm(&(&xm * c(x[0], 0.0))) * linalg::expm(&(&ym * c(x[1], 0.0))) * linalg::expm(&(&zm * c(x[0] * x[1], 0.0)))
        };
        let err = |n: usize| {
            let g = Grid::square(1.0, n, 2).unwrap();
            let base_inv = linalg::inverse(&gmap(&[0.0, 0.0])).unwrap();
            let coeffs: Vec<Vec<Mat>> = (0..2)
                .map(|axis| {
                    (0..g.len())
                        .map(|k| {
                            let x = g.point(k);
                            let gi = linalg::inverse(&gmap(&x)).unwrap();
                            let eps = 1e-5;
                            let mut xp = x.clone();
                            xp[axis] += eps;
                            let mut xm2 = x.clone();
                            xm2[axis] -= eps;
                            let mut xp2 = x.clone();
                            xp2[axis] += 2.0 * eps;
                            let mut xmm = x.clone();
                            xmm[axis] -= 2.0 * eps;
                            let d = (gmap(&xm2) * c(-8.0, 0.0) + gmap(&xp) * c(8.0, 0.0) + gmap(&xmm) - gmap(&xp2))
                                * c(1.0 / (12.0 * eps), 0.0);
                            gi * d
                        })
                        .collect()
                })
                .collect();
            let conn = ConnectionField::new(g.clone(), coeffs, ValueSpace::General, LambdaStructure::Constant);
            let fr = integrate_frame(&conn, c(0.0, 0.0), &FrameOptions::default()).unwrap();
            (0..g.len())
                .map(|k| linalg::dist(&fr.values[k], &(&base_inv * gmap(&g.point(k)))))
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(9), err(17));
        let ratio = e1 / e2;
        assert!(ratio > 11.0, "e(h)={e1:e} e(h/2)={e2:e} ratio {ratio}");
    }

    #[test]
    fn non_solution_breaks_path_independence() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 17, 2).unwrap();
        let w = p.u1_perp_a().basis()[0].clone();
        let v = GridField::from_fn(&g, ValueSpace::U1PerpA, |x| &w * c(1.0 + x[0] - 0.5 * x[1], 0.0));
        assert!(uu0_residual(&v, &p).unwrap().max > 0.1);
        let fr = parallel_frame(&v, c(1.0, 0.0), &p, &FrameOptions::default()).unwrap();
        assert!(fr.path_independence_residual > 1e-2);
    }

    #[test]
    fn step_rejection() {
        let p = builtin_pair("sun_son", 2).unwrap();
        let g = Grid::square(1.0, 9, 1).unwrap();
        let conn = ConnectionField::constant(&g, &[&p.a()[0] * c(1e4, 0.0)]);
        let opts = FrameOptions { max_step_arg: 1.0, max_substeps: 8 };
        assert!(matches!(integrate_frame(&conn, c(1.0, 0.0), &opts), Err(LaxError::StepRejected { .. })));
    }

    #[test]
    fn gauge_identity_and_constant() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 9, 2).unwrap();
        let conn = ConnectionField::constant(&g, &[p.u1().basis()[0].clone(), p.u0().basis()[1].clone()]);
        let id = GridField::new(g.clone(), vec![linalg::identity(3); g.len()], ValueSpace::Group);
        let same = gauge(&id, &conn).unwrap();
        assert!(same.coeffs.iter().flatten().zip(conn.coeffs.iter().flatten()).all(|(a, b)| linalg::dist(a, b) < 1e-14));
        let k = linalg::expm(&(&p.u0().basis()[2] * c(0.4, 0.0)));
        let kc = GridField::new(g.clone(), vec![k.clone(); g.len()], ValueSpace::Group);
        let conj = gauge(&kc, &conn).unwrap();
        let kinv = linalg::inverse(&k).unwrap();
        assert!(linalg::dist(&conj.coeffs[0][3], &(&k * &conn.coeffs[0][3] * &kinv)) < 1e-13);
    }

    #[test]
    fn vacuum_geometry() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let g = Grid::square(1.0, 17, 2).unwrap();
        let v = zero_v(&g, 3);
        let frames = VacuumFrames { grid: &g, pair: &p };
        let cf = curved_flat(&frames, &p).unwrap();
        assert!(cf.sigma_residual < 1e-13 && cf.base_residual < 1e-15);
        let lift = cartan_lift(&frames, &v, &p).unwrap();
        // f = exp(Σ a_i x_i): only stencil truncation remains
        let h4 = g.h(0).powi(4);
        assert!(lift.u1_residual < h4 && lift.conjugation_residual < h4);
        assert!(lift.bracket_residual < 1e-12 && lift.g_equation_residual < 1e-12);
        let fa = flat_abelian(&frames, &p, 1e-3).unwrap();
        for k in 0..g.len() {
            let x = g.point(k);
            let exact = &p.a()[0] * c(x[0], 0.0) + &p.a()[1] * c(x[1], 0.0);
            assert!(linalg::dist(&fa.y.values[k], &exact) < 1e-10);
        }
    }
}

//! Dressing by rational loops: loop construction, Birkhoff factorization against the
//! vacuum exponent, solution extraction and the `λ⁻¹` expansion of `m⁻¹cm`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::algebra::{PairKind, Projector, SymmetricPair, TOL_ALG};
use crate::grid::{self, Grid};
use crate::lax::{self, FrameProvider, GridField, InvolutionLevel, LaxError, ValueSpace};
use crate::linalg::{self, commutator, fnorm, Mat};

/// Default bound on the depth of `λ⁻¹` expansions.
pub const MAX_DEPTH: usize = 12;
/// Residue systems whose Frobenius condition number exceeds this are treated as singular.
pub const COND_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DressingError {
    #[error("reality constraints cannot be met: {0}")]
    RealityUnsolvable(String),
    #[error("residue system is singular (condition number {cond:.3e})")]
    FactorizationSingular { cond: f64 },
    #[error("m₋₁ leaves 𝒰₁ at node {node} (residual {residual:.3e})")]
    SpaceViolation { node: usize, residual: f64 },
    #[error("expansion depth {requested} exceeds the bound {max}")]
    DepthOverflow { requested: usize, max: usize },
    #[error("invalid flow: {0}")]
    InvalidFlow(String),
    #[error("invalid loop: {0}")]
    InvalidLoop(String),
    #[error("loops are only constructed for the sun_son pair")]
    UnsupportedPair,
    #[error("node {node} is not factorizable")]
    Hole { node: usize },
    #[error(transparent)]
    Lax(#[from] LaxError),
}

/// `f(λ) = I + Σ_k R_k / (λ − p_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RationalLoop {
    n: usize,
    poles: Vec<Complex64>,
    residues: Vec<Mat>,
}

impl RationalLoop {
    pub fn identity(n: usize) -> Self {
        Self { n, poles: Vec::new(), residues: Vec::new() }
    }

    pub fn new(n: usize, poles: Vec<Complex64>, residues: Vec<Mat>) -> Result<Self, DressingError> {
        if poles.len() != residues.len() {
            return Err(DressingError::InvalidLoop("one residue per pole".into()));
        }
        for (k, p) in poles.iter().enumerate() {
            if p.norm() < 1e-12 || !p.re.is_finite() || !p.im.is_finite() {
                return Err(DressingError::InvalidLoop(format!("pole {p} at 0 or ∞")));
            }
            if poles[..k].iter().any(|q| (q - p).norm() < 1e-12) {
                return Err(DressingError::InvalidLoop(format!("repeated pole {p}")));
            }
        }
        if residues.iter().any(|r| r.nrows() != n || r.ncols() != n) {
            return Err(DressingError::InvalidLoop("residue size".into()));
        }
        Ok(Self { n, poles, residues })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn poles(&self) -> &[Complex64] {
        &self.poles
    }
    pub fn residues(&self) -> &[Mat] {
        &self.residues
    }
    pub fn is_identity(&self) -> bool {
        self.residues.iter().all(|r| fnorm(r) == 0.0)
    }

    pub fn eval(&self, lambda: Complex64) -> Mat {
        let mut out = linalg::identity(self.n);
        for (p, r) in self.poles.iter().zip(&self.residues) {
            out += r * (Complex64::new(1.0, 0.0) / (lambda - p));
        }
        out
    }

    /// Product `self · other` in partial-fraction form. Poles must not coincide.
    pub fn mul(&self, other: &RationalLoop) -> Result<Self, DressingError> {
        let mut poles = self.poles.clone();
        let mut residues = self.residues.clone();
        poles.extend_from_slice(&other.poles);
        residues.extend(other.residues.iter().cloned());
        let k0 = self.poles.len();
        for (i, (p, r)) in self.poles.iter().zip(&self.residues).enumerate() {
            for (j, (q, s)) in other.poles.iter().zip(&other.residues).enumerate() {
                if (p - q).norm() < 1e-12 {
                    return Err(DressingError::InvalidLoop(format!("double pole at {p}")));
                }
                let cross = r * s * (Complex64::new(1.0, 0.0) / (p - q));
                residues[i] += &cross;
                residues[k0 + j] -= &cross;
            }
        }
        Self::new(self.n, poles, residues)
    }

    /// Coefficients `M_0 = I, M_k = Σ R_j p_j^{k−1}` of the expansion at `∞`.
    pub fn series(&self, depth: usize) -> Vec<Mat> {
        let mut out = vec![linalg::identity(self.n)];
        for k in 1..=depth {
            let mut m = linalg::zeros(self.n);
            for (p, r) in self.poles.iter().zip(&self.residues) {
                m += r * p.powi(k as i32 - 1);
            }
            out.push(m);
        }
        out
    }
}

/// Elementary factor `I + (ᾱ − α) π / (λ − ᾱ)` with pole at `ᾱ` and inverse
/// `I + (α − ᾱ) π / (λ − α)`. Exposed for constructing deliberately unbalanced loops.
pub fn simple_element(alpha: Complex64, pi: &Mat) -> (RationalLoop, RationalLoop) {
    let n = pi.nrows();
    let d = alpha.conj() - alpha;
    let f = RationalLoop { n, poles: vec![alpha.conj()], residues: vec![pi * d] };
    let g = RationalLoop { n, poles: vec![alpha], residues: vec![pi * (-d)] };
    (f, g)
}

/// Hermitian projection onto the column span of `u`.
fn projection(u: &Mat) -> Result<Mat, DressingError> {
    let gram = u.adjoint() * u;
    let inv = linalg::inverse(&gram).ok_or_else(|| DressingError::RealityUnsolvable("degenerate seed vectors".into()))?;
    Ok(u * inv * u.adjoint())
}

/// Pole and seed data for a reality loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoopSpec {
    pub poles: Vec<Complex64>,
    pub seed: u64,
    /// Rank of each residue; 0 gives the identity loop.
    pub rank: usize,
    /// Complete each pole to its orbit under `p ↦ −p̄`.
    pub mirror: bool,
}

/// A loop satisfying both reality identities, with its inverse.
#[derive(Clone, Debug)]
pub struct RealityLoop {
    pub f: RationalLoop,
    pub f_inv: RationalLoop,
}

impl RealityLoop {
    pub fn identity(n: usize) -> Self {
        Self { f: RationalLoop::identity(n), f_inv: RationalLoop::identity(n) }
    }
}

fn seed_vectors(rng: &mut ChaCha8Rng, n: usize, rank: usize, real: bool) -> Mat {
    Mat::from_fn(n, rank, |_, _| {
        let re = rng.gen_range(-1.0..1.0);
        let im = if real { 0.0 } else { rng.gen_range(-1.0..1.0) };
        Complex64::new(re, im)
    })
}

/// Builds a loop with the requested poles satisfying `τ(f(λ̄)) = f(λ)` and
/// `σ(f(−λ)) = f(λ)`.
///
/// Each pole `p` on the imaginary axis yields one elementary factor with a real
/// symmetric projection. Any other `p` is paired with `−p̄` into a two-factor loop
/// whose second projection is fixed by the `σ` identity. The poles of `f⁻¹` are the
/// complex conjugates, so the four points `±p, ±p̄` all occur.
pub fn make_reality_loop(spec: &LoopSpec, pair: &SymmetricPair) -> Result<RealityLoop, DressingError> {
    if pair.kind() != PairKind::SunSon {
        return Err(DressingError::UnsupportedPair);
    }
    let n = pair.n();
    if spec.rank == 0 {
        return Ok(RealityLoop::identity(n));
    }
    if spec.rank >= n {
        return Err(DressingError::RealityUnsolvable(format!("residue rank {} must be below n = {n}", spec.rank)));
    }
    let scale = spec.poles.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let on_imag = |p: &Complex64| p.re.abs() <= 1e-12 * scale;
    let mut orbits: Vec<Complex64> = Vec::new();
    for p in &spec.poles {
        if p.im.abs() <= 1e-12 * scale {
            return Err(DressingError::RealityUnsolvable(format!("pole {p} is real")));
        }
        let partner = -p.conj();
        let seen = orbits.iter().any(|q| (q - p).norm() < 1e-12 * scale || (q - partner).norm() < 1e-12 * scale);
        if seen {
            continue;
        }
        if !spec.mirror && !on_imag(p) && !spec.poles.iter().any(|q| (q - partner).norm() < 1e-12 * scale) {
            return Err(DressingError::RealityUnsolvable(format!("pole {p} appears without its mirror {partner}")));
        }
        orbits.push(*p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut f = RationalLoop::identity(n);
    let mut f_inv = RationalLoop::identity(n);
    for p in orbits {
        let alpha = p.conj();
        let (g, g_inv) = if on_imag(&p) {
            let pi = projection(&seed_vectors(&mut rng, n, spec.rank, true))?;
            simple_element(Complex64::new(0.0, alpha.im), &pi)
        } else {
            let u = seed_vectors(&mut rng, n, spec.rank, false);
            let pi = projection(&u)?;
            let (g1, g1_inv) = simple_element(alpha, &pi);
            let beta = -alpha.conj();
            let m = g1.eval(beta);
            let rho = projection(&(m * linalg::conj(&u)))?;
            let (g2, g2_inv) = simple_element(beta, &rho);
            (g2.mul(&g1)?, g1_inv.mul(&g2_inv)?)
        };
        f = f.mul(&g)?;
        f_inv = g_inv.mul(&f_inv)?;
    }
    Ok(RealityLoop { f, f_inv })
}

/// One flow term `b λ^j t` of the vacuum exponent.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTerm {
    pub b: Mat,
    pub j: u32,
    pub t: f64,
}

/// `e^A(x,t)(λ) = exp((Σ a_i x_i) λ) · Π exp(b λ^j t)`, factors taken in listed order.
#[derive(Clone, Debug)]
pub struct VacuumExponent {
    ax: Mat,
    flows: Vec<FlowTerm>,
}

impl VacuumExponent {
    pub fn new(pair: &SymmetricPair, x: &[f64], flows: Vec<FlowTerm>) -> Result<Self, DressingError> {
        if x.len() != pair.rank() {
            return Err(DressingError::InvalidFlow(format!("x has {} coordinates, rank is {}", x.len(), pair.rank())));
        }
        for fl in &flows {
            validate_flow(pair, &fl.b, fl.j)?;
        }
        let mut ax = linalg::zeros(pair.n());
        for (a, xi) in pair.a().iter().zip(x) {
            ax += a * Complex64::new(*xi, 0.0);
        }
        Ok(Self { ax, flows })
    }

    pub fn eval(&self, lambda: Complex64) -> Mat {
        let mut out = linalg::expm(&(&self.ax * lambda));
        for fl in &self.flows {
            out *= linalg::expm(&(&fl.b * (lambda.powu(fl.j) * fl.t)));
        }
        out
    }
}

/// Checks `b ∈ 𝒜` and that `j` is odd and at least 3.
pub fn validate_flow(pair: &SymmetricPair, b: &Mat, j: u32) -> Result<(), DressingError> {
    if j % 2 == 0 || j < 3 {
        return Err(DressingError::InvalidFlow(format!("flow order j = {j} must be odd and at least 3")));
    }
    let proj = crate::algebra::project(b, &pair.a_space())
        .map_err(|e| DressingError::InvalidFlow(e.to_string()))?;
    let off = linalg::dist(&proj, b);
    if off > TOL_ALG * fnorm(b).max(1.0) {
        return Err(DressingError::InvalidFlow(format!("b is not in 𝒜 (off by {off:.3e})")));
    }
    Ok(())
}

/// Result of factoring `f⁻¹ e^A = E m⁻¹` at one point.
#[derive(Clone, Debug)]
pub struct FactorizationPoint {
    pub m: RationalLoop,
    pub cond: f64,
    /// `max ‖S_k − S_k'‖` between the plain and the column-pivoted QR solutions.
    pub solver_gap: f64,
    exponent: VacuumExponent,
}

impl FactorizationPoint {
    /// `m₋₁ = Σ_k S_k`.
    pub fn m_minus_1(&self) -> Mat {
        let mut out = linalg::zeros(self.m.n());
        for s in self.m.residues() {
            out += s;
        }
        out
    }

    pub fn exponent(&self) -> &VacuumExponent {
        &self.exponent
    }

    /// `E(λ) = f(λ)⁻¹ e^A(λ) m(λ)` evaluated directly; undefined at the poles.
    pub fn frame_direct(&self, f_inv: &RationalLoop, lambda: Complex64) -> Mat {
        f_inv.eval(lambda) * self.exponent.eval(lambda) * self.m.eval(lambda)
    }

    /// `E(λ)` with removable singularities handled by a Cauchy integral.
    pub fn frame(&self, floop: &RealityLoop, lambda: Complex64) -> Mat {
        let near = floop
            .f
            .poles()
            .iter()
            .chain(floop.f_inv.poles())
            .map(|p| (p - lambda).norm())
            .fold(f64::INFINITY, f64::min);
        if near > 1e-6 {
            return self.frame_direct(&floop.f_inv, lambda);
        }
        let radius = 0.05;
        let npts = 64;
        let mut acc = linalg::zeros(self.m.n());
        for k in 0..npts {
            let w = Complex64::from_polar(1.0, 2.0 * PI * (k as f64 + 0.5) / npts as f64);
            acc += self.frame_direct(&floop.f_inv, lambda + w * radius);
        }
        acc / Complex64::new(npts as f64, 0.0)
    }
}

/// Solves the residue conditions for `m(λ) = I + Σ S_k/(λ − p_k)`:
/// `f⁻¹(p_k) e^A(p_k) S_k = 0` at every pole of `f`, and
/// `T_l e^A(z_l) m(z_l) = 0` at every pole `z_l` of `f⁻¹` with residue `T_l`.
pub fn birkhoff_factor(floop: &RealityLoop, exponent: &VacuumExponent) -> Result<FactorizationPoint, DressingError> {
    let f = &floop.f;
    let n = f.n();
    let k = f.poles().len();
    if k == 0 {
        return Ok(FactorizationPoint { m: RationalLoop::identity(n), cond: 1.0, solver_gap: 0.0, exponent: exponent.clone() });
    }
    let fi = &floop.f_inv;
    for z in fi.poles() {
        if f.poles().iter().any(|p| (p - z).norm() < 1e-12) {
            return Err(DressingError::InvalidLoop("f and f⁻¹ share a pole".into()));
        }
    }
    let nn = n * n;
    let rows = (k + fi.poles().len()) * nn;
    let cols = k * nn;
    let mut a = DMatrix::<Complex64>::zeros(rows, cols);
    let mut b = DVector::<Complex64>::zeros(rows);
    // vec(L S) = (I ⊗ L) vec(S), column-major
    let put = |a: &mut DMatrix<Complex64>, row0: usize, col0: usize, l: &Mat, w: Complex64| {
        for col in 0..n {
            for r in 0..n {
                for cc in 0..n {
                    a[(row0 + r + col * n, col0 + cc + col * n)] += l[(r, cc)] * w;
                }
            }
        }
    };
    for (kk, p) in f.poles().iter().enumerate() {
        let l = fi.eval(*p) * exponent.eval(*p);
        let s = 1.0 / fnorm(&l).max(f64::MIN_POSITIVE);
        put(&mut a, kk * nn, kk * nn, &l, Complex64::new(s, 0.0));
    }
    for (ll, (z, t)) in fi.poles().iter().zip(fi.residues()).enumerate() {
        let w = t * exponent.eval(*z);
        let s = 1.0 / fnorm(&w).max(f64::MIN_POSITIVE);
        let row0 = (k + ll) * nn;
        for (kk, p) in f.poles().iter().enumerate() {
            put(&mut a, row0, kk * nn, &w, Complex64::new(s, 0.0) / (z - p));
        }
        for col in 0..n {
            for r in 0..n {
                b[row0 + r + col * n] = -w[(r, col)] * s;
            }
        }
    }
    // Householder QR gives the solution and column-pivoted QR an independent second
    // one; the condition number is the Frobenius one, ‖A‖·‖A⁺‖ with A⁺ = R⁻¹Q*
    let qr = a.clone().qr();
    let rhs = qr.q().adjoint() * &b;
    let x = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or(DressingError::FactorizationSingular { cond: f64::INFINITY })?;
    let r_inv = qr
        .r()
        .solve_upper_triangular(&DMatrix::<Complex64>::identity(cols, cols))
        .ok_or(DressingError::FactorizationSingular { cond: f64::INFINITY })?;
    let cond = a.norm() * r_inv.norm();
    if !(cond <= COND_LIMIT) {
        return Err(DressingError::FactorizationSingular { cond });
    }
    let cpqr = a.clone().col_piv_qr();
    let mut x2 = cpqr
        .r()
        .solve_upper_triangular(&(cpqr.q().adjoint() * &b))
        .ok_or(DressingError::FactorizationSingular { cond })?;
    cpqr.p().inv_permute_rows(&mut x2);
    let unpack = |x: &DVector<Complex64>| -> Vec<Mat> {
        (0..k).map(|kk| Mat::from_fn(n, n, |r, c| x[kk * nn + r + c * n])).collect()
    };
    let s1 = unpack(&x);
    let s2 = unpack(&x2);
    let solver_gap = s1.iter().zip(&s2).map(|(p, q)| linalg::dist(p, q)).fold(0.0, f64::max);
    let m = RationalLoop::new(n, f.poles().to_vec(), s1)?;
    Ok(FactorizationPoint { m, cond, solver_gap, exponent: exponent.clone() })
}

/// Diagnostics of one factorization.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct PointChecks {
    /// `max ‖f⁻¹e^A − E m⁻¹‖ / ‖f⁻¹e^A‖` on a small circle, with `E` recovered by a
    /// Cauchy integral over a large circle.
    pub product_identity: f64,
    /// Largest `‖(1/2πi)∮ E dλ‖` around the poles of `f` and `f⁻¹`, relative to `max ‖E‖`.
    pub entirety: f64,
    /// Reality residual of `m` and `E` on the sample quadruples.
    pub reality: f64,
    pub m_at_infinity: f64,
}

fn circle(center: Complex64, radius: f64, npts: usize) -> Vec<Complex64> {
    (0..npts)
        .map(|k| center + Complex64::from_polar(radius, 2.0 * PI * (k as f64 + 0.5) / npts as f64))
        .collect()
}

/// Runs the product-identity, entirety, reality and normalization checks.
pub fn check_point(
    point: &FactorizationPoint,
    floop: &RealityLoop,
    pair: &SymmetricPair,
    lambda_samples: &[Complex64],
) -> PointChecks {
    let n = pair.n();
    let all_poles: Vec<Complex64> = floop.f.poles().iter().chain(floop.f_inv.poles()).cloned().collect();
    if all_poles.is_empty() {
        return PointChecks {
            product_identity: 0.0,
            entirety: 0.0,
            reality: reality_of(point, floop, pair, lambda_samples),
            m_at_infinity: 0.0,
        };
    }
    let pmax = all_poles.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let pmin = all_poles.iter().map(|p| p.norm()).fold(f64::INFINITY, f64::min);
    let big = circle(Complex64::new(0.0, 0.0), 2.0 * pmax, 128);
    let e_big: Vec<Mat> = big.iter().map(|z| point.frame_direct(&floop.f_inv, *z)).collect();
    let mut product_identity = 0.0f64;
    for lam in circle(Complex64::new(0.0, 0.0), 0.5 * pmin, 16) {
        let mut e = linalg::zeros(n);
        for (z, ez) in big.iter().zip(&e_big) {
            e += ez * (z / (z - lam));
        }
        e /= Complex64::new(big.len() as f64, 0.0);
        let lhs = floop.f_inv.eval(lam) * point.exponent.eval(lam);
        let rhs = match linalg::inverse(&point.m.eval(lam)) {
            Some(mi) => e * mi,
            None => {
                product_identity = f64::INFINITY;
                continue;
            }
        };
        product_identity = product_identity.max(linalg::dist(&lhs, &rhs) / fnorm(&lhs).max(1.0));
    }
    let mut entirety = 0.0f64;
    for (i, z) in all_poles.iter().enumerate() {
        let gap = all_poles
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| (q - z).norm())
            .fold(f64::INFINITY, f64::min);
        let radius = (0.5 * gap).min(0.5 * z.norm()).min(0.5);
        let pts = circle(*z, radius, 64);
        let vals: Vec<Mat> = pts.iter().map(|l| point.frame_direct(&floop.f_inv, *l)).collect();
        let scale = vals.iter().map(fnorm).fold(1.0, f64::max);
        let mut acc = linalg::zeros(n);
        for (l, v) in pts.iter().zip(&vals) {
            acc += v * (l - z);
        }
        acc /= Complex64::new(pts.len() as f64, 0.0);
        entirety = entirety.max(fnorm(&acc) / scale);
    }
    let m_inf = point.m.eval(Complex64::new(1e12 * pmax, 0.0));
    PointChecks {
        product_identity,
        entirety,
        reality: reality_of(point, floop, pair, lambda_samples),
        m_at_infinity: linalg::dist(&m_inf, &linalg::identity(n)),
    }
}

fn reality_of(point: &FactorizationPoint, floop: &RealityLoop, pair: &SymmetricPair, samples: &[Complex64]) -> f64 {
    let eval = |lam: Complex64| -> Result<Vec<Mat>, String> { Ok(vec![point.m.eval(lam), point.frame(floop, lam)]) };
    lax::reality_residual(eval, samples, pair, InvolutionLevel::Group).unwrap_or(f64::INFINITY)
}

/// Reality residual of the loop itself (and its inverse) on the samples.
pub fn loop_reality_residual(floop: &RealityLoop, pair: &SymmetricPair, samples: &[Complex64]) -> f64 {
    let eval = |lam: Complex64| -> Result<Vec<Mat>, String> { Ok(vec![floop.f.eval(lam), floop.f_inv.eval(lam)]) };
    lax::reality_residual(eval, samples, pair, InvolutionLevel::Group).unwrap_or(f64::INFINITY)
}

/// Default λ samples for reality checks: four points off both axes and off the poles.
pub fn default_lambda_samples() -> Vec<Complex64> {
    vec![
        Complex64::new(0.3, 0.2),
        Complex64::new(-0.7, 0.45),
        Complex64::new(1.9, -0.6),
        Complex64::new(0.15, 2.3),
    ]
}

/// Factorizations over a whole grid; failed nodes are holes.
#[derive(Clone, Debug)]
pub struct DressedGrid {
    pub grid: Grid,
    pub floop: RealityLoop,
    pub points: Vec<Option<FactorizationPoint>>,
    pub conds: Vec<f64>,
    pub holes: Vec<usize>,
}

/// Factors `f⁻¹ e^A(x, t)` at every node of the grid.
pub fn dress_grid(
    floop: &RealityLoop,
    pair: &SymmetricPair,
    grid: &Grid,
    flows: &[FlowTerm],
) -> Result<DressedGrid, DressingError> {
    for fl in flows {
        validate_flow(pair, &fl.b, fl.j)?;
    }
    let results: Vec<Result<FactorizationPoint, DressingError>> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let x = grid.point(k);
            let ex = VacuumExponent::new(pair, &x, flows.to_vec())?;
            birkhoff_factor(floop, &ex)
        })
        .collect();
    let mut points = Vec::with_capacity(grid.len());
    let mut conds = Vec::with_capacity(grid.len());
    let mut holes = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => {
                conds.push(p.cond);
                points.push(Some(p));
            }
            Err(DressingError::FactorizationSingular { cond }) => {
                conds.push(cond);
                holes.push(k);
                points.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(DressedGrid { grid: grid.clone(), floop: floop.clone(), points, conds, holes })
}

impl DressedGrid {
    pub fn point(&self, node: usize) -> Result<&FactorizationPoint, DressingError> {
        self.points[node].as_ref().ok_or(DressingError::Hole { node })
    }

    fn require_complete(&self) -> Result<(), DressingError> {
        match self.holes.first() {
            Some(&node) => Err(DressingError::Hole { node }),
            None => Ok(()),
        }
    }

    /// Per-node checks, in node order.
    pub fn check_all(&self, pair: &SymmetricPair, lambda_samples: &[Complex64]) -> Vec<Option<PointChecks>> {
        self.points
            .par_iter()
            .map(|p| p.as_ref().map(|p| check_point(p, &self.floop, pair, lambda_samples)))
            .collect()
    }

    /// `m₋₁` at every node.
    pub fn m_minus_1(&self) -> Result<Vec<Mat>, DressingError> {
        self.require_complete()?;
        Ok(self.points.iter().map(|p| p.as_ref().expect("complete").m_minus_1()).collect())
    }

    /// `Q_{c,0} … Q_{c,depth}` at every node: `out[n][node]`.
    pub fn q_fields(&self, c: &Mat, depth: usize) -> Result<Vec<Vec<Mat>>, DressingError> {
        self.require_complete()?;
        let per_node: Vec<Vec<Mat>> = self
            .points
            .par_iter()
            .map(|p| q_expand(p.as_ref().expect("complete"), c, depth))
            .collect::<Result<_, _>>()?;
        Ok((0..=depth).map(|lvl| per_node.iter().map(|q| q[lvl].clone()).collect()).collect())
    }
}

impl FrameProvider for DressedGrid {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn frame(&self, lambda: Complex64) -> Result<Vec<Mat>, LaxError> {
        if let Some(&node) = self.holes.first() {
            return Err(LaxError::EvaluationFailure(format!("node {node} is not factorizable")));
        }
        Ok(self
            .points
            .par_iter()
            .map(|p| p.as_ref().expect("complete").frame(&self.floop, lambda))
            .collect())
    }
}

/// Largest violation of `m₋₁ ∈ 𝒰₁` over a field, relative to `max(1, ‖m₋₁‖)`.
pub fn m_minus_1_membership(m1: &[Mat], pair: &SymmetricPair) -> (f64, usize) {
    let res: Vec<f64> = m1.iter().map(|m| pair.u1_residual(m) / fnorm(m).max(1.0)).collect();
    lax::argmax(&res)
}

/// `v = (m₋₁)^⊥`, the projection of `m₋₁` onto `𝒰₁ ∩ 𝒜⊥`.
pub fn extract_solution(dressed: &DressedGrid, pair: &SymmetricPair) -> Result<GridField, DressingError> {
    let m1 = dressed.m_minus_1()?;
    let (res, node) = m_minus_1_membership(&m1, pair);
    if !(res <= lax::TOL_SPACE) {
        return Err(DressingError::SpaceViolation { node, residual: res });
    }
    let proj = Projector::new(pair.u1_perp_a().clone()).map_err(|e| DressingError::InvalidLoop(e.to_string()))?;
    let values = m1.par_iter().map(|m| proj.apply(m)).collect();
    Ok(GridField::new(dressed.grid.clone(), values, ValueSpace::U1PerpA))
}

/// `Q_{c,0} … Q_{c,depth}`: coefficients of `m⁻¹ c m` in powers of `λ⁻¹`.
pub fn q_expand(point: &FactorizationPoint, c: &Mat, depth: usize) -> Result<Vec<Mat>, DressingError> {
    q_expand_bounded(point, c, depth, MAX_DEPTH)
}

pub fn q_expand_bounded(point: &FactorizationPoint, c: &Mat, depth: usize, bound: usize) -> Result<Vec<Mat>, DressingError> {
    if depth > bound {
        return Err(DressingError::DepthOverflow { requested: depth, max: bound });
    }
    let mser = point.m.series(depth);
    let mut inv = vec![linalg::identity(point.m.n())];
    for k in 1..=depth {
        let mut acc = linalg::zeros(point.m.n());
        for q in 1..=k {
            acc -= &mser[q] * &inv[k - q];
        }
        inv.push(acc);
    }
    Ok((0..=depth)
        .map(|k| {
            let mut acc = linalg::zeros(point.m.n());
            for a in 0..=k {
                acc += &inv[a] * c * &mser[k - a];
            }
            acc
        })
        .collect())
}

/// Residuals of `E⁻¹E_{x_i} = a_i λ + [a_i, v]` with finite-difference derivatives of
/// the dressed frame, one entry per sample λ (max over nodes and axes).
pub fn frame_equation_check(
    dressed: &DressedGrid,
    v: &GridField,
    pair: &SymmetricPair,
    lambda_samples: &[Complex64],
) -> Result<Vec<f64>, DressingError> {
    lambda_samples
        .iter()
        .map(|&lam| {
            let e = dressed.frame(lam)?;
            let theta = lax::lax_theta(v, lam, pair)?;
            let mut worst = 0.0f64;
            for axis in 0..dressed.grid.r() {
                let de = grid::derivative(&dressed.grid, &e, axis);
                for k in 0..e.len() {
                    let inv = linalg::inverse(&e[k]).ok_or(LaxError::SingularFrame { node: k })?;
                    worst = worst.max(linalg::dist(&(inv * &de[k]), &theta.coeffs[axis][k]));
                }
            }
            Ok(worst)
        })
        .collect()
}

/// Residual of `E⁻¹E_t = Σ_{k=0}^{j} Q_{b,k} λ^{j−k}` on the middle slice of a
/// family of dressed grids with time spacing `h_t`.
pub fn frame_t_equation_check(
    slices: &[DressedGrid],
    h_t: f64,
    b: &Mat,
    j: u32,
    lambda: Complex64,
) -> Result<f64, DressingError> {
    if slices.len() < 5 {
        return Err(DressingError::InvalidFlow("at least five time slices are needed".into()));
    }
    let frames: Vec<Vec<Mat>> = slices.iter().map(|s| s.frame(lambda)).collect::<Result<_, _>>()?;
    let mid = slices.len() / 2;
    let q = slices[mid].q_fields(b, j as usize)?;
    let mut worst = 0.0f64;
    for node in 0..slices[mid].grid.len() {
        let line: Vec<Mat> = frames.iter().map(|f| f[node].clone()).collect();
        let de = grid::derivative_at(|s| &line[s], mid, line.len(), h_t);
        let inv = linalg::inverse(&line[mid]).ok_or(LaxError::SingularFrame { node })?;
        let mut rhs = linalg::zeros(b.nrows());
        for (k, qk) in q.iter().enumerate() {
            rhs += &qk[node] * lambda.powu(j - k as u32);
        }
        worst = worst.max(linalg::dist(&(inv * de), &rhs));
    }
    Ok(worst)
}

/// Largest `λ⁻ⁿ` coefficient of `[m⁻¹c₁m, m⁻¹c₂m]` for `n ≤ depth`.
pub fn commuting_expansion_residual(point: &FactorizationPoint, c1: &Mat, c2: &Mat, depth: usize) -> Result<f64, DressingError> {
    let q1 = q_expand(point, c1, depth)?;
    let q2 = q_expand(point, c2, depth)?;
    let mut worst = 0.0f64;
    for nn in 0..=depth {
        let mut acc = linalg::zeros(c1.nrows());
        for a in 0..=nn {
            acc += commutator(&q1[a], &q2[nn - a]);
        }
        worst = worst.max(fnorm(&acc));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::builtin_pair;
    use crate::linalg::c;

    fn spec(poles: Vec<Complex64>, mirror: bool) -> LoopSpec {
        LoopSpec { poles, seed: 7, rank: 1, mirror }
    }

    #[test]
    fn loop_algebra() {
        let mut pi = linalg::zeros(2);
        pi[(0, 0)] = c(1.0, 0.0);
        let (g, gi) = simple_element(c(0.5, -1.0), &pi);
        let prod = g.mul(&gi).unwrap();
        for lam in [c(0.3, 0.1), c(-2.0, 1.0)] {
            assert!(linalg::dist(&prod.eval(lam), &linalg::identity(2)) < 1e-14);
            assert!(linalg::dist(&(g.eval(lam) * gi.eval(lam)), &linalg::identity(2)) < 1e-14);
        }
        assert!(RationalLoop::new(2, vec![c(0.0, 0.0)], vec![pi.clone()]).is_err());
        assert!(g.mul(&g).is_err());
    }

    #[test]
    fn reality_loop_cases() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let id = make_reality_loop(&LoopSpec { rank: 0, ..spec(vec![c(1.0, 1.0)], true) }, &p).unwrap();
        assert!(id.f.is_identity());
        let l = make_reality_loop(&spec(vec![c(1.0, 1.0)], true), &p).unwrap();
        assert_eq!(l.f.poles().len() + l.f_inv.poles().len(), 4);
        let samples: Vec<Complex64> = (0..8).map(|k| Complex64::from_polar(0.8 + 0.3 * k as f64, 0.4 + 0.7 * k as f64)).collect();
        let res = loop_reality_residual(&l, &p, &samples);
        assert!(res < 1e-10, "{res}");
        for lam in &samples {
            assert!(linalg::dist(&(l.f.eval(*lam) * l.f_inv.eval(*lam)), &linalg::identity(3)) < 1e-12);
        }
        let imag = make_reality_loop(&spec(vec![c(0.0, 1.5)], false), &p).unwrap();
        assert!(loop_reality_residual(&imag, &p, &samples) < 1e-12);
        assert!(matches!(
            make_reality_loop(&spec(vec![c(1.0, 1.0)], false), &p),
            Err(DressingError::RealityUnsolvable(_))
        ));
        assert!(matches!(make_reality_loop(&spec(vec![c(2.0, 0.0)], true), &p), Err(DressingError::RealityUnsolvable(_))));
    }

    #[test]
    fn unbalanced_loop_breaks_reality() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let u = Mat::from_fn(3, 1, |i, _| c(1.0 + i as f64, 0.5));
        let (g, gi) = simple_element(c(1.0, -1.0), &projection(&u).unwrap());
        let broken = RealityLoop { f: g, f_inv: gi };
        assert!(loop_reality_residual(&broken, &p, &default_lambda_samples()) > 1e-2);
    }

    #[test]
    fn identity_loop_factorization() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let ex = VacuumExponent::new(&p, &[0.3, -0.2], vec![]).unwrap();
        let pt = birkhoff_factor(&RealityLoop::identity(3), &ex).unwrap();
        assert!(pt.m.is_identity());
        let lam = c(0.4, 0.9);
        assert!(linalg::dist(&pt.frame_direct(&RationalLoop::identity(3), lam), &ex.eval(lam)) < 1e-15);
        let q = q_expand(&pt, &p.a()[0], 4).unwrap();
        assert!(linalg::dist(&q[0], &p.a()[0]) == 0.0 && q[1..].iter().all(|m| fnorm(m) == 0.0));
    }

    #[test]
    fn factorization_at_origin() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let l = make_reality_loop(&spec(vec![c(1.0, 1.0)], true), &p).unwrap();
        let ex = VacuumExponent::new(&p, &[0.0, 0.0], vec![]).unwrap();
        let pt = birkhoff_factor(&l, &ex).unwrap();
        let chk = check_point(&pt, &l, &p, &default_lambda_samples());
        assert!(chk.product_identity < 1e-10, "{chk:?}");
        // e^A = I, so f⁻¹ = E m⁻¹ with f⁻¹ a minus-loop: E ≡ I and m = f
        for lam in [c(0.2, 0.1), c(3.0, -1.0)] {
            assert!(linalg::dist(&pt.frame(&l, lam), &linalg::identity(3)) < 1e-10);
            assert!(linalg::dist(&pt.m.eval(lam), &l.f.eval(lam)) < 1e-10);
        }
    }

    #[test]
    fn dressed_point_checks() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let l = make_reality_loop(&spec(vec![c(1.0, 1.0)], true), &p).unwrap();
        let ex = VacuumExponent::new(&p, &[0.7, -1.1], vec![]).unwrap();
        let pt = birkhoff_factor(&l, &ex).unwrap();
        let chk = check_point(&pt, &l, &p, &default_lambda_samples());
        assert!(chk.product_identity < 1e-9 && chk.entirety < 1e-9 && chk.reality < 1e-9, "{chk:?}");
        assert!(pt.solver_gap < 1e-10);
        let m1 = pt.m_minus_1();
        assert!(p.u1_residual(&m1) < 1e-9, "{}", p.u1_residual(&m1));
        let q = q_expand(&pt, &p.a()[0], 6).unwrap();
        assert!(linalg::dist(&q[1], &commutator(&p.a()[0], &m1)) < 1e-12);
        // Q_0 = c lies in 𝒰₁, so σ acts on Q_n by (−1)^{n+1}
        for (nn, qn) in q.iter().enumerate() {
            let sign = if nn % 2 == 0 { -1.0 } else { 1.0 };
            assert!(linalg::dist(&p.sigma().apply(qn), &(qn * c(sign, 0.0))) < 1e-9);
        }
        assert!(commuting_expansion_residual(&pt, &p.a()[0], &p.a()[1], 6).unwrap() < 1e-9);
        assert!(matches!(q_expand(&pt, &p.a()[0], 13), Err(DressingError::DepthOverflow { .. })));
    }

    #[test]
    fn flow_validation() {
        let p = builtin_pair("sun_son", 3).unwrap();
        let b = p.a()[0].clone();
        assert!(validate_flow(&p, &b, 3).is_ok());
        assert!(validate_flow(&p, &b, 2).is_err());
        assert!(validate_flow(&p, &p.u1_perp_a().basis()[0], 3).is_err());
    }
}

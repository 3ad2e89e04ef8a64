//! Integral elements, polar spaces, Cartan characters and Cartan's test for the system
//! whose integral manifolds are curved flats, all at the identity by homogeneity.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::algebra::{orth_complement, AlgebraError, Subspace, SymmetricPair, TOL_ALG, TOL_RANK};
use crate::linalg::{self, commutator, fnorm, Mat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdsError {
    #[error("not an integral element: {reason} (residual {residual:.3e})")]
    NotIntegral { reason: &'static str, residual: f64 },
    #[error("invalid flag: {0}")]
    InvalidFlag(String),
    #[error("re-projection onto the integral variety did not converge (residual {0:.3e})")]
    ProbeFailed(f64),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// Newton tolerance of the re-projection in [`regularity_probe`].
pub const PROBE_TOL: f64 = 1e-10;
const PROBE_MAX_ITER: usize = 30;

/// An abelian subspace of `𝒰₁`, given by a basis.
#[derive(Clone, Debug)]
pub struct IntegralElement {
    basis: Vec<Mat>,
}

impl IntegralElement {
    pub fn new(pair: &SymmetricPair, basis: Vec<Mat>) -> Result<Self, EdsError> {
        for x in &basis {
            if x.nrows() != pair.n() || x.ncols() != pair.n() {
                return Err(AlgebraError::DimensionMismatch(x.nrows(), x.ncols()).into());
            }
            let res = pair.u1_residual(x);
            if res > TOL_ALG * fnorm(x).max(1.0) {
                return Err(EdsError::NotIntegral { reason: "basis vector outside 𝒰₁", residual: res });
            }
        }
        let scale = basis.iter().map(fnorm).fold(1.0, f64::max);
        let res = bracket_residual(&basis);
        if res > TOL_ALG * scale * scale {
            return Err(EdsError::NotIntegral { reason: "basis vectors do not commute", residual: res });
        }
        if !basis.is_empty() && linalg::rank(&linalg::realify_columns(&basis), TOL_RANK) < basis.len() {
            return Err(EdsError::NotIntegral { reason: "basis vectors are dependent", residual: 0.0 });
        }
        Ok(Self { basis })
    }

    pub fn zero() -> Self {
        Self { basis: Vec::new() }
    }

    pub fn basis(&self) -> &[Mat] {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }
}

fn bracket_residual(basis: &[Mat]) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..basis.len() {
        for b in (a + 1)..basis.len() {
            worst = worst.max(fnorm(&commutator(&basis[a], &basis[b])));
        }
    }
    worst
}

fn span_combination(basis: &[Mat], coeffs: impl Iterator<Item = f64>, n: usize) -> Mat {
    let mut out = linalg::zeros(n);
    for (b, w) in basis.iter().zip(coeffs) {
        out += b * Complex64::new(w, 0.0);
    }
    out
}

/// `H(E) = {y ∈ 𝒰₁ : [x, y] = 0 for all x ∈ E}`.
pub fn polar_space(e: &IntegralElement, pair: &SymmetricPair) -> Subspace {
    let u1 = pair.u1();
    if e.dim() == 0 {
        return u1.clone();
    }
    let n = pair.n();
    let rows_per = 2 * n * n;
    let mut m = DMatrix::<f64>::zeros(rows_per * e.dim(), u1.dim());
    for (a, x) in e.basis().iter().enumerate() {
        for (k, y) in u1.basis().iter().enumerate() {
            let col = linalg::realify(&commutator(x, y));
            m.view_mut((a * rows_per, k), (rows_per, 1)).copy_from(&col);
        }
    }
    let ns = linalg::null_space(&m, TOL_RANK);
    let basis = (0..ns.ncols()).map(|c| span_combination(u1.basis(), ns.column(c).iter().cloned(), n)).collect();
    Subspace::new(basis, pair.form_normalization())
}

/// `r(E) = dim H(E) − dim E − 1`.
pub fn polar_rank(e: &IntegralElement, pair: &SymmetricPair) -> i64 {
    polar_space(e, pair).dim() as i64 - e.dim() as i64 - 1
}

/// Whether every element of `inner` lies in `outer`.
pub fn subspace_contains(outer: &Subspace, inner: &Subspace) -> bool {
    if inner.dim() == 0 {
        return true;
    }
    let mut cols: Vec<Mat> = outer.basis().to_vec();
    let base = if cols.is_empty() { 0 } else { linalg::rank(&linalg::realify_columns(&cols), TOL_RANK) };
    cols.extend(inner.basis().iter().cloned());
    linalg::rank(&linalg::realify_columns(&cols), TOL_RANK) == base
}

/// A flag `E₀ = (0) ⊂ E₁ ⊂ … ⊂ E_n` with `E_j` spanned by the first `j` vectors.
#[derive(Clone, Debug)]
pub struct Flag {
    elements: Vec<IntegralElement>,
}

impl Flag {
    pub fn from_vectors(pair: &SymmetricPair, vectors: &[Mat]) -> Result<Self, EdsError> {
        if vectors.is_empty() {
            return Err(EdsError::InvalidFlag("a flag needs at least one vector".into()));
        }
        let mut elements = vec![IntegralElement::zero()];
        for j in 1..=vectors.len() {
            let e = IntegralElement::new(pair, vectors[..j].to_vec())
                .map_err(|err| EdsError::InvalidFlag(format!("E_{j}: {err}")))?;
            elements.push(e);
        }
        Ok(Self { elements })
    }

    /// `(0) ⊂ span(a₁) ⊂ span(a₁, a₂) ⊂ … ⊂ 𝒜`.
    pub fn canonical(pair: &SymmetricPair) -> Result<Self, EdsError> {
        Self::from_vectors(pair, pair.a())
    }

    pub fn elements(&self) -> &[IntegralElement] {
        &self.elements
    }

    /// Index `n` of the terminal element.
    pub fn length(&self) -> usize {
        self.elements.len() - 1
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CartanReport {
    pub pair: String,
    pub dim_u: usize,
    pub dim_u1: usize,
    pub rank: usize,
    /// `dim H(E_j)`, `j = 0 … n`.
    pub polar_dims: Vec<usize>,
    /// `r(E_j)`.
    pub polar_ranks: Vec<i64>,
    /// `c(E_j) = dim 𝒰 − dim H(E_j)`.
    pub c_levels: Vec<usize>,
    /// `s_j = dim H(E_{j−1}) − dim H(E_j)`, with `H(E_{−1}) = 𝒰`.
    pub characters: Vec<i64>,
    /// `c(F) = Σ_{j<n} c(E_j)`.
    pub c_flag: usize,
    /// Rank of the linearized integral-element conditions at `E_n`.
    pub codimension: usize,
    /// `H(E_{j+1}) ⊆ H(E_j)` for every `j`.
    pub polar_monotone: bool,
    /// Regularity probe per `E_j`, `j < n`.
    pub probes: Vec<ProbeResult>,
    pub regular_flag: bool,
    pub involutive: bool,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ProbeResult {
    pub level: usize,
    pub base_polar_dim: usize,
    pub sampled_polar_dims: Vec<usize>,
    pub max_projection_residual: f64,
    pub regular: bool,
}

/// Polar dimensions and characters of a flag.
pub fn cartan_characters(flag: &Flag, pair: &SymmetricPair) -> (Vec<Subspace>, CartanReport) {
    let polars: Vec<Subspace> = flag.elements().iter().map(|e| polar_space(e, pair)).collect();
    let dim_u = pair.dim_u();
    let polar_dims: Vec<usize> = polars.iter().map(|h| h.dim()).collect();
    let polar_ranks = flag.elements().iter().zip(&polar_dims).map(|(e, &h)| h as i64 - e.dim() as i64 - 1).collect();
    let c_levels: Vec<usize> = polar_dims.iter().map(|&h| dim_u - h).collect();
    let mut characters = Vec::with_capacity(polar_dims.len());
    let mut prev = dim_u;
    for &h in &polar_dims {
        characters.push(prev as i64 - h as i64);
        prev = h;
    }
    let n = flag.length();
    let c_flag = c_levels[..n].iter().sum();
    let polar_monotone = polars.windows(2).all(|w| subspace_contains(&w[0], &w[1]));
    let report = CartanReport {
        pair: pair.name().to_string(),
        dim_u,
        dim_u1: pair.u1().dim(),
        rank: pair.rank(),
        polar_dims,
        polar_ranks,
        c_levels,
        characters,
        c_flag,
        codimension: 0,
        polar_monotone,
        probes: Vec::new(),
        regular_flag: false,
        involutive: false,
    };
    (polars, report)
}

/// Rank of the linear conditions on `φ ∈ Hom(E, E⊥)` that keep `E` integral to first
/// order: `φ(x_b)` has no `𝒰₀` part, and `[x_a, φ(x_b)] + [φ(x_a), x_b] = 0`.
pub fn integral_variety_codimension(e: &IntegralElement, pair: &SymmetricPair) -> Result<usize, EdsError> {
    let k = e.dim();
    if k == 0 {
        return Ok(0);
    }
    let n = pair.n();
    let u = pair.u_space();
    let espace = Subspace::new(e.basis().to_vec(), pair.form_normalization());
    let perp = orth_complement(&espace, &u)?;
    let q = perp.dim();
    let u0 = pair.u0();
    let d0 = u0.dim();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| ((a + 1)..k).map(move |b| (a, b))).collect();
    let real_rows = 2 * n * n;
    let rows = k * d0 + pairs.len() * real_rows;
    let mut m = DMatrix::<f64>::zeros(rows, k * q);
    // unknown (b, l): φ(x_b) = Σ_l c_{b,l} perp_l
    for b in 0..k {
        for (l, w) in perp.basis().iter().enumerate() {
            let col = b * q + l;
            for (t, z) in u0.basis().iter().enumerate() {
                m[(b * d0 + t, col)] = pair.inner(w, z);
            }
            for (pi, &(a0, b0)) in pairs.iter().enumerate() {
                let contrib = if b == b0 {
                    commutator(&e.basis()[a0], w)
                } else if b == a0 {
                    commutator(w, &e.basis()[b0])
                } else {
                    continue;
                };
                let re = linalg::realify(&contrib);
                let base = k * d0 + pi * real_rows;
                for (r, v) in re.iter().enumerate() {
                    m[(base + r, col)] = *v;
                }
            }
        }
    }
    Ok(linalg::rank(&m, TOL_RANK))
}

/// Samples nearby integral elements of the same dimension and reports whether the polar
/// dimension stays at its value at `e`.
pub fn regularity_probe(
    e: &IntegralElement,
    pair: &SymmetricPair,
    level: usize,
    samples: usize,
    seed: u64,
    epsilon: f64,
) -> Result<ProbeResult, EdsError> {
    let base = polar_space(e, pair).dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u1 = pair.u1();
    let mut dims = Vec::with_capacity(samples);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let perturbed: Vec<Mat> = e
            .basis()
            .iter()
            .map(|x| {
                let dir = span_combination(u1.basis(), (0..u1.dim()).map(|_| rng.gen_range(-1.0..1.0)), pair.n());
                let w = epsilon * fnorm(x).max(1.0) / fnorm(&dir).max(f64::MIN_POSITIVE);
                x + dir * Complex64::new(w, 0.0)
            })
            .collect();
        let (projected, res) = project_to_integral(perturbed, pair)?;
        worst = worst.max(res);
        let sample = IntegralElement { basis: projected };
        dims.push(polar_space(&sample, pair).dim());
    }
    let regular = dims.iter().all(|&d| d == base);
    Ok(ProbeResult { level, base_polar_dim: base, sampled_polar_dims: dims, max_projection_residual: worst, regular })
}

/// Newton iteration with minimum-norm corrections inside `𝒰₁` on the bracket equations
/// `[x_a, x_b] = 0`.
fn project_to_integral(mut xs: Vec<Mat>, pair: &SymmetricPair) -> Result<(Vec<Mat>, f64), EdsError> {
    let k = xs.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| ((a + 1)..k).map(move |b| (a, b))).collect();
    if pairs.is_empty() {
        return Ok((xs, 0.0));
    }
    let n = pair.n();
    let u1 = pair.u1();
    let d1 = u1.dim();
    let real_rows = 2 * n * n;
    let mut res = bracket_residual(&xs);
    for _ in 0..PROBE_MAX_ITER {
        if res <= PROBE_TOL {
            return Ok((xs, res));
        }
        let mut jac = DMatrix::<f64>::zeros(pairs.len() * real_rows, k * d1);
        let mut f = DVector::<f64>::zeros(pairs.len() * real_rows);
        for (pi, &(a, b)) in pairs.iter().enumerate() {
            let base = pi * real_rows;
            f.rows_mut(base, real_rows).copy_from(&linalg::realify(&commutator(&xs[a], &xs[b])));
            for (l, y) in u1.basis().iter().enumerate() {
                let da = linalg::realify(&commutator(y, &xs[b]));
                let db = linalg::realify(&commutator(&xs[a], y));
                jac.view_mut((base, a * d1 + l), (real_rows, 1)).copy_from(&da);
                jac.view_mut((base, b * d1 + l), (real_rows, 1)).copy_from(&db);
            }
        }
        let svd = jac.svd(true, true);
        let smax = svd.singular_values.max();
        let step = svd
            .solve(&f, TOL_RANK * smax.max(f64::MIN_POSITIVE))
            .map_err(|_| EdsError::ProbeFailed(res))?;
        for (a, x) in xs.iter_mut().enumerate() {
            *x -= span_combination(u1.basis(), step.rows(a * d1, d1).iter().cloned(), n);
        }
        res = bracket_residual(&xs);
    }
    if res <= PROBE_TOL {
        Ok((xs, res))
    } else {
        Err(EdsError::ProbeFailed(res))
    }
}

/// Options for [`cartan_test`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProbeOptions {
    pub samples: usize,
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { samples: 50, seed: 0x5eed, epsilon: 1e-3 }
    }
}

/// Characters, probes of `E_0 … E_{n−1}`, and the codimension of the integral variety at
/// `E_n` compared with `c(F)`.
pub fn cartan_test(flag: &Flag, pair: &SymmetricPair, opts: &ProbeOptions) -> Result<CartanReport, EdsError> {
    let (_, mut report) = cartan_characters(flag, pair);
    let n = flag.length();
    report.codimension = integral_variety_codimension(&flag.elements()[n], pair)?;
    report.probes = (0..n)
        .map(|j| regularity_probe(&flag.elements()[j], pair, j, opts.samples, opts.seed.wrapping_add(j as u64), opts.epsilon))
        .collect::<Result<_, _>>()?;
    report.regular_flag = report.codimension == report.c_flag;
    report.involutive = report.regular_flag && report.probes.iter().all(|p| p.regular);
    Ok(report)
}

/// Cartan's test on the canonical flag, with the tail characters `s_2 … s_r` checked to
/// vanish.
#[derive(Clone, Debug, Serialize)]
pub struct InvolutivitySummary {
    pub report: CartanReport,
    pub tail_characters_vanish: bool,
    /// `s₀ = dim 𝒰 − dim 𝒰₁` and `s₁ = dim 𝒰₁ − r`.
    pub character_formula_holds: bool,
    pub character_sum_holds: bool,
}

pub fn involutivity_report(pair: &SymmetricPair, opts: &ProbeOptions) -> Result<InvolutivitySummary, EdsError> {
    let flag = Flag::canonical(pair)?;
    let report = cartan_test(&flag, pair, opts)?;
    let s = &report.characters;
    let tail = s.iter().skip(2).all(|&x| x == 0);
    let formula = s.first() == Some(&((report.dim_u - report.dim_u1) as i64))
        && s.get(1) == Some(&(report.dim_u1 as i64 - report.rank as i64));
    let sum = s.iter().sum::<i64>() == report.dim_u as i64 - *report.polar_dims.last().unwrap_or(&0) as i64;
    Ok(InvolutivitySummary { report, tail_characters_vanish: tail, character_formula_holds: formula, character_sum_holds: sum })
}

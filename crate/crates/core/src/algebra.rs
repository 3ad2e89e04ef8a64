//! Matrix realization of a symmetric pair `(U, U₀)`.
//!
//! The complex algebra is `sl(n, ℂ)` (traceless n×n matrices). A pair is fixed by
//! two commuting involutions: `τ` (conjugate linear, its fixed set is the real form
//! `𝒰`) and `σ` (complex linear, splitting `𝒰 = 𝒰₀ ⊕ 𝒰₁`). The bilinear form is
//! `(X, Y) = c · Re tr(XY)` with `c = form_normalization`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, commutator, conj, fnorm, Mat};

/// Membership and identity tolerance for algebra-level checks.
pub const TOL_ALG: f64 = 1e-12;
/// Relative singular-value threshold for rank and null-space decisions.
pub const TOL_RANK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("dimension mismatch: {0}×{0} vs {1}×{1}")]
    DimensionMismatch(usize, usize),
    #[error("element is not in the real form (‖τX − X‖ = {0:.3e})")]
    NotInRealForm(f64),
    #[error("element is not in 𝒰₁ (‖σa + a‖ = {0:.3e})")]
    NotInU1(f64),
    #[error("bilinear form is degenerate on the subspace (σ_min/σ_max = {0:.3e})")]
    DegenerateForm(f64),
    #[error("unknown symmetric pair `{0}`")]
    UnknownPair(String),
    #[error("invalid involution: {0}")]
    InvalidInvolution(String),
    #[error("invalid pair data: {0}")]
    InvalidPair(String),
}

/// An element of the complex algebra `sl(n, ℂ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlgebraElement(Mat);

impl AlgebraElement {
    /// Wraps a square traceless matrix.
    pub fn new(m: Mat) -> Result<Self, AlgebraError> {
        if m.nrows() != m.ncols() {
            return Err(AlgebraError::DimensionMismatch(m.nrows(), m.ncols()));
        }
        let tr = m.trace().norm();
        if tr > TOL_ALG * fnorm(&m).max(1.0) {
            return Err(AlgebraError::InvalidPair(format!(
                "trace {tr:.3e} exceeds tolerance"
            )));
        }
        Ok(Self(m))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_matrix(self) -> Mat {
        self.0
    }
}

/// `X ↦ sign · J · op(X) · J⁻¹`, where `op` optionally conjugates entrywise and/or
/// transposes. An automorphism of the bracket needs `sign = −1` exactly when
/// `op` transposes.
#[derive(Clone, Debug)]
pub struct InvolutionSpec {
    pub conjugates: bool,
    pub transposes: bool,
    pub j: Mat,
    pub sign: f64,
    j_inv: Mat,
}

impl InvolutionSpec {
    pub fn new(conjugates: bool, transposes: bool, j: Mat, sign: f64) -> Result<Self, AlgebraError> {
        if sign != 1.0 && sign != -1.0 {
            return Err(AlgebraError::InvalidInvolution(format!("sign must be ±1, got {sign}")));
        }
        if transposes != (sign < 0.0) {
            return Err(AlgebraError::InvalidInvolution(
                "sign must be −1 exactly when the map transposes".into(),
            ));
        }
        if j.nrows() != j.ncols() {
            return Err(AlgebraError::DimensionMismatch(j.nrows(), j.ncols()));
        }
        let j_inv = linalg::inverse(&j)
            .ok_or_else(|| AlgebraError::InvalidInvolution("J is singular".into()))?;
        Ok(Self { conjugates, transposes, j, sign, j_inv })
    }

    fn op(&self, x: &Mat) -> Mat {
        match (self.conjugates, self.transposes) {
            (false, false) => x.clone(),
            (true, false) => conj(x),
            (false, true) => x.transpose(),
            (true, true) => x.adjoint(),
        }
    }

    /// Action on the algebra.
    pub fn apply(&self, x: &Mat) -> Mat {
        let y = &self.j * self.op(x) * &self.j_inv;
        if self.sign < 0.0 {
            -y
        } else {
            y
        }
    }

    /// Action on the group, the lift of [`apply`](Self::apply): `J·op(g)·J⁻¹`, or
    /// `J·op(g)⁻¹·J⁻¹` when the map transposes.
    pub fn apply_group(&self, g: &Mat) -> Option<Mat> {
        let o = self.op(g);
        let core = if self.transposes { linalg::inverse(&o)? } else { o };
        Some(&self.j * core * &self.j_inv)
    }

    pub fn n(&self) -> usize {
        self.j.nrows()
    }
}

/// A real linear subspace of the algebra, given by a basis.
#[derive(Clone, Debug)]
pub struct Subspace {
    basis: Vec<Mat>,
    form_scale: f64,
}

impl Subspace {
    pub fn new(basis: Vec<Mat>, form_scale: f64) -> Self {
        Self { basis, form_scale }
    }

    pub fn basis(&self) -> &[Mat] {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Gram matrix of the bilinear form on the basis.
    pub fn gram(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| form(&self.basis[i], &self.basis[j], self.form_scale))
    }

    /// Linear independence at `TOL_RANK`.
    pub fn is_independent(&self) -> bool {
        linalg::rank(&linalg::realify_columns(&self.basis), TOL_RANK) == self.dim()
    }

    fn combine(&self, coeffs: &DVector<f64>) -> Mat {
        let n = self.basis.first().map(|b| b.nrows()).unwrap_or(0);
        let mut out = linalg::zeros(n);
        for (k, b) in self.basis.iter().enumerate() {
            out += b * Complex64::new(coeffs[k], 0.0);
        }
        out
    }

    /// Coordinates of `x` with respect to the basis, through the Gram system.
    pub fn coordinates(&self, x: &Mat) -> Result<DVector<f64>, AlgebraError> {
        let g = self.gram();
        let (smin, smax) = if self.dim() == 0 { (1.0, 1.0) } else { linalg::singular_extremes(&g) };
        if smin <= TOL_RANK * smax {
            return Err(AlgebraError::DegenerateForm(smin / smax.max(f64::MIN_POSITIVE)));
        }
        let rhs = DVector::from_iterator(self.dim(), self.basis.iter().map(|b| form(x, b, self.form_scale)));
        Ok(g.lu().solve(&rhs).expect("gram checked non-singular"))
    }
}

fn form(x: &Mat, y: &Mat, scale: f64) -> f64 {
    // Re tr(XY) without forming the product
    let n = x.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..n {
            acc += (x[(i, k)] * y[(k, i)]).re;
        }
    }
    scale * acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PairKind {
    /// `SU(n)/SO(n)`: `τX = −X̄ᵀ`, `σX = −Xᵀ` (equal to `X̄` on `su(n)`).
    SunSon,
    Custom,
}

/// The symmetric pair with its Cartan decomposition and regular basis.
#[derive(Clone, Debug)]
pub struct SymmetricPair {
    name: String,
    kind: PairKind,
    n: usize,
    tau: InvolutionSpec,
    sigma: InvolutionSpec,
    u0: Subspace,
    u1: Subspace,
    a: Vec<Mat>,
    u1_perp_a: Subspace,
    form_normalization: f64,
}

/// Raw data for a pair not covered by [`builtin_pair`].
#[derive(Clone, Debug)]
pub struct CustomPairData {
    pub name: String,
    pub tau: InvolutionSpec,
    pub sigma: InvolutionSpec,
    pub basis_u0: Vec<Mat>,
    pub basis_u1: Vec<Mat>,
    pub basis_a: Vec<Mat>,
    pub form_normalization: f64,
}

impl SymmetricPair {
    /// Builds a pair from raw data. Invariants are *not* enforced here; run
    /// [`check_invariants`](Self::check_invariants) to audit the result.
    pub fn custom(data: CustomPairData) -> Result<Self, AlgebraError> {
        let n = data.tau.n();
        let all = data
            .basis_u0
            .iter()
            .chain(&data.basis_u1)
            .chain(&data.basis_a)
            .chain(std::iter::once(&data.sigma.j));
        for m in all {
            if m.nrows() != n || m.ncols() != n {
                return Err(AlgebraError::DimensionMismatch(n, m.nrows()));
            }
        }
        if data.basis_a.is_empty() {
            return Err(AlgebraError::InvalidPair("empty regular basis".into()));
        }
        let c = data.form_normalization;
        let u0 = Subspace::new(orthogonalize(&data.basis_u0, c)?, c);
        let u1 = Subspace::new(orthogonalize(&data.basis_u1, c)?, c);
        let a_space = Subspace::new(data.basis_a.clone(), c);
        let u1_perp_a = orth_complement(&a_space, &u1)?;
        Ok(Self {
            name: data.name,
            kind: PairKind::Custom,
            n,
            tau: data.tau,
            sigma: data.sigma,
            u0,
            u1,
            a: data.basis_a,
            u1_perp_a,
            form_normalization: c,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn kind(&self) -> PairKind {
        self.kind
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn rank(&self) -> usize {
        self.a.len()
    }
    pub fn tau(&self) -> &InvolutionSpec {
        &self.tau
    }
    pub fn sigma(&self) -> &InvolutionSpec {
        &self.sigma
    }
    pub fn u0(&self) -> &Subspace {
        &self.u0
    }
    pub fn u1(&self) -> &Subspace {
        &self.u1
    }
    /// The regular basis `a₁ … a_r` of the maximal abelian subspace.
    pub fn a(&self) -> &[Mat] {
        &self.a
    }
    pub fn a_space(&self) -> Subspace {
        Subspace::new(self.a.clone(), self.form_normalization)
    }
    /// `𝒰₁ ∩ 𝒜⊥`.
    pub fn u1_perp_a(&self) -> &Subspace {
        &self.u1_perp_a
    }
    /// Basis of the whole real form `𝒰 = 𝒰₀ ⊕ 𝒰₁`.
    pub fn u_space(&self) -> Subspace {
        let basis = self.u0.basis().iter().chain(self.u1.basis()).cloned().collect();
        Subspace::new(basis, self.form_normalization)
    }
    pub fn dim_u(&self) -> usize {
        self.u0.dim() + self.u1.dim()
    }
    pub fn form_normalization(&self) -> f64 {
        self.form_normalization
    }

    pub fn inner(&self, x: &Mat, y: &Mat) -> f64 {
        form(x, y, self.form_normalization)
    }

    /// Residual of `x ∈ 𝒰₁`: `‖σx + x‖ + ‖τx − x‖`.
    pub fn u1_residual(&self, x: &Mat) -> f64 {
        fnorm(&(self.sigma.apply(x) + x)) + fnorm(&(self.tau.apply(x) - x))
    }

    /// Residual of `x ∈ 𝒰₀`: `‖σx − x‖ + ‖τx − x‖`.
    pub fn u0_residual(&self, x: &Mat) -> f64 {
        fnorm(&(self.sigma.apply(x) - x)) + fnorm(&(self.tau.apply(x) - x))
    }

    /// Group-level `τ`.
    pub fn tau_group(&self, g: &Mat) -> Option<Mat> {
        self.tau.apply_group(g)
    }

    /// Group-level `σ`.
    pub fn sigma_group(&self, g: &Mat) -> Option<Mat> {
        self.sigma.apply_group(g)
    }

    /// Audits every structural invariant of the pair.
    pub fn check_invariants(&self) -> Vec<InvariantCheck> {
        let mut out = Vec::new();
        let scale_of = |ms: &[Mat]| ms.iter().map(fnorm).fold(1.0f64, f64::max);
        let u_basis: Vec<Mat> = self.u_space().basis().to_vec();
        // complex span of 𝒰 is 𝒢, so 𝒰 ∪ i𝒰 spans over ℝ
        let spanning: Vec<Mat> = u_basis
            .iter()
            .flat_map(|b| [b.clone(), b * linalg::I])
            .collect();
        let s = scale_of(&spanning);

        let max_over = |f: &dyn Fn(&Mat) -> f64, ms: &[Mat]| ms.iter().map(f).fold(0.0f64, f64::max);

        out.push(InvariantCheck::new(
            "tau_involutive",
            max_over(&|x| linalg::dist(&self.tau.apply(&self.tau.apply(x)), x), &spanning) / s,
            TOL_ALG,
        ));
        out.push(InvariantCheck::new(
            "sigma_involutive",
            max_over(&|x| linalg::dist(&self.sigma.apply(&self.sigma.apply(x)), x), &spanning) / s,
            TOL_ALG,
        ));
        out.push(InvariantCheck::new(
            "tau_sigma_commute",
            max_over(
                &|x| linalg::dist(&self.tau.apply(&self.sigma.apply(x)), &self.sigma.apply(&self.tau.apply(x))),
                &spanning,
            ) / s,
            TOL_ALG,
        ));
        let all_basis: Vec<Mat> = u_basis.iter().chain(&self.a).cloned().collect();
        out.push(InvariantCheck::new(
            "traceless",
            max_over(&|x| x.trace().norm(), &all_basis) / scale_of(&all_basis),
            TOL_ALG,
        ));
        out.push(InvariantCheck::new(
            "u0_fixed_by_sigma_and_tau",
            max_over(&|x| self.u0_residual(x), self.u0.basis()) / scale_of(self.u0.basis()),
            TOL_ALG,
        ));
        out.push(InvariantCheck::new(
            "u1_negated_by_sigma_fixed_by_tau",
            max_over(&|x| self.u1_residual(x), self.u1.basis()) / scale_of(self.u1.basis()),
            TOL_ALG,
        ));
        let spans_g = linalg::rank(&linalg::realify_columns(&u_basis), TOL_RANK);
        out.push(InvariantCheck {
            name: "u0_u1_span_real_form".into(),
            residual: (spans_g as f64 - (self.n * self.n - 1) as f64).abs(),
            tolerance: 0.0,
            passed: spans_g == self.n * self.n - 1 && spans_g == u_basis.len(),
        });

        let mut br = [0.0f64; 3];
        for x in self.u0.basis() {
            for y in self.u0.basis() {
                br[0] = br[0].max(self.u0_residual(&commutator(x, y)));
            }
            for y in self.u1.basis() {
                br[1] = br[1].max(self.u1_residual(&commutator(x, y)));
            }
        }
        for x in self.u1.basis() {
            for y in self.u1.basis() {
                br[2] = br[2].max(self.u0_residual(&commutator(x, y)));
            }
        }
        let s2 = s * s;
        out.push(InvariantCheck::new("bracket_u0_u0_in_u0", br[0] / s2, TOL_ALG));
        out.push(InvariantCheck::new("bracket_u0_u1_in_u1", br[1] / s2, TOL_ALG));
        out.push(InvariantCheck::new("bracket_u1_u1_in_u0", br[2] / s2, TOL_ALG));

        let sa = scale_of(&self.a);
        let mut comm = 0.0f64;
        for x in &self.a {
            for y in &self.a {
                comm = comm.max(fnorm(&commutator(x, y)));
            }
        }
        out.push(InvariantCheck::new("a_basis_abelian", comm / (sa * sa), TOL_ALG));
        out.push(InvariantCheck::new(
            "a_basis_in_u1",
            max_over(&|x| self.u1_residual(x), &self.a) / sa,
            TOL_ALG,
        ));
        let all_regular = self.a.iter().all(|a| is_regular(a, self).map(|r| r.0).unwrap_or(false));
        out.push(InvariantCheck {
            name: "a_basis_regular".into(),
            residual: if all_regular { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: all_regular,
        });

        let g = self.u_space().gram();
        let (smin, smax) = linalg::singular_extremes(&g);
        out.push(InvariantCheck {
            name: "form_nondegenerate".into(),
            residual: smin / smax.max(f64::MIN_POSITIVE),
            tolerance: TOL_RANK,
            passed: smin > TOL_RANK * smax,
        });

        // ad(a_i) is injective on 𝒰₁ ∩ 𝒜⊥
        let mut worst = f64::INFINITY;
        for a in &self.a {
            let cols: Vec<Mat> = self.u1_perp_a.basis().iter().map(|y| commutator(a, y)).collect();
            if cols.is_empty() {
                continue;
            }
            let m = linalg::realify_columns(&cols);
            let (lo, hi) = linalg::singular_extremes(&m);
            worst = worst.min(lo / hi.max(f64::MIN_POSITIVE));
        }
        if worst.is_finite() {
            out.push(InvariantCheck {
                name: "ad_a_injective_on_u1_perp_a".into(),
                residual: worst,
                tolerance: TOL_RANK,
                passed: worst > TOL_RANK,
            });
        }
        out
    }
}

/// Largest relative violation of `([z, x], y) + (x, [z, y]) = 0` over `samples` random
/// triples drawn uniformly from the unit cube of the `𝒰` basis coordinates.
pub fn form_ad_invariance(pair: &SymmetricPair, samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let u = pair.u_space();
    let mut draw = || {
        let mut x = linalg::zeros(pair.n());
        for b in u.basis() {
            x += b * Complex64::new(rng.gen_range(-1.0..1.0), 0.0);
        }
        x
    };
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (x, y, z) = (draw(), draw(), draw());
        let lhs = pair.inner(&commutator(&z, &x), &y) + pair.inner(&x, &commutator(&z, &y));
        let scale = (fnorm(&x) * fnorm(&y) * fnorm(&z) * pair.form_normalization().abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(lhs.abs() / scale);
    }
    worst
}

/// Result of one named invariant check.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct InvariantCheck {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl InvariantCheck {
    fn new(name: &str, residual: f64, tolerance: f64) -> Self {
        Self { name: name.into(), residual, tolerance, passed: residual <= tolerance }
    }
}

/// Gram–Schmidt against `|(·,·)|`.
fn orthogonalize(basis: &[Mat], scale: f64) -> Result<Vec<Mat>, AlgebraError> {
    let mut out: Vec<(Mat, f64)> = Vec::with_capacity(basis.len());
    for b in basis {
        let mut v = b.clone();
        for (q, qq) in &out {
            let coef = form(&v, q, scale) / qq;
            v -= q * Complex64::new(coef, 0.0);
        }
        let vv = form(&v, &v, scale);
        let size = fnorm(b).max(1.0);
        if vv.abs() <= TOL_RANK * size * size * scale.abs() {
            return Err(AlgebraError::DegenerateForm(vv.abs()));
        }
        let v = &v * Complex64::new(1.0 / vv.abs().sqrt(), 0.0);
        let vv = form(&v, &v, scale);
        out.push((v, vv));
    }
    Ok(out.into_iter().map(|(v, _)| v).collect())
}

/// Lie bracket `XY − YX`.
pub fn bracket(x: &AlgebraElement, y: &AlgebraElement) -> Result<AlgebraElement, AlgebraError> {
    if x.n() != y.n() {
        return Err(AlgebraError::DimensionMismatch(x.n(), y.n()));
    }
    Ok(AlgebraElement(commutator(&x.0, &y.0)))
}

/// The ad-invariant form `c · Re tr(XY)`.
pub fn inner(x: &AlgebraElement, y: &AlgebraElement, pair: &SymmetricPair) -> Result<f64, AlgebraError> {
    if x.n() != y.n() {
        return Err(AlgebraError::DimensionMismatch(x.n(), y.n()));
    }
    Ok(pair.inner(&x.0, &y.0))
}

/// Splits `X ∈ 𝒰` into its `𝒰₀` and `𝒰₁` components.
pub fn sigma_split(x: &Mat, pair: &SymmetricPair) -> Result<(Mat, Mat), AlgebraError> {
    if x.nrows() != pair.n {
        return Err(AlgebraError::DimensionMismatch(x.nrows(), pair.n));
    }
    let off = linalg::dist(&pair.tau.apply(x), x);
    if off > TOL_ALG * fnorm(x).max(1.0) {
        return Err(AlgebraError::NotInRealForm(off));
    }
    let sx = pair.sigma.apply(x);
    let half = Complex64::new(0.5, 0.0);
    Ok(((x + &sx) * half, (x - &sx) * half))
}

/// `{y ∈ S : [a, y] = 0}` as the null space of `y ↦ [a, y]` on `S`.
pub fn centralizer(a: &Mat, s: &Subspace) -> Subspace {
    if s.dim() == 0 {
        return s.clone();
    }
    let cols: Vec<Mat> = s.basis().iter().map(|y| commutator(a, y)).collect();
    let ns = linalg::null_space(&linalg::realify_columns(&cols), TOL_RANK);
    let basis = (0..ns.ncols()).map(|k| s.combine(&ns.column(k).into_owned())).collect();
    Subspace::new(basis, s.form_scale)
}

/// Diagnostics returned by [`is_regular`].
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RegularityDiagnostics {
    pub centralizer_dim: usize,
    pub ad_rank_u0_to_u1: usize,
    pub expected_centralizer_dim: usize,
    pub expected_ad_rank: usize,
}

/// Regularity: the centralizer in `𝒰₁` has dimension `r`, and `ad(a): 𝒰₀ → 𝒰₁` has
/// rank `dim 𝒰₁ − r` (the orbit sweep of `𝒜` is open).
pub fn is_regular(a: &Mat, pair: &SymmetricPair) -> Result<(bool, RegularityDiagnostics), AlgebraError> {
    let off = fnorm(&(pair.sigma.apply(a) + a));
    if off > TOL_ALG * fnorm(a).max(1.0) {
        return Err(AlgebraError::NotInU1(off));
    }
    let r = pair.rank();
    let cdim = centralizer(a, pair.u1()).dim();
    let cols: Vec<Mat> = pair.u0().basis().iter().map(|y| commutator(a, y)).collect();
    let ad_rank = if cols.is_empty() { 0 } else { linalg::rank(&linalg::realify_columns(&cols), TOL_RANK) };
    let expected_rank = pair.u1().dim() - r;
    let diag = RegularityDiagnostics {
        centralizer_dim: cdim,
        ad_rank_u0_to_u1: ad_rank,
        expected_centralizer_dim: r,
        expected_ad_rank: expected_rank,
    };
    Ok((cdim == r && ad_rank == expected_rank, diag))
}

/// `{y ∈ within : (y, S) = 0}`.
pub fn orth_complement(s: &Subspace, within: &Subspace) -> Result<Subspace, AlgebraError> {
    let g = within.gram();
    if within.dim() > 0 {
        let (smin, smax) = linalg::singular_extremes(&g);
        if smin <= TOL_RANK * smax {
            return Err(AlgebraError::DegenerateForm(smin / smax.max(f64::MIN_POSITIVE)));
        }
    }
    if s.dim() == 0 {
        return Ok(within.clone());
    }
    let m = DMatrix::from_fn(s.dim(), within.dim(), |l, k| {
        form(&within.basis()[k], &s.basis()[l], within.form_scale)
    });
    let ns = linalg::null_space(&m, TOL_RANK);
    let basis = (0..ns.ncols()).map(|k| within.combine(&ns.column(k).into_owned())).collect();
    Ok(Subspace::new(basis, within.form_scale))
}

/// Form-orthogonal projection onto `S`.
pub fn project(x: &Mat, s: &Subspace) -> Result<Mat, AlgebraError> {
    if s.dim() == 0 {
        return Ok(linalg::zeros(x.nrows()));
    }
    let coeffs = s.coordinates(x)?;
    Ok(s.combine(&coeffs))
}

/// Projector onto a subspace, with the Gram system factored once.
#[derive(Clone, Debug)]
pub struct Projector {
    space: Subspace,
    gram_inv: DMatrix<f64>,
}

impl Projector {
    pub fn new(space: Subspace) -> Result<Self, AlgebraError> {
        let g = space.gram();
        if space.dim() > 0 {
            let (smin, smax) = linalg::singular_extremes(&g);
            if smin <= TOL_RANK * smax {
                return Err(AlgebraError::DegenerateForm(smin / smax.max(f64::MIN_POSITIVE)));
            }
        }
        let gram_inv = g.try_inverse().unwrap_or_else(|| DMatrix::zeros(0, 0));
        Ok(Self { space, gram_inv })
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let d = self.space.dim();
        if d == 0 {
            return linalg::zeros(x.nrows());
        }
        let rhs = DVector::from_iterator(d, self.space.basis().iter().map(|b| form(x, b, self.space.form_scale)));
        self.space.combine(&(&self.gram_inv * rhs))
    }
}

/// The regular basis used for `SU(n)/SO(n)`: diagonal entries are the centered
/// powers `t_j^k` of `t_j = j + 1`, scaled to unit maximum, times `i`.
fn sun_son_regular_basis(n: usize) -> Vec<Mat> {
    (1..n)
        .map(|k| {
            let raw: Vec<f64> = (0..n).map(|j| ((j + 1) as f64).powi(k as i32)).collect();
            let mean = raw.iter().sum::<f64>() / n as f64;
            let centered: Vec<f64> = raw.iter().map(|x| x - mean).collect();
            let top = centered.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let mut m = linalg::zeros(n);
            for j in 0..n {
                m[(j, j)] = Complex64::new(0.0, centered[j] / top);
            }
            m
        })
        .collect()
}

/// Built-in pairs. Only `sun_son` (`SU(n)/SO(n)`) is provided.
pub fn builtin_pair(name: &str, n: usize) -> Result<SymmetricPair, AlgebraError> {
    if name != "sun_son" {
        return Err(AlgebraError::UnknownPair(name.into()));
    }
    if n < 2 {
        return Err(AlgebraError::InvalidPair(format!("sun_son needs n ≥ 2, got {n}")));
    }
    let id = linalg::identity(n);
    let tau = InvolutionSpec::new(true, true, id.clone(), -1.0)?;
    let sigma = InvolutionSpec::new(false, true, id, -1.0)?;
    let one = Complex64::new(1.0, 0.0);
    let mut u0 = Vec::new();
    let mut u1 = Vec::new();
    for k in 0..n {
        for l in (k + 1)..n {
            let mut x = linalg::zeros(n);
            x[(k, l)] = one;
            x[(l, k)] = -one;
            u0.push(x);
            let mut y = linalg::zeros(n);
            y[(k, l)] = linalg::I;
            y[(l, k)] = linalg::I;
            u1.push(y);
        }
    }
    for k in 0..n - 1 {
        let mut y = linalg::zeros(n);
        y[(k, k)] = linalg::I;
        y[(k + 1, k + 1)] = -linalg::I;
        u1.push(y);
    }
    let mut pair = SymmetricPair::custom(CustomPairData {
        name: format!("sun_son/{n}"),
        tau,
        sigma,
        basis_u0: u0,
        basis_u1: u1,
        basis_a: sun_son_regular_basis(n),
        form_normalization: 1.0,
    })?;
    pair.kind = PairKind::SunSon;
    Ok(pair)
}

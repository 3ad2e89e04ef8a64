//! Small dense helpers shared by the algebra, dressing and EDS code.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Complex n×n matrix; every field value and algebra element is stored this way.
pub type Mat = DMatrix<Complex64>;

pub const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity(n: usize) -> Mat {
    Mat::identity(n, n)
}

pub fn zeros(n: usize) -> Mat {
    Mat::zeros(n, n)
}

#[inline]
pub fn commutator(x: &Mat, y: &Mat) -> Mat {
    x * y - y * x
}

#[inline]
pub fn conj(x: &Mat) -> Mat {
    x.map(|z| z.conj())
}

pub fn scale(x: &Mat, s: f64) -> Mat {
    x * Complex64::new(s, 0.0)
}

pub fn cscale(x: &Mat, s: Complex64) -> Mat {
    x * s
}

/// Frobenius norm.
#[inline]
pub fn fnorm(x: &Mat) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn dist(x: &Mat, y: &Mat) -> f64 {
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Inverse through LU; `None` when the pivot ratio signals numerical singularity.
pub fn inverse(x: &Mat) -> Option<Mat> {
    let n = x.nrows();
    let det = x.determinant();
    let s = (fnorm(x) / (n as f64).sqrt()).max(1e-300);
    if det.norm() <= 1e-14 * s.powi(n as i32) {
        return None;
    }
    let inv = x.clone().try_inverse()?;
    if inv.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return None;
    }
    Some(inv)
}

/// Column-major stacking of the real and imaginary parts of a matrix.
pub fn realify(x: &Mat) -> DVector<f64> {
    let m = x.len();
    let mut out = DVector::zeros(2 * m);
    for (k, z) in x.iter().enumerate() {
        out[k] = z.re;
        out[m + k] = z.im;
    }
    out
}

/// Right-null space of a real matrix: columns of the returned matrix span
/// `{y : A y ≈ 0}`, with singular values at or below `rel_tol · σ_max` treated as zero.
pub fn null_space(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let cols = a.ncols();
    if cols == 0 {
        return DMatrix::zeros(0, 0);
    }
    // pad so the SVD returns a full V
    let padded = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v requested");
    let smax = svd.singular_values.max();
    let thr = rel_tol * smax;
    let null_idx: Vec<usize> = (0..cols)
        .filter(|&k| svd.singular_values[k] <= thr)
        .collect();
    let mut out = DMatrix::zeros(cols, null_idx.len());
    for (j, &k) in null_idx.iter().enumerate() {
        out.set_column(j, &v_t.row(k).transpose());
    }
    out
}

/// Numerical rank with a relative singular-value threshold.
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Smallest and largest singular values.
pub fn singular_extremes(a: &DMatrix<f64>) -> (f64, f64) {
    let sv = a.clone().svd(false, false).singular_values;
    (sv.min(), sv.max())
}

/// Matrix whose columns are `realify` images of the given matrices.
pub fn realify_columns(cols: &[Mat]) -> DMatrix<f64> {
    if cols.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    let rows = 2 * cols[0].len();
    let mut out = DMatrix::zeros(rows, cols.len());
    for (j, m) in cols.iter().enumerate() {
        out.set_column(j, &realify(m));
    }
    out
}

/// Matrix exponential. Diagonal arguments take the elementwise fast path.
pub fn expm(x: &Mat) -> Mat {
    let n = x.nrows();
    let off: f64 = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| x[(i, j)].norm())
        .sum();
    if off == 0.0 {
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = x[(i, i)].exp();
        }
        return out;
    }
    x.exp()
}

/// Linear combination `Σ w_k · m_k` of equally shaped matrices.
pub fn lincomb(terms: &[(Complex64, &Mat)]) -> Mat {
    let (r, cc) = terms[0].1.shape();
    let mut out = Mat::zeros(r, cc);
    for (w, m) in terms {
        out.zip_apply(*m, |o, v| *o += *w * v);
    }
    out
}

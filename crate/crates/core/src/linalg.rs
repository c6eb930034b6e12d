//! Complex dense linear-algebra helpers.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector, Dyn};
use nalgebra_lapack::Cholesky;

use crate::error::{IsacError, Result};

pub use nalgebra::Complex;

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;
pub type RVector = DVector<f64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const J: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Unit-modulus phasor e^{jφ}.
#[inline]
pub fn phasor(phi: f64) -> C64 {
    C64::from_polar(1.0, phi)
}

/// Column-major vectorization, so `vec(A)[m + rows*n] = A[(m, n)]`.
pub fn vectorize(m: &CMatrix) -> CVector {
    CVector::from_column_slice(m.as_slice())
}

pub fn unvectorize(v: &CVector, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

pub fn frob_sqr(m: &CMatrix) -> f64 {
    norm_sqr(m.as_slice())
}

/// Inverse and log-determinant of a Hermitian positive definite matrix.
pub struct HermitianFactor {
    chol: Cholesky<C64, Dyn>,
}

impl HermitianFactor {
    pub fn new(m: CMatrix, context: &str) -> Result<Self> {
        let n = m.nrows();
        match Cholesky::new(m.clone()) {
            Some(chol) => Ok(Self { chol }),
            None => {
                // retry once with a tiny diagonal load before giving up
                let scale = (0..n).map(|i| m[(i, i)].re.abs()).fold(0.0, f64::max).max(1e-300);
                let mut loaded = m.clone();
                for i in 0..n {
                    loaded[(i, i)] += C64::new(1e-12 * scale, 0.0);
                }
                match Cholesky::new(loaded) {
                    Some(chol) => {
                        log::warn!("{context}: matrix not positive definite, applied diagonal loading");
                        Ok(Self { chol })
                    }
                    None => Err(IsacError::Conditioning {
                        context: context.to_string(),
                        condition: condition_estimate(&m),
                    }),
                }
            }
        }
    }

    pub fn solve(&self, b: &CVector) -> CVector {
        self.chol.solve(b).expect("triangular solve with a valid factor")
    }

    pub fn inverse(&self) -> CMatrix {
        let mut inv = self.chol.clone().inverse().expect("inverse of a valid factor");
        // only the lower triangle is meaningful
        let n = inv.nrows();
        for j in 0..n {
            inv[(j, j)].im = 0.0;
            for i in 0..j {
                inv[(i, j)] = inv[(j, i)].conj();
            }
        }
        inv
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].re.ln()).sum::<f64>()
    }
}

/// Symmetrizes numerically Hermitian matrices.
pub fn hermitize(mut m: CMatrix) -> CMatrix {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)].im = 0.0;
        for j in (i + 1)..n {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
    m
}

/// Ratio of extreme eigenvalue magnitudes of a Hermitian matrix.
pub fn condition_estimate(m: &CMatrix) -> f64 {
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return f64::INFINITY;
    }
    let eig = hermitize(m.clone()).symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &e in eig.eigenvalues.iter() {
        lo = lo.min(e.abs());
        hi = hi.max(e.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Least-squares solve through regularized normal equations.
pub fn regularized_solve(gram: &CMatrix, rhs: &CVector, relative_load: f64, context: &str) -> Result<CVector> {
    let n = gram.nrows();
    let scale = (0..n).map(|i| gram[(i, i)].re).sum::<f64>() / n.max(1) as f64;
    let mut g = gram.clone();
    if relative_load > 0.0 {
        for i in 0..n {
            g[(i, i)] += C64::new(relative_load * scale.max(1e-300), 0.0);
        }
    }
    Ok(HermitianFactor::new(g, context)?.solve(rhs))
}

/// Counts complex multiplications charged by instrumented kernels.
#[derive(Debug, Default)]
pub struct OpCounter {
    multiplies: Cell<u64>,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }
    #[inline]
    pub fn add(&self, n: usize) {
        self.multiplies.set(self.multiplies.get() + n as u64);
    }
    pub fn get(&self) -> u64 {
        self.multiplies.get()
    }
    pub fn reset(&self) -> u64 {
        self.multiplies.replace(0)
    }
}

/// Dense matrix-vector product charged to `ops`.
pub fn counted_mul(a: &CMatrix, x: &CVector, ops: &OpCounter) -> CVector {
    ops.add(a.nrows() * a.ncols());
    a * x
}

/// Adjoint matrix-vector product charged to `ops`.
pub fn counted_adjoint_mul(a: &CMatrix, x: &CVector, ops: &OpCounter) -> CVector {
    ops.add(a.nrows() * a.ncols());
    a.ad_mul(x)
}

pub fn real_vector(v: Vec<f64>) -> RVector {
    DVector::from_vec(v)
}

fn blas_dim(n: usize) -> i32 {
    i32::try_from(n).expect("matrix dimension exceeds BLAS integer range")
}

fn gemm_raw(ta: u8, tb: u8, a: &CMatrix, b: &CMatrix, m: usize, n: usize, k: usize) -> CMatrix {
    let mut c = CMatrix::zeros(m, n);
    if m == 0 || n == 0 {
        return c;
    }
    if k == 0 {
        return c;
    }
    // SAFETY: column-major buffers with leading dimensions equal to their row counts.
    unsafe {
        blas::zgemm(
            ta,
            tb,
            blas_dim(m),
            blas_dim(n),
            blas_dim(k),
            ONE,
            a.as_slice(),
            blas_dim(a.nrows().max(1)),
            b.as_slice(),
            blas_dim(b.nrows().max(1)),
            ZERO,
            c.as_mut_slice(),
            blas_dim(m),
        );
    }
    c
}

/// `A·B` through BLAS.
pub fn gemm(a: &CMatrix, b: &CMatrix) -> CMatrix {
    assert_eq!(a.ncols(), b.nrows(), "gemm: inner dimensions differ");
    gemm_raw(b'N', b'N', a, b, a.nrows(), b.ncols(), a.ncols())
}

/// `Aᴴ·B` through BLAS.
pub fn gemm_adjoint(a: &CMatrix, b: &CMatrix) -> CMatrix {
    assert_eq!(a.nrows(), b.nrows(), "gemm_adjoint: row counts differ");
    gemm_raw(b'C', b'N', a, b, a.ncols(), b.ncols(), a.nrows())
}

/// Economy SVD `A = U·diag(s)·Vᴴ` with `min(Q, P)` singular triplets, in descending order.
pub struct Svd {
    pub u: CMatrix,
    pub singular: Vec<f64>,
    pub v_adjoint: CMatrix,
}

pub fn svd(a: &CMatrix) -> Result<Svd> {
    let (m, n) = a.shape();
    if a.iter().any(|z| !z.is_finite()) {
        return Err(IsacError::Numerical { iteration: 0, context: "SVD of a non-finite matrix".into() });
    }
    let k = m.min(n);
    let mut work_a = a.clone();
    let mut s = vec![0.0; k];
    let mut u = CMatrix::zeros(m, k);
    let mut vt = CMatrix::zeros(k, n);
    let mut iwork = vec![0i32; 8 * k.max(1)];
    let rwork_len = k * (5 * k + 7).max(2 * m.max(n) + 2 * k + 1) + 1;
    let mut rwork = vec![0.0; rwork_len];
    let mut info = 0;
    let mut query = [ZERO];
    let (mi, ni, ki) = (blas_dim(m), blas_dim(n), blas_dim(k.max(1)));
    // SAFETY: buffer sizes follow the LAPACK workspace contract for jobz = 'S'.
    unsafe {
        lapack::zgesdd(
            b'S', mi, ni, work_a.as_mut_slice(), blas_dim(m.max(1)), &mut s, u.as_mut_slice(), blas_dim(m.max(1)),
            vt.as_mut_slice(), ki, &mut query, -1, &mut rwork, &mut iwork, &mut info,
        );
    }
    let lwork = (query[0].re as usize).max(1);
    let mut work = vec![ZERO; lwork];
    unsafe {
        lapack::zgesdd(
            b'S', mi, ni, work_a.as_mut_slice(), blas_dim(m.max(1)), &mut s, u.as_mut_slice(), blas_dim(m.max(1)),
            vt.as_mut_slice(), ki, &mut work, blas_dim(lwork), &mut rwork, &mut iwork, &mut info,
        );
    }
    if info != 0 {
        return Err(IsacError::Numerical { iteration: 0, context: format!("zgesdd returned info = {info}") });
    }
    Ok(Svd { u, singular: s, v_adjoint: vt })
}

/// Eigenvalues (ascending) and eigenvectors of a Hermitian matrix.
pub fn hermitian_eigen(a: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(IsacError::InvalidDimension("eigen-decomposition of a non-square matrix".into()));
    }
    if a.iter().any(|z| !z.is_finite()) {
        return Err(IsacError::Numerical { iteration: 0, context: "eigen-decomposition of a non-finite matrix".into() });
    }
    let mut v = a.clone();
    let mut w = vec![0.0; n];
    if n == 0 {
        return Ok((w, v));
    }
    let ni = blas_dim(n);
    let (mut work, mut rwork, mut iwork) = (vec![ZERO], vec![0.0], vec![0i32]);
    let mut info = 0;
    // SAFETY: workspace query followed by a call with the returned sizes.
    unsafe {
        lapack::zheevd(b'V', b'L', ni, v.as_mut_slice(), ni, &mut w, &mut work, -1, &mut rwork, -1, &mut iwork, -1, &mut info);
    }
    let (lw, lrw, liw) = ((work[0].re as usize).max(1), (rwork[0] as usize).max(1), (iwork[0] as usize).max(1));
    let (mut work, mut rwork, mut iwork) = (vec![ZERO; lw], vec![0.0; lrw], vec![0i32; liw]);
    unsafe {
        lapack::zheevd(
            b'V', b'L', ni, v.as_mut_slice(), ni, &mut w, &mut work, blas_dim(lw), &mut rwork, blas_dim(lrw),
            &mut iwork, blas_dim(liw), &mut info,
        );
    }
    if info != 0 {
        return Err(IsacError::Numerical { iteration: 0, context: format!("zheevd returned info = {info}") });
    }
    Ok((w, v))
}

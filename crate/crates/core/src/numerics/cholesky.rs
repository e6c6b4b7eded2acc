use crate::error::{dim_err, FrclError, Result};
use crate::numerics::matrix::{Matrix, Op};
use crate::scalar::Scalar;

/// Relative jitter of the first retry, in units of the mean diagonal.
pub const JITTER_START: f64 = 1e-10;
/// Multiplicative jitter growth per retry.
pub const JITTER_GROWTH: f64 = 10.0;
pub const JITTER_RETRIES: usize = 6;
/// Allowed relative asymmetry of a matrix handed to [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Lower Cholesky factor `L` with `L Lᵀ = A + jitter_used I`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor<T> {
    l: Matrix<T>,
    jitter_used: T,
}

/// Which triangular system [`tri_solve`] solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriSide {
    /// `L X = B`
    Lower,
    /// `Lᵀ X = B`
    LowerTransposed,
}

/// Factorises a symmetric matrix, adding escalating diagonal jitter when the
/// plain factorisation breaks down.
pub fn cholesky<T: Scalar>(a: &Matrix<T>) -> Result<CholeskyFactor<T>> {
    if !a.is_square() {
        return Err(dim_err("cholesky", "square", format!("{}x{}", a.rows(), a.cols())));
    }
    if !a.is_finite() {
        return Err(FrclError::NonFiniteInput("cholesky"));
    }
    let asym = a.asymmetry();
    if asym > T::of(SYMMETRY_TOL) {
        return Err(FrclError::NotSymmetric(asym.as_f64()));
    }
    let n = a.rows();
    if let Some(l) = factor(a, T::zero()) {
        return Ok(CholeskyFactor { l, jitter_used: T::zero() });
    }
    let mean_diag = if n == 0 { T::zero() } else { a.trace() / T::of(n as f64) };
    let base = if mean_diag > T::zero() { mean_diag } else { T::one() };
    let mut jitter = base * T::of(JITTER_START);
    for _ in 0..JITTER_RETRIES {
        if let Some(l) = factor(a, jitter) {
            log::trace!("cholesky needed jitter {jitter:e} on a {n}x{n} matrix");
            return Ok(CholeskyFactor { l, jitter_used: jitter });
        }
        jitter = jitter * T::of(JITTER_GROWTH);
    }
    Err(FrclError::NotPositiveDefinite {
        jitter: (jitter / T::of(JITTER_GROWTH)).as_f64(),
    })
}

/// Plain row-oriented Cholesky of `A + jitter I`, reading only the lower triangle.
fn factor<T: Scalar>(a: &Matrix<T>, jitter: T) -> Option<Matrix<T>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = if i == j {
                (l.row(i), l.row(i))
            } else {
                let (lo, hi) = l.data().split_at(i * n);
                (&hi[..n], &lo[j * n..(j + 1) * n])
            };
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            if i == j {
                let d = s + jitter;
                if !(d > T::zero()) || !d.is_finite() {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

impl<T: Scalar> CholeskyFactor<T> {
    /// Wraps an existing lower-triangular factor.
    pub fn from_lower(l: Matrix<T>, jitter_used: T) -> Result<Self> {
        if !l.is_square() {
            return Err(dim_err("CholeskyFactor", "square", format!("{}x{}", l.rows(), l.cols())));
        }
        if l.diag().iter().any(|&d| !(d > T::zero())) {
            return Err(FrclError::NotPositiveDefinite { jitter: jitter_used.as_f64() });
        }
        Ok(Self { l, jitter_used })
    }

    #[inline]
    pub fn l(&self) -> &Matrix<T> {
        &self.l
    }

    #[inline]
    pub fn jitter_used(&self) -> T {
        self.jitter_used
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// `ln |L Lᵀ|`.
    pub fn logdet(&self) -> T {
        T::of(2.0) * self.l.diag().into_iter().map(|d| d.ln()).sum::<T>()
    }

    /// `(L Lᵀ)⁻¹ B`.
    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        let y = tri_solve(self, b, TriSide::Lower)?;
        tri_solve(self, &y, TriSide::LowerTransposed)
    }

    pub fn solve_vec(&self, b: &[T]) -> Result<Vec<T>> {
        Ok(self.solve(&Matrix::column(b))?.into_data())
    }

    /// `L⁻¹`.
    pub fn l_inverse(&self) -> Matrix<T> {
        tri_solve(self, &Matrix::identity(self.dim()), TriSide::Lower)
            .expect("identity is conformable")
    }

    /// `(L Lᵀ)⁻¹`, symmetric.
    pub fn inverse(&self) -> Matrix<T> {
        let li = self.l_inverse();
        let mut inv = li.mm(Op::T, &li, Op::N).expect("square");
        inv.symmetrize();
        inv
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        self.l.matmul_t(&self.l).expect("square")
    }
}

/// Solves `L X = B` or `Lᵀ X = B` by substitution.
pub fn tri_solve<T: Scalar>(
    chol: &CholeskyFactor<T>,
    b: &Matrix<T>,
    side: TriSide,
) -> Result<Matrix<T>> {
    let l = &chol.l;
    let n = l.rows();
    if b.rows() != n {
        return Err(dim_err("tri_solve", format!("{n} rows"), format!("{} rows", b.rows())));
    }
    let m = b.cols();
    let mut x = b.clone();
    match side {
        TriSide::Lower => {
            for i in 0..n {
                let (done, rest) = x.data_mut().split_at_mut(i * m);
                let xi = &mut rest[..m];
                let li = l.row(i);
                for k in 0..i {
                    let c = li[k];
                    if c != T::zero() {
                        for (v, &p) in xi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                            *v -= c * p;
                        }
                    }
                }
                let inv = T::one() / li[i];
                xi.iter_mut().for_each(|v| *v *= inv);
            }
        }
        TriSide::LowerTransposed => {
            for i in (0..n).rev() {
                let (head, tail) = x.data_mut().split_at_mut((i + 1) * m);
                let xi = &mut head[i * m..];
                for k in i + 1..n {
                    let c = l[(k, i)];
                    if c != T::zero() {
                        let off = (k - i - 1) * m;
                        for (v, &p) in xi.iter_mut().zip(&tail[off..off + m]) {
                            *v -= c * p;
                        }
                    }
                }
                let inv = T::one() / l[(i, i)];
                xi.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    Ok(x)
}

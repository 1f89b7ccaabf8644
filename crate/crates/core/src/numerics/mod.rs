//! Stable low-level kernels shared by the rest of the crate: softmax, Shannon
//! entropy, row normalization, Cholesky log-determinants and deterministic
//! reductions. Logarithms are natural throughout.

mod matrix;

pub use matrix::{dot, norm, Matrix};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Attention values at or below this are treated as exact zeros inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Rows with an L2 norm below this cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// A probability vector: nonnegative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector<T>(Vec<T>);

impl<T: Scalar> ProbVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        check_prob_row(&values, 0)?;
        Ok(Self(values))
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0);
        Self(vec![T::one() / T::lit(len as f64); len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

pub(crate) fn check_prob_row<T: Scalar>(values: &[T], row: usize) -> Result<()> {
    let bad = |reason: String| Error::InvalidProbVector { row, reason };
    if values.is_empty() {
        return Err(bad("empty".into()));
    }
    if let Some((k, v)) =
        values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < T::zero() || **v > T::one() + T::tol())
    {
        return Err(bad(format!("entry {k} = {v} outside [0, 1]")));
    }
    let sum: T = values.iter().copied().sum();
    if (sum - T::one()).abs() > T::tol() {
        return Err(bad(format!("sums to {sum}")));
    }
    Ok(())
}

/// Softmax with max-subtraction; finite for every finite input.
pub fn stable_softmax<T: Scalar>(logits: &[T]) -> Result<ProbVector<T>> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid("softmax input contains non-finite values"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbVector(out))
}

/// Unchecked in-place variant used on hot paths; caller guarantees finite input.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// `−Σ c ln c` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy<T: Scalar>(c: &ProbVector<T>) -> T {
    entropy(c.as_slice())
}

/// Entropy of an arbitrary nonnegative row, no simplex check.
pub fn entropy<T: Scalar>(c: &[T]) -> T {
    let floor = T::lit(LOG_FLOOR);
    -c.iter().filter(|&&v| v > floor).fold(T::zero(), |acc, &v| acc + v * v.ln())
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    factor: Matrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factorizes `m + jitter·I`. Only the lower triangle of `m` is read.
    pub fn new(m: &Matrix<T>, jitter: T) -> Result<Self> {
        if !m.is_square() {
            return Err(invalid(format!("Cholesky of a non-square {}x{} matrix", m.rows(), m.cols())));
        }
        let n = m.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)] + jitter;
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d.to_f64_lossy() });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { factor: l })
    }

    pub fn factor(&self) -> &Matrix<T> {
        &self.factor
    }

    /// `log det = 2 Σ ln diag(L)`.
    pub fn logdet(&self) -> T {
        let two = T::lit(2.0);
        (0..self.factor.rows()).fold(T::zero(), |acc, i| acc + two * self.factor[(i, i)].ln())
    }

    /// Solves `(L Lᵀ) x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let l = &self.factor;
        let n = l.rows();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[(i, k)] * b[k];
            }
            b[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * b[k];
            }
            b[i] = s / l[(i, i)];
        }
    }

    /// Inverse of the factorized matrix, symmetrized.
    pub fn inverse(&self) -> Matrix<T> {
        let n = self.factor.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = T::zero());
            col[j] = T::one();
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        let half = T::lit(0.5);
        Matrix::from_fn(n, n, |i, j| half * (inv[(i, j)] + inv[(j, i)]))
    }
}

fn check_symmetric<T: Scalar>(m: &Matrix<T>) -> Result<()> {
    if !m.is_square() {
        return Err(invalid(format!("expected a square matrix, got {}x{}", m.rows(), m.cols())));
    }
    let tol = T::tol() * T::one().max(m.max_abs());
    if !m.is_symmetric(tol) {
        return Err(invalid("matrix is not symmetric"));
    }
    Ok(())
}

/// `log det(m + jitter·I)` for a symmetric positive semidefinite `m`, via Cholesky.
pub fn logdet_psd<T: Scalar>(m: &Matrix<T>, jitter: T) -> Result<T> {
    check_symmetric(m)?;
    Ok(Cholesky::new(m, jitter)?.logdet())
}

/// Determinant by LU decomposition with partial pivoting. Works for singular input.
pub fn determinant<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    if !m.is_square() {
        return Err(invalid("determinant of a non-square matrix"));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut det = T::one();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[(x, col)].abs().partial_cmp(&a[(y, col)].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(col);
        let p = a[(pivot, col)];
        if p == T::zero() {
            return Ok(T::zero());
        }
        if pivot != col {
            for j in 0..n {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(pivot, j)];
                a[(pivot, j)] = tmp;
            }
            det = -det;
        }
        det *= p;
        for r in (col + 1)..n {
            let f = a[(r, col)] / p;
            if f == T::zero() {
                continue;
            }
            for j in col..n {
                let v = a[(col, j)];
                a[(r, j)] -= f * v;
            }
        }
    }
    Ok(det)
}

/// Scales every row to unit L2 norm.
pub fn row_normalize<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n >= T::lit(MIN_ROW_NORM)) {
            return Err(Error::DegenerateRow { row: i, norm: n.to_f64_lossy() });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Sum by a fixed binary tree over the input order, for reductions that
/// must not depend on how work was split across threads.
pub fn pairwise_sum<T: Scalar>(values: &[T]) -> T {
    match values.len() {
        0 => T::zero(),
        1 => values[0],
        n if n <= 8 => values.iter().copied().fold(T::zero(), |a, b| a + b),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

pub fn pairwise_mean<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    pairwise_sum(values) / T::lit(values.len() as f64)
}

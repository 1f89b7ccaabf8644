//! Quality-diversity loss over cross-attention maps.
//!
//! Each view's attention row `c_i` is a diversity feature and its Shannon
//! entropy `h_i` is its quality. The kernel `L_ij = h_i (c_i · c_j) h_j` is a
//! Gram matrix of the scaled rows `h_i c_i`, so it is PSD and
//! `det L = (∏ h_i²) det(C Cᵀ)`. The loss is `−log det(L + εI)`.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::numerics::{
    check_prob_row, determinant, dot, entropy, norm, pairwise_mean, Cholesky, Matrix, LOG_FLOOR, MIN_ROW_NORM,
};
use crate::scalar::Scalar;

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Row-stochastic attention of each view over the flattened positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T>(Matrix<T>);

impl<T: Scalar> AttentionMaps<T> {
    pub fn new(m: Matrix<T>) -> Result<Self> {
        for (i, row) in m.row_iter().enumerate() {
            check_prob_row(row, i)?;
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub(crate) fn new_unchecked(m: Matrix<T>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn views(&self) -> usize {
        self.0.rows()
    }

    pub fn positions(&self) -> usize {
        self.0.cols()
    }

    /// Same maps with rows reordered: row `k` of the result is row `perm[k]` here.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let m = &self.0;
        Self(Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(perm[i], j)]))
    }
}

/// Per-view entropies.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityVector<T>(Vec<T>);

impl<T: Scalar> QualityVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DppKernel<T> {
    pub matrix: Matrix<T>,
    pub jitter: T,
}

fn gram_and_quality<T: Scalar>(c: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let gram = c.matmul_t(c).expect("square gram");
    let h = c.row_iter().map(entropy).collect();
    (gram, h)
}

fn kernel_of<T: Scalar>(gram: &Matrix<T>, h: &[T]) -> Matrix<T> {
    // h_i·h_j first so the result is exactly symmetric.
    Matrix::from_fn(gram.rows(), gram.cols(), |i, j| (h[i] * h[j]) * gram[(i, j)])
}

/// `L_ij = h_i (c_i · c_j) h_j` with raw (unnormalized) attention inner products.
pub fn build_kernel<T: Scalar>(c: &AttentionMaps<T>) -> (DppKernel<T>, QualityVector<T>) {
    let (gram, h) = gram_and_quality(c.matrix());
    let matrix = kernel_of(&gram, &h);
    (DppKernel { matrix, jitter: T::lit(DEFAULT_EPSILON) }, QualityVector(h))
}

fn check_epsilon<T: Scalar>(eps: T) -> Result<()> {
    if !(eps >= T::zero()) || !eps.is_finite() {
        return Err(invalid(format!("epsilon must be finite and nonnegative, got {eps}")));
    }
    Ok(())
}

/// DPP loss on a matrix of nonnegative rows, without the simplex check.
/// Finite-difference probes step off the simplex and use this entry point.
pub fn dpp_loss_of_rows<T: Scalar>(c: &Matrix<T>, eps: T) -> Result<T> {
    check_epsilon(eps)?;
    let (gram, h) = gram_and_quality(c);
    Ok(-Cholesky::new(&kernel_of(&gram, &h), eps)?.logdet())
}

/// `−log det(L + εI)`.
pub fn dpp_loss<T: Scalar>(c: &AttentionMaps<T>, eps: T) -> Result<T> {
    dpp_loss_of_rows(c.matrix(), eps)
}

/// Analytic gradient of [`dpp_loss_of_rows`] with respect to every entry of `c`.
pub fn dpp_grad_of_rows<T: Scalar>(c: &Matrix<T>, eps: T) -> Result<Matrix<T>> {
    check_epsilon(eps)?;
    let (gram, h) = gram_and_quality(c);
    let kernel = kernel_of(&gram, &h);
    // d(−log det M)/dL = −M⁻¹
    let g = Cholesky::new(&kernel, eps)?.inverse().scale(-T::one());
    let n = c.rows();
    let two = T::lit(2.0);

    let w = Matrix::from_fn(n, n, |i, j| g[(i, j)] * h[i] * h[j]);
    let dh: Vec<T> =
        (0..n).map(|i| two * (0..n).fold(T::zero(), |acc, j| acc + g[(i, j)] * gram[(i, j)] * h[j])).collect();

    let mut grad = w.matmul(c)?.scale(two);
    let floor = T::lit(LOG_FLOOR);
    for (i, &dhi) in dh.iter().enumerate() {
        let row = c.row(i).to_vec();
        for (gk, ck) in grad.row_mut(i).iter_mut().zip(row) {
            if ck > floor {
                *gk -= dhi * (T::one() + ck.ln());
            }
        }
    }
    Ok(grad)
}

pub fn dpp_loss_grad<T: Scalar>(c: &AttentionMaps<T>, eps: T) -> Result<Matrix<T>> {
    dpp_grad_of_rows(c.matrix(), eps)
}

/// Mean DPP loss over a batch. Items are evaluated in parallel; the reduction
/// order is fixed by batch position.
pub fn batch_dpp_loss<T: Scalar>(maps: &[AttentionMaps<T>], eps: T) -> Result<T> {
    if maps.is_empty() {
        return Err(invalid("empty batch"));
    }
    let losses = maps.par_iter().map(|c| dpp_loss(c, eps)).collect::<Result<Vec<T>>>()?;
    Ok(pairwise_mean(&losses))
}

/// `|det L − (∏ h_i²) det(C Cᵀ)|`, both determinants by LU so the check does
/// not share code with the Cholesky path used by the loss.
pub fn det_decomposition_residual<T: Scalar>(c: &AttentionMaps<T>) -> T {
    let (gram, h) = gram_and_quality(c.matrix());
    let kernel = kernel_of(&gram, &h);
    let det_l = determinant(&kernel).expect("square");
    let det_g = determinant(&gram).expect("square");
    let quality = h.iter().fold(T::one(), |acc, &v| acc * v * v);
    (det_l - quality * det_g).abs()
}

fn unit_rows<T: Scalar>(c: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    if c.rows() < 2 {
        return Err(invalid("pairwise repulsion needs at least two views"));
    }
    let mut unit = c.clone();
    let mut norms = Vec::with_capacity(c.rows());
    for i in 0..c.rows() {
        let n = norm(c.row(i));
        if !(n >= T::lit(MIN_ROW_NORM)) {
            return Err(Error::DegenerateRow { row: i, norm: n.to_f64_lossy() });
        }
        unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

/// Mean cosine similarity over unordered row pairs, on raw rows.
pub fn pairwise_repulsion_of_rows<T: Scalar>(c: &Matrix<T>) -> Result<T> {
    let (unit, _) = unit_rows(c)?;
    let n = c.rows();
    let mut total = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            total += dot(unit.row(i), unit.row(j));
        }
    }
    Ok(total / T::lit((n * (n - 1) / 2) as f64))
}

pub fn pairwise_repulsion_loss<T: Scalar>(c: &AttentionMaps<T>) -> Result<T> {
    pairwise_repulsion_of_rows(c.matrix())
}

pub fn pairwise_repulsion_grad_of_rows<T: Scalar>(c: &Matrix<T>) -> Result<Matrix<T>> {
    let (unit, norms) = unit_rows(c)?;
    let n = c.rows();
    let pairs = T::lit((n * (n - 1) / 2) as f64);
    let mut total = vec![T::zero(); c.cols()];
    for row in unit.row_iter() {
        for (t, &v) in total.iter_mut().zip(row) {
            *t += v;
        }
    }
    let mut grad = Matrix::zeros(n, c.cols());
    for (i, &ni) in norms.iter().enumerate() {
        let u = unit.row(i);
        // d/du_i = (Σ_{j≠i} u_j) / pairs, then project out the radial part.
        let du: Vec<T> = total.iter().zip(u).map(|(&t, &ui)| (t - ui) / pairs).collect();
        let radial = dot(&du, u);
        for ((g, &d), &ui) in grad.row_mut(i).iter_mut().zip(&du).zip(u) {
            *g = (d - ui * radial) / ni;
        }
    }
    Ok(grad)
}

pub fn pairwise_repulsion_grad<T: Scalar>(c: &AttentionMaps<T>) -> Result<Matrix<T>> {
    pairwise_repulsion_grad_of_rows(c.matrix())
}

/// Configurations over a 1×3 "image" where pairwise cosine cannot tell an even
/// spread of four attention maps from two duplicated clusters, but the DPP can.
pub mod discrimination {
    use super::*;

    pub const POSITIONS: usize = 3;

    /// Three corner maps softened towards uniform by `t`, plus a uniform map.
    pub fn even_family(t: f64) -> AttentionMaps<f64> {
        let u = 1.0 / POSITIONS as f64;
        let mut rows: Vec<Vec<f64>> =
            (0..POSITIONS).map(|k| (0..POSITIONS).map(|p| (1.0 - t) * f64::from(p == k) + t * u).collect()).collect();
        rows.push(vec![u; POSITIONS]);
        AttentionMaps::from_rows(&rows).expect("valid family")
    }

    /// Two softened corner maps, each duplicated.
    pub fn clustered_family(s: f64) -> AttentionMaps<f64> {
        let u = 1.0 / POSITIONS as f64;
        let corner = |k: usize| -> Vec<f64> { (0..POSITIONS).map(|p| (1.0 - s) * f64::from(p == k) + s * u).collect() };
        let (a, b) = (corner(0), corner(1));
        AttentionMaps::from_rows(&[a.clone(), a, b.clone(), b]).expect("valid family")
    }

    pub fn duplicate_rows() -> AttentionMaps<f64> {
        AttentionMaps::from_rows(&vec![vec![0.6, 0.3, 0.1]; 4]).expect("valid")
    }

    #[derive(Clone, Debug)]
    pub struct DiscriminatingPair {
        pub even_param: f64,
        pub clustered_param: f64,
        pub even: AttentionMaps<f64>,
        pub clustered: AttentionMaps<f64>,
        pub pairwise_even: f64,
        pub pairwise_clustered: f64,
        pub dpp_even: f64,
        pub dpp_clustered: f64,
    }

    impl DiscriminatingPair {
        pub fn pairwise_gap(&self) -> f64 {
            (self.pairwise_even - self.pairwise_clustered).abs()
        }

        pub fn dpp_gap(&self) -> f64 {
            self.dpp_clustered - self.dpp_even
        }
    }

    fn pairwise(c: &AttentionMaps<f64>) -> f64 {
        pairwise_repulsion_loss(c).expect("no zero rows in the families")
    }

    /// Clustered parameter whose pairwise loss equals `target`, by bisection.
    /// The clustered pairwise loss increases monotonically from 1/3 to 1 on (0, 1).
    fn match_clustered(target: f64) -> Option<f64> {
        let f = |s: f64| pairwise(&clustered_family(s)) - target;
        let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
        if f(lo) > 0.0 || f(hi) < 0.0 {
            return None;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Grid search over the even family; for each candidate the clustered
    /// parameter is solved to equalize the pairwise loss. Returns the pair with
    /// the largest DPP separation.
    pub fn search(eps: f64, grid: usize) -> Option<DiscriminatingPair> {
        let mut best: Option<DiscriminatingPair> = None;
        for g in 1..grid {
            let t = g as f64 / grid as f64;
            let even = even_family(t);
            let pe = pairwise(&even);
            let Some(s) = match_clustered(pe) else { continue };
            let clustered = clustered_family(s);
            let (Ok(de), Ok(dc)) = (dpp_loss(&even, eps), dpp_loss(&clustered, eps)) else {
                continue;
            };
            let cand = DiscriminatingPair {
                even_param: t,
                clustered_param: s,
                pairwise_even: pe,
                pairwise_clustered: pairwise(&clustered),
                dpp_even: de,
                dpp_clustered: dc,
                even,
                clustered,
            };
            if best.as_ref().is_none_or(|b| cand.dpp_gap() > b.dpp_gap()) {
                best = Some(cand);
            }
        }
        best
    }
}

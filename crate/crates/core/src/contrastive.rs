//! Symmetric InfoNCE over an in-batch image–report similarity matrix.
//!
//! `Σ[m][k]` is the score of image `m` against report `k`; the diagonal holds
//! the positive pairs. Both directions are averaged over the batch.

use crate::error::{invalid, Result};
use crate::numerics::{softmax_in_place, Matrix};
use crate::scalar::Scalar;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSimilarity<T> {
    matrix: Matrix<T>,
    temperature: T,
}

impl<T: Scalar> BatchSimilarity<T> {
    pub fn new(matrix: Matrix<T>, temperature: T) -> Result<Self> {
        if !matrix.is_square() {
            return Err(invalid(format!("batch similarity must be square, got {}x{}", matrix.rows(), matrix.cols())));
        }
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { matrix, temperature })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn batch(&self) -> usize {
        self.matrix.rows()
    }

    fn logits(&self) -> Matrix<T> {
        let inv = T::one() / self.temperature;
        self.matrix.scale(inv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfoNce<T> {
    /// Each image picks its report among the batch (row-wise softmax).
    pub image_given_report: T,
    /// Each report picks its image among the batch (column-wise softmax).
    pub report_given_image: T,
}

impl<T: Scalar> InfoNce<T> {
    pub fn symmetric(&self) -> T {
        (self.image_given_report + self.report_given_image) / T::lit(2.0)
    }
}

/// `−log softmax(z)[target]` via log-sum-exp.
fn neg_log_softmax_at<T: Scalar>(z: impl Iterator<Item = T> + Clone, target: T) -> T {
    let max = z.clone().fold(T::neg_infinity(), T::max);
    let lse = max + z.fold(T::zero(), |acc, v| acc + (v - max).exp()).ln();
    lse - target
}

pub fn info_nce<T: Scalar>(sim: &BatchSimilarity<T>) -> InfoNce<T> {
    let z = sim.logits();
    let b = z.rows();
    let n = T::lit(b as f64);
    let mut rows = T::zero();
    let mut cols = T::zero();
    for m in 0..b {
        rows += neg_log_softmax_at(z.row(m).iter().copied(), z[(m, m)]);
        cols += neg_log_softmax_at((0..b).map(|k| z[(k, m)]), z[(m, m)]);
    }
    InfoNce { image_given_report: rows / n, report_given_image: cols / n }
}

/// Row-wise softmax of `Σ/τ` and column-wise softmax of `Σ/τ`.
pub fn softmax_terms<T: Scalar>(sim: &BatchSimilarity<T>) -> (Matrix<T>, Matrix<T>) {
    let z = sim.logits();
    let b = z.rows();
    let mut p_row = z.clone();
    for m in 0..b {
        softmax_in_place(p_row.row_mut(m));
    }
    let mut p_col = z.transpose();
    for m in 0..b {
        softmax_in_place(p_col.row_mut(m));
    }
    (p_row, p_col.transpose())
}

/// Gradient of the symmetric loss with respect to `Σ`:
/// `((P_row − I) + (P_col − I)) / (2Bτ)`.
pub fn info_nce_grad<T: Scalar>(sim: &BatchSimilarity<T>) -> Matrix<T> {
    let (p_row, p_col) = softmax_terms(sim);
    let b = sim.batch();
    let scale = T::one() / (T::lit(2.0 * b as f64) * sim.temperature);
    Matrix::from_fn(b, b, |i, j| {
        let eye = if i == j { T::one() } else { T::zero() };
        (p_row[(i, j)] - eye + p_col[(i, j)] - eye) * scale
    })
}

/// `(L_I|R + L_R|I)/2 + λ·mean(dpp_terms) + extra`. `extra` is a hook for
/// further objective terms (a generative loss, for instance); pass `None`.
pub fn total_loss<T: Scalar>(sim: &BatchSimilarity<T>, dpp_terms: &[T], lambda_dpp: T, extra: Option<T>) -> Result<T> {
    if !(lambda_dpp >= T::zero()) {
        return Err(invalid(format!("lambda_dpp must be nonnegative, got {lambda_dpp}")));
    }
    let contrastive = info_nce(sim).symmetric();
    let dpp = if lambda_dpp > T::zero() {
        if dpp_terms.is_empty() {
            return Err(invalid("lambda_dpp > 0 requires at least one DPP term"));
        }
        lambda_dpp * crate::numerics::pairwise_mean(dpp_terms)
    } else {
        T::zero()
    };
    Ok(contrastive + dpp + extra.unwrap_or_else(T::zero))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>], tau: f64) -> BatchSimilarity<f64> {
        BatchSimilarity::new(Matrix::from_rows(rows).unwrap(), tau).unwrap()
    }

    #[test]
    fn single_item_batch_has_zero_loss() {
        let l = info_nce(&batch(&[vec![0.3]], 0.07));
        assert_eq!((l.image_given_report, l.report_given_image), (0.0, 0.0));
        let t = total_loss(&batch(&[vec![0.3]], 0.07), &[], 0.0, None).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn two_way_closed_form() {
        let l = info_nce(&batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0));
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l.image_given_report - expected).abs() < 1e-15);
        assert!((l.report_given_image - expected).abs() < 1e-15);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn total_loss_composition() {
        let s = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        let c = (1.0 + (-1.0f64).exp()).ln();
        let t = total_loss(&s, &[2.0, 4.0], 1.0, None).unwrap();
        assert!((t - (c + 3.0)).abs() < 1e-12);
        assert!((t - 3.31326).abs() < 1e-5);
        assert_eq!(total_loss(&s, &[2.0, 4.0], 0.0, None).unwrap(), info_nce(&s).symmetric());
        assert!(total_loss(&s, &[], 1.0, None).is_err());
        assert!(total_loss(&s, &[1.0], -1.0, None).is_err());
        assert!((total_loss(&s, &[], 0.0, Some(0.5)).unwrap() - (c + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(BatchSimilarity::new(m, 1.0).is_err());
        assert!(BatchSimilarity::new(Matrix::<f64>::identity(2), 0.0).is_err());
    }

    #[test]
    fn gradient_at_zero_similarity() {
        let b = 4;
        let tau = 0.5;
        let g = info_nce_grad(&BatchSimilarity::new(Matrix::<f64>::zeros(b, b), tau).unwrap());
        for i in 0..b {
            for j in 0..b {
                let eye = if i == j { 1.0 } else { 0.0 };
                let expected = (1.0 / b as f64 - eye) / (b as f64 * tau);
                assert!((g[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }
}

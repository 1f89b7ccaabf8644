use mview_core::numerics::{
    determinant, entropy, logdet_psd, pairwise_mean, pairwise_sum, row_normalize, shannon_entropy, stable_softmax,
    Cholesky, ProbVector,
};
use mview_core::{Error, Matrix};
use proptest::prelude::*;

fn spd() -> impl Strategy<Value = Matrix<f64>> {
    (1usize..=6).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
            let a = Matrix::new(n, n, v).unwrap();
            let mut m = a.matmul_t(&a).unwrap();
            for i in 0..n {
                m.as_mut_slice()[i * n + i] += 0.1;
            }
            m
        })
    })
}

proptest! {
    #[test]
    fn cholesky_logdet_matches_lu(m in spd()) {
        let ld = logdet_psd(&m, 0.0).unwrap();
        let oracle = determinant(&m).unwrap().ln();
        prop_assert!((ld - oracle).abs() < 1e-9 * oracle.abs().max(1.0));
    }

    #[test]
    fn cholesky_solves_and_inverts(m in spd(), rhs in prop::collection::vec(-1.0f64..1.0, 6)) {
        let n = m.rows();
        let ch = Cholesky::new(&m, 0.0).unwrap();
        let mut x = rhs[..n].to_vec();
        ch.solve_in_place(&mut x);
        for i in 0..n {
            let ax: f64 = (0..n).map(|j| m[(i, j)] * x[j]).sum();
            prop_assert!((ax - rhs[i]).abs() < 1e-8);
        }
        let prod = m.matmul(&ch.inverse()).unwrap();
        for i in 0..n {
            for j in 0..n {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((prod[(i, j)] - e).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let p = stable_softmax(&v).unwrap();
        let q = stable_softmax(&v.iter().map(|x| x + shift).collect::<Vec<_>>()).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_is_bounded_by_log_support(v in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let p = stable_softmax(&v).unwrap();
        let h = shannon_entropy(&p);
        prop_assert!(h >= 0.0 && h <= (v.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_naive(v in prop::collection::vec(-1e3f64..1e3, 0..300)) {
        let naive: f64 = v.iter().sum();
        prop_assert!((pairwise_sum(&v) - naive).abs() < 1e-9 * naive.abs().max(1.0));
    }
}

#[test]
fn entropy_examples() {
    assert!((entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    let u = ProbVector::<f64>::uniform(4);
    assert!((shannon_entropy(&u) - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn prob_vector_validation() {
    assert!(ProbVector::new(vec![0.2, 0.8]).is_ok());
    assert!(ProbVector::new(vec![0.2, 0.7]).is_err());
    assert!(ProbVector::new(vec![-0.2, 1.2]).is_err());
    assert!(ProbVector::<f64>::new(vec![]).is_err());
}

#[test]
fn cholesky_reports_failing_pivot() {
    let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
    assert!(matches!(Cholesky::new(&m, 0.0), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
    assert!(logdet_psd(&asym, 0.0).is_err());
}

#[test]
fn determinant_examples() {
    let m = Matrix::from_rows(&[vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
    assert!((determinant(&m).unwrap() + 6.0f64).abs() < 1e-15);
    let singular = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
    assert_eq!(determinant(&singular).unwrap(), 0.0);
}

#[test]
fn row_normalize_rejects_zero_rows() {
    let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
    assert!(matches!(row_normalize(&m), Err(Error::DegenerateRow { row: 1, .. })));
    let ok = row_normalize(&Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap()).unwrap();
    assert_eq!(ok.row(0), &[0.6, 0.8]);
}

#[test]
fn pairwise_mean_of_empty_is_zero() {
    assert_eq!(pairwise_mean::<f64>(&[]), 0.0);
    assert_eq!(pairwise_mean(&[1.0, 2.0, 3.0]), 2.0);
}

#[test]
fn matrix_rejects_non_finite_and_bad_shapes() {
    assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
    assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    assert!(Matrix::<f64>::new(0, 2, vec![]).is_err());
}

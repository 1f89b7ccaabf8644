use mview_core::matching::{
    aggregate_pva, maxsim, mean_pool_similarity, pva_match, similarity, MatchSet, Scorer, SentenceEmbeddings,
    SimilarityMatrix, ViewEmbeddings,
};
use mview_core::numerics::row_normalize;
use mview_core::Matrix;
use proptest::prelude::*;

/// Independent greedy trace: scan for the largest free entry each round,
/// preferring the smaller view index, then the smaller sentence index.
fn greedy_oracle(s: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let (nq, ns) = (s.len(), s[0].len());
    let mut free_v = vec![true; nq];
    let mut free_s = vec![true; ns];
    let mut out = Vec::new();
    while out.len() < nq.min(ns) {
        let mut best: Option<(usize, usize)> = None;
        for i in (0..nq).filter(|&i| free_v[i]) {
            for j in (0..ns).filter(|&j| free_s[j]) {
                if best.is_none_or(|(a, b)| s[i][j] > s[a][b]) {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.unwrap();
        free_v[i] = false;
        free_s[j] = false;
        out.push((i, j));
    }
    out
}

/// Similarity tables over a coarse grid so ties are common.
fn tied_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::collection::vec((-4i32..=4).prop_map(|v| f64::from(v) / 4.0), c), r)
    })
}

fn continuous_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-1.0f64..1.0, c), r))
}

fn sim(m: &[Vec<f64>]) -> SimilarityMatrix<f64> {
    SimilarityMatrix::new(Matrix::from_rows(m).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pva_equals_greedy_oracle_with_ties(m in tied_matrix()) {
        prop_assert_eq!(pva_match(&sim(&m)).pairs().to_vec(), greedy_oracle(&m));
    }

    #[test]
    fn pva_equals_greedy_oracle(m in continuous_matrix()) {
        prop_assert_eq!(pva_match(&sim(&m)).pairs().to_vec(), greedy_oracle(&m));
    }
}

proptest! {
    #[test]
    fn match_is_a_partial_injection(m in tied_matrix()) {
        let s = sim(&m);
        let matches = pva_match(&s);
        prop_assert_eq!(matches.len(), m.len().min(m[0].len()));
        prop_assert!(MatchSet::new(matches.pairs().to_vec()).is_ok());
        let agg = aggregate_pva(&s, &matches).unwrap();
        let mean = matches.pairs().iter().map(|&(i, j)| m[i][j]).sum::<f64>() / matches.len() as f64;
        prop_assert!((agg - mean).abs() < 1e-12);
    }

    #[test]
    fn first_pair_is_a_global_maximum(m in continuous_matrix()) {
        let (i, j) = pva_match(&sim(&m)).pairs()[0];
        let max = m.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(m[i][j], max);
    }

    #[test]
    fn match_is_invariant_under_increasing_maps(m in tied_matrix(), a in 0.1f64..5.0, b in -2.0f64..2.0) {
        let t: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| a * v + b).collect()).collect();
        prop_assert_eq!(pva_match(&sim(&m)), pva_match(&sim(&t)));
    }

    #[test]
    fn pva_never_exceeds_its_best_entry_and_maxsim_bounds(m in continuous_matrix()) {
        let s = sim(&m);
        let agg = aggregate_pva(&s, &pva_match(&s)).unwrap();
        let max = m.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = m.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(agg <= max + 1e-15 && agg >= min - 1e-15);
        let ms = maxsim(&s);
        let rowmax_mean = m.iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / m.len() as f64;
        prop_assert!((ms - rowmax_mean).abs() < 1e-12);
    }
}

fn unit(rows: &[Vec<f64>]) -> Matrix<f64> {
    row_normalize(&Matrix::from_rows(rows).unwrap()).unwrap()
}

#[test]
fn similarity_of_unit_embeddings_is_cosine() {
    let v = ViewEmbeddings::new(unit(&[vec![1.0, 0.0], vec![1.0, 1.0]])).unwrap();
    let f = SentenceEmbeddings::new(unit(&[vec![0.0, 1.0]])).unwrap();
    let s = similarity(&v, &f).unwrap();
    assert_eq!(s.get(0, 0), 0.0);
    assert!((s.get(1, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
}

#[test]
fn scorers_parse_and_display() {
    for s in Scorer::ALL {
        assert_eq!(s.to_string().parse::<Scorer>().unwrap(), s);
    }
    assert!("cosine".parse::<Scorer>().is_err());
}

#[test]
fn scorers_agree_on_single_pair() {
    let v = ViewEmbeddings::new(unit(&[vec![0.6, 0.8]])).unwrap();
    let f = SentenceEmbeddings::new(unit(&[vec![1.0, 0.0]])).unwrap();
    for s in Scorer::ALL {
        assert!((s.score(&v, &f).unwrap() - 0.6).abs() < 1e-15);
    }
    assert!((mean_pool_similarity(&v, &f).unwrap() - 0.6).abs() < 1e-15);
}

#[test]
fn too_many_sentences_are_rejected() {
    let rows = vec![vec![1.0, 0.0]; 3];
    assert!(SentenceEmbeddings::with_max(unit(&rows), 2).is_err());
    assert!(SentenceEmbeddings::with_max(unit(&rows), 3).is_ok());
}

#[test]
fn non_unit_views_are_rejected() {
    assert!(ViewEmbeddings::new(Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap()).is_err());
}

//! View–sentence similarity and the three ways of collapsing it to a single
//! image–report score: greedy pairwise view alignment, ColBERT-style MaxSim
//! and mean pooling.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{dot, norm, Matrix, MIN_ROW_NORM};
use crate::scalar::Scalar;

/// Default cap on sentences per report.
pub const DEFAULT_MAX_SENTENCES: usize = 20;

fn check_unit_rows<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<()> {
    let tol = T::tol();
    for (i, row) in m.row_iter().enumerate() {
        let n = norm(row);
        if (n - T::one()).abs() > tol {
            return Err(invalid(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Unit-norm image-side embeddings, one row per latent view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings<T>(Matrix<T>);

impl<T: Scalar> ViewEmbeddings<T> {
    pub fn new(m: Matrix<T>) -> Result<Self> {
        check_unit_rows(&m, "view")?;
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: Matrix<T>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// Unit-norm report-side embeddings, one row per sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbeddings<T>(Matrix<T>);

impl<T: Scalar> SentenceEmbeddings<T> {
    pub fn new(m: Matrix<T>) -> Result<Self> {
        Self::with_max(m, DEFAULT_MAX_SENTENCES)
    }

    pub fn with_max(m: Matrix<T>, max_sentences: usize) -> Result<Self> {
        if m.rows() > max_sentences {
            return Err(invalid(format!("{} sentences exceeds the maximum of {max_sentences}", m.rows())));
        }
        check_unit_rows(&m, "sentence")?;
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// `S = V Fᵀ`, rows indexed by view, columns by sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T>(Matrix<T>);

impl<T: Scalar> SimilarityMatrix<T> {
    /// Wraps an arbitrary finite matrix; PVA and MaxSim are defined for any.
    pub fn new(m: Matrix<T>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn views(&self) -> usize {
        self.0.rows()
    }

    pub fn sentences(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn get(&self, view: usize, sentence: usize) -> T {
        self.0[(view, sentence)]
    }
}

/// Injective view→sentence pairing, in acceptance order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    pairs: Vec<(usize, usize)>,
}

impl MatchSet {
    /// Builds a match set, rejecting repeated view or sentence indices.
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        for (a, &(i, j)) in pairs.iter().enumerate() {
            if pairs[..a].iter().any(|&(pi, pj)| pi == i || pj == j) {
                return Err(invalid(format!("pair ({i}, {j}) reuses an occupied index")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn similarity<T: Scalar>(
    views: &ViewEmbeddings<T>,
    sentences: &SentenceEmbeddings<T>,
) -> Result<SimilarityMatrix<T>> {
    if views.dim() != sentences.dim() {
        return Err(invalid(format!(
            "embedding dimension mismatch: views {} vs sentences {}",
            views.dim(),
            sentences.dim()
        )));
    }
    Ok(SimilarityMatrix(views.matrix().matmul_t(sentences.matrix())?))
}

/// Descending similarity, then ascending view index, then ascending sentence index.
fn pair_order<T: Scalar>(s: &SimilarityMatrix<T>, a: (usize, usize), b: (usize, usize)) -> Ordering {
    s.get(b.0, b.1).partial_cmp(&s.get(a.0, a.1)).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
}

/// Pairwise View Alignment: walk all (view, sentence) pairs from most to least
/// similar and accept a pair whenever both sides are still free, stopping at
/// `min(N_Q, N_S)` pairs.
pub fn pva_match<T: Scalar>(s: &SimilarityMatrix<T>) -> MatchSet {
    let (nq, ns) = (s.views(), s.sentences());
    let target = nq.min(ns);
    let mut order: Vec<(usize, usize)> = (0..nq).flat_map(|i| (0..ns).map(move |j| (i, j))).collect();
    order.sort_by(|&a, &b| pair_order(s, a, b));

    let mut view_taken = vec![false; nq];
    let mut sentence_taken = vec![false; ns];
    let mut pairs = Vec::with_capacity(target);
    for (i, j) in order {
        if !view_taken[i] && !sentence_taken[j] {
            view_taken[i] = true;
            sentence_taken[j] = true;
            pairs.push((i, j));
        }
        if pairs.len() == target {
            break;
        }
    }
    MatchSet { pairs }
}

/// Mean similarity over matched pairs.
pub fn aggregate_pva<T: Scalar>(s: &SimilarityMatrix<T>, matches: &MatchSet) -> Result<T> {
    if matches.is_empty() {
        return Err(invalid("cannot aggregate an empty match set"));
    }
    let mut total = T::zero();
    for &(i, j) in matches.pairs() {
        if i >= s.views() || j >= s.sentences() {
            return Err(invalid(format!(
                "pair ({i}, {j}) outside a {}x{} similarity matrix",
                s.views(),
                s.sentences()
            )));
        }
        total += s.get(i, j);
    }
    Ok(total / T::lit(matches.len() as f64))
}

/// Index of the best sentence for `view`, lowest index on ties.
pub fn row_argmax<T: Scalar>(s: &SimilarityMatrix<T>, view: usize) -> usize {
    let row = s.matrix().row(view);
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// MaxSim: each view takes its best sentence; the maxima are averaged over views.
pub fn maxsim<T: Scalar>(s: &SimilarityMatrix<T>) -> T {
    let nq = s.views();
    let total = (0..nq).fold(T::zero(), |acc, i| acc + s.get(i, row_argmax(s, i)));
    total / T::lit(nq as f64)
}

pub(crate) fn mean_row<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let n = T::lit(m.rows() as f64);
    let mut mean = vec![T::zero(); m.cols()];
    for row in m.row_iter() {
        for (a, &b) in mean.iter_mut().zip(row) {
            *a += b;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

/// Cosine between the mean view and the mean sentence.
pub fn mean_pool_similarity<T: Scalar>(views: &ViewEmbeddings<T>, sentences: &SentenceEmbeddings<T>) -> Result<T> {
    if views.dim() != sentences.dim() {
        return Err(invalid("embedding dimension mismatch"));
    }
    let mv = mean_row(views.matrix());
    let mf = mean_row(sentences.matrix());
    let (nv, nf) = (norm(&mv), norm(&mf));
    let floor = T::lit(MIN_ROW_NORM);
    if !(nv >= floor) {
        return Err(Error::DegenerateRow { row: 0, norm: nv.to_f64_lossy() });
    }
    if !(nf >= floor) {
        return Err(Error::DegenerateRow { row: 0, norm: nf.to_f64_lossy() });
    }
    Ok(dot(&mv, &mf) / (nv * nf))
}

/// How an image's views and a report's sentences become one score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Pva,
    #[serde(rename = "maxsim")]
    MaxSim,
    MeanPool,
}

impl Scorer {
    pub const ALL: [Scorer; 3] = [Scorer::Pva, Scorer::MaxSim, Scorer::MeanPool];

    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::Pva => "pva",
            Scorer::MaxSim => "maxsim",
            Scorer::MeanPool => "mean_pool",
        }
    }

    pub fn score<T: Scalar>(self, views: &ViewEmbeddings<T>, sentences: &SentenceEmbeddings<T>) -> Result<T> {
        match self {
            Scorer::Pva => {
                let s = similarity(views, sentences)?;
                aggregate_pva(&s, &pva_match(&s))
            }
            Scorer::MaxSim => Ok(maxsim(&similarity(views, sentences)?)),
            Scorer::MeanPool => mean_pool_similarity(views, sentences),
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pva" => Ok(Scorer::Pva),
            "maxsim" | "colbert" => Ok(Scorer::MaxSim),
            "mean_pool" | "mean-pool" => Ok(Scorer::MeanPool),
            other => Err(invalid(format!("unknown scorer '{other}'"))),
        }
    }
}

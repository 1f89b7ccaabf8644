//! Bidirectional retrieval over a gallery of image/report pairs and the
//! metric suite: R@k, median and mean rank, and the finding-based P@k(F) and
//! R@k(F).

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matching::{Scorer, SentenceEmbeddings, ViewEmbeddings};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Number of top-ranked candidates kept per query in a [`RankTable`].
pub const RETRIEVED_DEPTH: usize = 10;

#[derive(Clone, Debug)]
pub struct GalleryItem<T> {
    pub id: u64,
    pub views: ViewEmbeddings<T>,
    pub sentences: SentenceEmbeddings<T>,
    pub labels: Vec<bool>,
}

impl<T> GalleryItem<T> {
    pub fn has_positive_finding(&self) -> bool {
        self.labels.iter().any(|&l| l)
    }
}

#[derive(Clone, Debug)]
pub struct Gallery<T> {
    items: Vec<GalleryItem<T>>,
}

impl<T: Scalar> Gallery<T> {
    pub fn new(items: Vec<GalleryItem<T>>) -> Result<Self> {
        let mut ids: Vec<u64> = items.iter().map(|it| it.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("gallery item ids must be unique"));
        }
        if let Some(first) = items.first() {
            let n = first.labels.len();
            if items.iter().any(|it| it.labels.len() != n) {
                return Err(invalid("label vectors must have equal length"));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[GalleryItem<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Drops items whose labels are all negative.
    pub fn positive_only(&self) -> Self {
        Self { items: self.items.iter().filter(|it| it.has_positive_finding()).cloned().collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// A report queries the image gallery.
    TextToImage,
    /// An image queries the report gallery.
    ImageToText,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::TextToImage, Direction::ImageToText];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::TextToImage => "text_to_image",
            Direction::ImageToText => "image_to_text",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth rank per query plus the top of each ranked list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub direction: Direction,
    pub scorer: Scorer,
    /// 1-based rank of the ground truth, one per query in gallery order.
    pub ranks: Vec<usize>,
    /// Gallery indices of the best-scoring candidates, best first.
    pub retrieved: Vec<Vec<usize>>,
}

impl RankTable {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

/// `scores[(m, k)]` = scorer(image m's views, report k's sentences).
pub fn score_matrix<T: Scalar>(gallery: &Gallery<T>, scorer: Scorer) -> Result<Matrix<T>> {
    let items = gallery.items();
    let n = items.len();
    if n == 0 {
        return Err(invalid("empty gallery"));
    }
    let rows = items
        .par_iter()
        .map(|img| items.iter().map(|rep| scorer.score(&img.views, &rep.sentences)).collect::<Result<Vec<T>>>())
        .collect::<Result<Vec<Vec<T>>>>()?;
    Matrix::new(n, n, rows.concat())
}

/// Ranks every query against the whole gallery from a precomputed score
/// matrix. Ties are broken by ascending item id.
pub fn rank_from_scores<T: Scalar>(
    scores: &Matrix<T>,
    ids: &[u64],
    direction: Direction,
    scorer: Scorer,
) -> Result<RankTable> {
    let n = ids.len();
    if !scores.is_square() || scores.rows() != n {
        return Err(invalid("score matrix does not match the gallery"));
    }
    if n < 2 {
        return Err(invalid("retrieval needs a gallery of at least two items"));
    }
    let score = |query: usize, cand: usize| match direction {
        Direction::TextToImage => scores[(cand, query)],
        Direction::ImageToText => scores[(query, cand)],
    };
    let (ranks, retrieved) = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                score(q, b).partial_cmp(&score(q, a)).unwrap_or(std::cmp::Ordering::Equal).then(ids[a].cmp(&ids[b]))
            });
            let rank = order.iter().position(|&c| c == q).expect("query in gallery") + 1;
            order.truncate(RETRIEVED_DEPTH.min(n));
            (rank, order)
        })
        .unzip();
    Ok(RankTable { direction, scorer, ranks, retrieved })
}

pub fn rank_all<T: Scalar>(gallery: &Gallery<T>, direction: Direction, scorer: Scorer) -> Result<RankTable> {
    if gallery.len() < 2 {
        return Err(invalid("retrieval needs a gallery of at least two items"));
    }
    let scores = score_matrix(gallery, scorer)?;
    let ids: Vec<u64> = gallery.items().iter().map(|it| it.id).collect();
    rank_from_scores(&scores, &ids, direction, scorer)
}

fn non_empty(ranks: &RankTable) -> Result<()> {
    if ranks.is_empty() {
        return Err(invalid("empty rank table"));
    }
    Ok(())
}

/// Fraction of queries whose ground truth ranks within the top `k`.
pub fn recall_at_k(ranks: &RankTable, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(invalid("k must be at least 1"));
    }
    non_empty(ranks)?;
    let hits = ranks.ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub fn median_rank(ranks: &RankTable) -> Result<f64> {
    non_empty(ranks)?;
    let mut r = ranks.ranks.clone();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 { r[n / 2] as f64 } else { (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0 })
}

pub fn mean_rank(ranks: &RankTable) -> Result<f64> {
    non_empty(ranks)?;
    let total: u64 = ranks.ranks.iter().map(|&r| r as u64).sum();
    Ok(total as f64 / ranks.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingMetrics {
    pub precision: f64,
    pub recall: f64,
}

/// P@k(F): share of top-k retrieved items sharing at least one positive
/// finding with the query's ground truth, over queries whose ground truth has
/// a positive finding. R@k(F): share of queries with an item in the top `k`
/// whose labels equal the ground truth's exactly.
pub fn finding_metrics<T: Scalar>(gallery: &Gallery<T>, ranks: &RankTable, k: usize) -> Result<FindingMetrics> {
    if k < 1 {
        return Err(invalid("k must be at least 1"));
    }
    non_empty(ranks)?;
    if ranks.len() != gallery.len() {
        return Err(invalid("rank table does not belong to this gallery"));
    }
    let items = gallery.items();
    let mut shared = 0usize;
    let mut slots = 0usize;
    let mut exact = 0usize;
    for (q, list) in ranks.retrieved.iter().enumerate() {
        let depth = k.min(items.len());
        if list.len() < depth {
            return Err(invalid(format!("rank table keeps {} candidates, k = {k} requested", list.len())));
        }
        let truth = &items[q].labels;
        let top = &list[..depth];
        if top.iter().any(|&c| items[c].labels == *truth) {
            exact += 1;
        }
        if items[q].has_positive_finding() {
            slots += depth;
            shared += top.iter().filter(|&&c| items[c].labels.iter().zip(truth).any(|(&a, &b)| a && b)).count();
        }
    }
    if slots == 0 {
        return Err(invalid("no query has a positive finding"));
    }
    Ok(FindingMetrics { precision: shared as f64 / slots as f64, recall: exact as f64 / ranks.len() as f64 })
}

/// The seven numbers reported per retrieval direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub r_at_5_finding: f64,
    pub p_at_5_finding: f64,
    pub median_rank: f64,
    pub mean_rank: f64,
}

pub fn summarize<T: Scalar>(gallery: &Gallery<T>, ranks: &RankTable) -> Result<RetrievalMetrics> {
    let f = finding_metrics(gallery, ranks, 5)?;
    Ok(RetrievalMetrics {
        r_at_1: recall_at_k(ranks, 1)?,
        r_at_5: recall_at_k(ranks, 5)?,
        r_at_10: recall_at_k(ranks, 10)?,
        r_at_5_finding: f.recall,
        p_at_5_finding: f.precision,
        median_rank: median_rank(ranks)?,
        mean_rank: mean_rank(ranks)?,
    })
}

/// Both directions from one score matrix.
pub fn evaluate_both<T: Scalar>(gallery: &Gallery<T>, scorer: Scorer) -> Result<Vec<(RankTable, RetrievalMetrics)>> {
    if gallery.len() < 2 {
        return Err(invalid("retrieval needs a gallery of at least two items"));
    }
    let scores = score_matrix(gallery, scorer)?;
    let ids: Vec<u64> = gallery.items().iter().map(|it| it.id).collect();
    Direction::BOTH
        .iter()
        .map(|&d| {
            let table = rank_from_scores(&scores, &ids, d, scorer)?;
            let metrics = summarize(gallery, &table)?;
            Ok((table, metrics))
        })
        .collect()
}

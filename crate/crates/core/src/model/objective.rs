//! Batch objective `(L_I|R + L_R|I)/2 + λ·mean(repulsion)` and its gradient
//! with respect to the encoder parameters, by hand-written reverse mode.
//!
//! The PVA match (and the MaxSim argmax) is recomputed on every forward pass
//! and held fixed during the backward pass, so gradients only flow through
//! the selected similarity entries.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{backward_encoder, check_pair_dims, forward, EncoderParams, FeatureMapSet, Forward, ParamGrads};
use crate::contrastive::{info_nce, info_nce_grad, BatchSimilarity};
use crate::error::{invalid, Error, Result};
use crate::matching::{
    aggregate_pva, mean_row, pva_match, row_argmax, MatchSet, Scorer, SentenceEmbeddings, SimilarityMatrix,
};
use crate::numerics::{dot, norm, pairwise_mean, Matrix, MIN_ROW_NORM};
use crate::qd_loss::{dpp_grad_of_rows, dpp_loss_of_rows, pairwise_repulsion_grad_of_rows, pairwise_repulsion_of_rows};
use crate::scalar::Scalar;

/// Diversity regularizer on the attention maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repulsion {
    Dpp,
    Pairwise,
    None,
}

impl Repulsion {
    pub fn as_str(self) -> &'static str {
        match self {
            Repulsion::Dpp => "dpp",
            Repulsion::Pairwise => "pairwise",
            Repulsion::None => "none",
        }
    }
}

impl fmt::Display for Repulsion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Repulsion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpp" => Ok(Repulsion::Dpp),
            "pairwise" => Ok(Repulsion::Pairwise),
            "none" => Ok(Repulsion::None),
            other => Err(invalid(format!("unknown repulsion '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig<T> {
    pub matcher: Scorer,
    pub repulsion: Repulsion,
    pub temperature: T,
    pub epsilon: T,
    /// Weight on the repulsion term.
    pub lambda: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue<T> {
    pub total: T,
    /// Symmetric InfoNCE.
    pub contrastive: T,
    /// Unweighted batch mean of the repulsion term; zero for [`Repulsion::None`].
    pub repulsion: T,
    /// In-batch `Σ[image][report]`.
    pub batch_similarity: Matrix<T>,
}

/// One image–report pair of a batch.
pub type Sample<'a, T> = (&'a FeatureMapSet<T>, &'a SentenceEmbeddings<T>);

enum Selection<T> {
    Pairs(MatchSet),
    RowMax(Vec<usize>),
    MeanPool { mean_views: Vec<T>, mean_sentences: Vec<T> },
}

fn pair_score<T: Scalar>(views: &Matrix<T>, sentences: &Matrix<T>, scorer: Scorer) -> Result<(T, Selection<T>)> {
    match scorer {
        Scorer::Pva => {
            let s = SimilarityMatrix::new(views.matmul_t(sentences)?);
            let m = pva_match(&s);
            Ok((aggregate_pva(&s, &m)?, Selection::Pairs(m)))
        }
        Scorer::MaxSim => {
            let s = SimilarityMatrix::new(views.matmul_t(sentences)?);
            let arg: Vec<usize> = (0..s.views()).map(|i| row_argmax(&s, i)).collect();
            let total = arg.iter().enumerate().fold(T::zero(), |acc, (i, &j)| acc + s.get(i, j));
            Ok((total / T::lit(arg.len() as f64), Selection::RowMax(arg)))
        }
        Scorer::MeanPool => {
            let mv = mean_row(views);
            let mf = mean_row(sentences);
            let (nv, nf) = (norm(&mv), norm(&mf));
            let floor = T::lit(MIN_ROW_NORM);
            if !(nv >= floor && nf >= floor) {
                return Err(Error::DegenerateRow { row: 0, norm: nv.min(nf).to_f64_lossy() });
            }
            Ok((dot(&mv, &mf) / (nv * nf), Selection::MeanPool { mean_views: mv, mean_sentences: mf }))
        }
    }
}

/// `d_views += coeff · ∂score/∂views` for a fixed selection.
fn accumulate_score_grad<T: Scalar>(
    d_views: &mut Matrix<T>,
    coeff: T,
    sentences: &Matrix<T>,
    selection: &Selection<T>,
) {
    let nq = d_views.rows();
    match selection {
        Selection::Pairs(m) => {
            let w = coeff / T::lit(m.len() as f64);
            for &(i, j) in m.pairs() {
                for (d, &f) in d_views.row_mut(i).iter_mut().zip(sentences.row(j)) {
                    *d += w * f;
                }
            }
        }
        Selection::RowMax(arg) => {
            let w = coeff / T::lit(nq as f64);
            for (i, &j) in arg.iter().enumerate() {
                for (d, &f) in d_views.row_mut(i).iter_mut().zip(sentences.row(j)) {
                    *d += w * f;
                }
            }
        }
        Selection::MeanPool { mean_views, mean_sentences } => {
            // score = (m̂v · m̂f); ∂/∂mv = (m̂f − score·m̂v) / |mv|; ∂mv/∂v_i = 1/N_Q
            let nv = norm(mean_views);
            let nf = norm(mean_sentences);
            let mv_hat: Vec<T> = mean_views.iter().map(|&v| v / nv).collect();
            let mf_hat: Vec<T> = mean_sentences.iter().map(|&v| v / nf).collect();
            let score = dot(&mv_hat, &mf_hat);
            let w = coeff / (nv * T::lit(nq as f64));
            let g: Vec<T> = mf_hat.iter().zip(&mv_hat).map(|(&f, &v)| w * (f - score * v)).collect();
            for i in 0..nq {
                for (d, &gk) in d_views.row_mut(i).iter_mut().zip(&g) {
                    *d += gk;
                }
            }
        }
    }
}

fn check_config<T: Scalar>(batch: &[Sample<'_, T>], cfg: &ObjectiveConfig<T>) -> Result<()> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if !(cfg.lambda >= T::zero()) {
        return Err(invalid("repulsion weight must be nonnegative"));
    }
    Ok(())
}

struct BatchForward<T> {
    forwards: Vec<Forward<T>>,
    sim: BatchSimilarity<T>,
    selections: Vec<Vec<Selection<T>>>,
    repulsion: Vec<T>,
}

fn batch_forward<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &[Sample<'_, T>],
    cfg: &ObjectiveConfig<T>,
) -> Result<BatchForward<T>> {
    check_config(batch, cfg)?;
    for &(a, f) in batch {
        check_pair_dims(params, a, f)?;
    }
    let forwards = batch.par_iter().map(|&(a, _)| forward(params, a)).collect::<Result<Vec<_>>>()?;

    let rows = forwards
        .par_iter()
        .map(|fw| {
            batch.iter().map(|&(_, f)| pair_score(&fw.views, f.matrix(), cfg.matcher)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len();
    let mut sim = Matrix::zeros(b, b);
    let mut selections = Vec::with_capacity(b);
    for (m, row) in rows.into_iter().enumerate() {
        let mut sel_row = Vec::with_capacity(b);
        for (k, (score, sel)) in row.into_iter().enumerate() {
            sim[(m, k)] = score;
            sel_row.push(sel);
        }
        selections.push(sel_row);
    }
    let sim = BatchSimilarity::new(sim, cfg.temperature)?;

    let repulsion = match cfg.repulsion {
        Repulsion::None => Vec::new(),
        Repulsion::Dpp => {
            forwards.par_iter().map(|fw| dpp_loss_of_rows(&fw.attention, cfg.epsilon)).collect::<Result<Vec<_>>>()?
        }
        Repulsion::Pairwise => {
            forwards.par_iter().map(|fw| pairwise_repulsion_of_rows(&fw.attention)).collect::<Result<Vec<_>>>()?
        }
    };
    Ok(BatchForward { forwards, sim, selections, repulsion })
}

fn value_of<T: Scalar>(bf: &BatchForward<T>, cfg: &ObjectiveConfig<T>) -> ObjectiveValue<T> {
    let contrastive = info_nce(&bf.sim).symmetric();
    let repulsion = pairwise_mean(&bf.repulsion);
    let total = if cfg.repulsion == Repulsion::None { contrastive } else { contrastive + cfg.lambda * repulsion };
    ObjectiveValue { total, contrastive, repulsion, batch_similarity: bf.sim.matrix().clone() }
}

pub fn objective<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &[Sample<'_, T>],
    cfg: &ObjectiveConfig<T>,
) -> Result<ObjectiveValue<T>> {
    let bf = batch_forward(params, batch, cfg)?;
    Ok(value_of(&bf, cfg))
}

/// Objective value and its gradient with respect to every parameter.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &[Sample<'_, T>],
    cfg: &ObjectiveConfig<T>,
) -> Result<(ObjectiveValue<T>, ParamGrads<T>)> {
    let bf = batch_forward(params, batch, cfg)?;
    let value = value_of(&bf, cfg);
    let b = batch.len();
    let d_sim = info_nce_grad(&bf.sim);
    let rep_weight = cfg.lambda / T::lit(b as f64);

    let per_image = (0..b)
        .into_par_iter()
        .map(|m| -> Result<ParamGrads<T>> {
            let fw = &bf.forwards[m];
            let mut d_views = Matrix::zeros(fw.views.rows(), fw.views.cols());
            for (k, &(_, f)) in batch.iter().enumerate() {
                let coeff = d_sim[(m, k)];
                if coeff != T::zero() {
                    accumulate_score_grad(&mut d_views, coeff, f.matrix(), &bf.selections[m][k]);
                }
            }
            let d_att = match cfg.repulsion {
                Repulsion::None => None,
                _ if rep_weight == T::zero() => None,
                Repulsion::Dpp => Some(dpp_grad_of_rows(&fw.attention, cfg.epsilon)?.scale(rep_weight)),
                Repulsion::Pairwise => Some(pairwise_repulsion_grad_of_rows(&fw.attention)?.scale(rep_weight)),
            };
            let mut g = ParamGrads::zeros_like(params);
            backward_encoder(params, batch[m].0, fw, &d_views, d_att.as_ref(), &mut g)?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = ParamGrads::zeros_like(params);
    for g in &per_image {
        grads.latents.add_scaled(T::one(), &g.latents);
        grads.key_proj.add_scaled(T::one(), &g.key_proj);
        grads.value_proj.add_scaled(T::one(), &g.value_proj);
    }
    // loss depends on Σ/τ only, so ∂/∂ln τ = −Σ_mk (∂loss/∂Σ_mk) Σ_mk.
    let sim = bf.sim.matrix();
    grads.log_temperature = -d_sim.as_slice().iter().zip(sim.as_slice()).fold(T::zero(), |acc, (&g, &s)| acc + g * s);
    Ok((value, grads))
}

//! Multi-view image–report retrieval: greedy view–sentence matching, a DPP
//! diversity loss on attention maps, symmetric InfoNCE, a small trainable
//! encoder and retrieval metrics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that do not care.

// `!(x >= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrastive;
pub mod error;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod qd_loss;
pub mod retrieval;
pub mod scalar;

pub use error::{Error, Result};
pub use numerics::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type ViewEmbeddings64 = matching::ViewEmbeddings<f64>;
pub type SentenceEmbeddings64 = matching::SentenceEmbeddings<f64>;
pub type AttentionMaps64 = qd_loss::AttentionMaps<f64>;
pub type EncoderParams64 = model::EncoderParams<f64>;
pub type EncoderParams32 = model::EncoderParams<f32>;
pub type SyntheticDataset64 = model::SyntheticDataset<f64>;
pub type SyntheticDataset32 = model::SyntheticDataset<f32>;
pub type Gallery64 = retrieval::Gallery<f64>;

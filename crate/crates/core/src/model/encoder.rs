use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::matching::{SentenceEmbeddings, ViewEmbeddings};
use crate::numerics::{dot, norm, softmax_in_place, Matrix, MIN_ROW_NORM};
use crate::qd_loss::AttentionMaps;
use crate::scalar::Scalar;
use crate::Error;

/// Per-image spatial features, one row per flattened position.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet<T>(Matrix<T>);

impl<T: Scalar> FeatureMapSet<T> {
    pub fn new(m: Matrix<T>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn positions(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    /// Number of latent query tokens (views).
    pub views: usize,
    pub query_dim: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
}

/// Learnable latents plus key and value projections of a single
/// cross-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    /// `N_Q × D_Q`
    pub latents: Matrix<T>,
    /// `D_I × D_Q`
    pub key_proj: Matrix<T>,
    /// `D_I × D`
    pub value_proj: Matrix<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Latents ~ N(0, 1); projections ~ N(0, 1/D_I).
    pub fn init(shape: EncoderShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows, cols, scale: f64| {
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(z * scale)
            })
        };
        let proj_scale = 1.0 / (shape.feature_dim as f64).sqrt();
        let latents = gauss(shape.views, shape.query_dim, 1.0);
        let key_proj = gauss(shape.feature_dim, shape.query_dim, proj_scale);
        let value_proj = gauss(shape.feature_dim, shape.embed_dim, proj_scale);
        Self { latents, key_proj, value_proj }
    }

    pub fn from_parts(latents: Matrix<T>, key_proj: Matrix<T>, value_proj: Matrix<T>) -> Result<Self> {
        let p = Self { latents, key_proj, value_proj };
        p.validate()?;
        Ok(p)
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            views: self.latents.rows(),
            query_dim: self.latents.cols(),
            feature_dim: self.key_proj.rows(),
            embed_dim: self.value_proj.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_proj.cols() != self.latents.cols() {
            return Err(invalid("key projection width must equal the latent width"));
        }
        if self.value_proj.rows() != self.key_proj.rows() {
            return Err(invalid("key and value projections must read the same feature dimension"));
        }
        if !(self.latents.all_finite() && self.key_proj.all_finite() && self.value_proj.all_finite()) {
            return Err(invalid("parameters contain non-finite values"));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix<T>); 3] {
        [("latents", &self.latents), ("key_proj", &self.key_proj), ("value_proj", &self.value_proj)]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix<T>; 3] {
        [&mut self.latents, &mut self.key_proj, &mut self.value_proj]
    }

    /// SHA-256 over the little-endian `f64` image of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, m) in self.tensors() {
            for v in m.as_slice() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            latents: self.latents.cast(),
            key_proj: self.key_proj.cast(),
            value_proj: self.value_proj.cast(),
        }
    }
}

/// Gradients with the same layout as [`EncoderParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub latents: Matrix<T>,
    pub key_proj: Matrix<T>,
    pub value_proj: Matrix<T>,
    /// Derivative of the objective with respect to `ln τ`.
    pub log_temperature: T,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(p: &EncoderParams<T>) -> Self {
        Self {
            latents: Matrix::zeros(p.latents.rows(), p.latents.cols()),
            key_proj: Matrix::zeros(p.key_proj.rows(), p.key_proj.cols()),
            value_proj: Matrix::zeros(p.value_proj.rows(), p.value_proj.cols()),
            log_temperature: T::zero(),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix<T>); 3] {
        [("latents", &self.latents), ("key_proj", &self.key_proj), ("value_proj", &self.value_proj)]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 3] {
        [&mut self.latents, &mut self.key_proj, &mut self.value_proj]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.all_finite()) && self.log_temperature.is_finite()
    }

    pub fn global_norm(&self) -> T {
        self.tensors().iter().flat_map(|(_, m)| m.as_slice().iter()).fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }
}

/// Applies `param -= step(grad)` tensor by tensor.
pub(crate) fn for_each_param<T: Scalar>(
    params: &mut EncoderParams<T>,
    grads: &ParamGrads<T>,
    mut f: impl FnMut(usize, &mut Matrix<T>, &Matrix<T>),
) {
    let g = [&grads.latents, &grads.key_proj, &grads.value_proj];
    for (idx, (p, g)) in params.tensors_mut().into_iter().zip(g).enumerate() {
        f(idx, p, g);
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// `A W_k`, `l × D_Q`
    pub keys: Matrix<T>,
    /// `A W_v`, `l × D`
    pub values: Matrix<T>,
    /// Row-wise softmax of `Q keysᵀ / √D_Q`, `N_Q × l`
    pub attention: Matrix<T>,
    /// `attention · values` before normalization
    pub raw_views: Matrix<T>,
    pub view_norms: Vec<T>,
    /// Unit-norm views
    pub views: Matrix<T>,
}

impl<T: Scalar> Forward<T> {
    pub fn view_embeddings(&self) -> ViewEmbeddings<T> {
        ViewEmbeddings::new_unchecked(self.views.clone())
    }

    pub fn attention_maps(&self) -> AttentionMaps<T> {
        AttentionMaps::new_unchecked(self.attention.clone())
    }
}

pub fn forward<T: Scalar>(params: &EncoderParams<T>, features: &FeatureMapSet<T>) -> Result<Forward<T>> {
    let shape = params.shape();
    if features.dim() != shape.feature_dim {
        return Err(invalid(format!(
            "feature maps have dimension {}, encoder expects {}",
            features.dim(),
            shape.feature_dim
        )));
    }
    let a = features.matrix();
    let keys = a.matmul(&params.key_proj)?;
    let values = a.matmul(&params.value_proj)?;
    let scale = T::one() / T::lit(shape.query_dim as f64).sqrt();
    let mut attention = params.latents.matmul_t(&keys)?.scale(scale);
    for i in 0..attention.rows() {
        softmax_in_place(attention.row_mut(i));
    }
    let raw_views = attention.matmul(&values)?;
    let mut views = raw_views.clone();
    let mut view_norms = Vec::with_capacity(views.rows());
    for i in 0..views.rows() {
        let n = norm(raw_views.row(i));
        if !(n >= T::lit(MIN_ROW_NORM)) {
            return Err(Error::DegenerateRow { row: i, norm: n.to_f64_lossy() });
        }
        views.row_mut(i).iter_mut().for_each(|v| *v /= n);
        view_norms.push(n);
    }
    Ok(Forward { keys, values, attention, raw_views, view_norms, views })
}

/// Cross-attention of the latents over the feature maps:
/// `C = softmax(Q (A W_k)ᵀ / √D_Q)`, `V = normalize(C A W_v)`.
pub fn encode<T: Scalar>(
    params: &EncoderParams<T>,
    features: &FeatureMapSet<T>,
) -> Result<(ViewEmbeddings<T>, AttentionMaps<T>)> {
    let f = forward(params, features)?;
    Ok((f.view_embeddings(), f.attention_maps()))
}

/// Backpropagates `d_views` (w.r.t. unit views) and `d_attention` (added
/// directly on `C`) through one forward pass, accumulating into `grads`.
pub fn backward_encoder<T: Scalar>(
    params: &EncoderParams<T>,
    features: &FeatureMapSet<T>,
    fwd: &Forward<T>,
    d_views: &Matrix<T>,
    d_attention: Option<&Matrix<T>>,
    grads: &mut ParamGrads<T>,
) -> Result<()> {
    let a = features.matrix();
    let nq = fwd.views.rows();

    // Unit-normalization: dr = (dv − v (v·dv)) / |r|
    let mut d_raw = d_views.clone();
    for i in 0..nq {
        let v = fwd.views.row(i);
        let proj = dot(v, d_views.row(i));
        let n = fwd.view_norms[i];
        for (d, &vk) in d_raw.row_mut(i).iter_mut().zip(v) {
            *d = (*d - vk * proj) / n;
        }
    }

    // raw = C · values
    let mut d_att = d_raw.matmul_t(&fwd.values)?;
    if let Some(extra) = d_attention {
        d_att.add_scaled(T::one(), extra);
    }
    let d_values = fwd.attention.t_matmul(&d_raw)?;
    grads.value_proj.add_scaled(T::one(), &a.t_matmul(&d_values)?);

    // Row softmax: ds = c ⊙ (dc − Σ c dc)
    let mut d_scores = d_att;
    for i in 0..nq {
        let c = fwd.attention.row(i);
        let inner = dot(c, d_scores.row(i));
        for (d, &ck) in d_scores.row_mut(i).iter_mut().zip(c) {
            *d = ck * (*d - inner);
        }
    }

    // scores = Q keysᵀ / √D_Q
    let scale = T::one() / T::lit(params.latents.cols() as f64).sqrt();
    let d_scores = d_scores.scale(scale);
    grads.latents.add_scaled(T::one(), &d_scores.matmul(&fwd.keys)?);
    let d_keys = d_scores.t_matmul(&params.latents)?;
    grads.key_proj.add_scaled(T::one(), &a.t_matmul(&d_keys)?);
    Ok(())
}

/// Sentence dimension check shared by the objective.
pub(crate) fn check_pair_dims<T: Scalar>(
    params: &EncoderParams<T>,
    features: &FeatureMapSet<T>,
    sentences: &SentenceEmbeddings<T>,
) -> Result<()> {
    let shape = params.shape();
    if features.dim() != shape.feature_dim || sentences.dim() != shape.embed_dim {
        return Err(invalid(format!(
            "sample shapes (features {}, sentences {}) do not fit encoder (feature {}, embed {})",
            features.dim(),
            sentences.dim(),
            shape.feature_dim,
            shape.embed_dim
        )));
    }
    Ok(())
}

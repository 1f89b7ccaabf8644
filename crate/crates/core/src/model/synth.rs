//! Planted-concept data: each image is a grid of positions, each covered by
//! one concept instance (or background); its report has one sentence per
//! reported concept. Instances share a latent vector between the image and
//! the report, so the pairing is recoverable from the data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::encoder::FeatureMapSet;
use crate::error::{invalid, Result};
use crate::matching::{SentenceEmbeddings, DEFAULT_MAX_SENTENCES};
use crate::numerics::{dot, norm, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub samples: usize,
    /// Number of concepts `K`.
    pub concepts: usize,
    /// Flattened positions per image `l`.
    pub positions: usize,
    /// Image feature dimension `D_I`.
    pub feature_dim: usize,
    /// Sentence embedding dimension `D`.
    pub embed_dim: usize,
    /// Standard deviation `σ` of the additive noise (expected norm, not per coordinate).
    pub noise: f64,
    /// Norm scale of the sample-specific part of each concept instance.
    pub instance_scale: f64,
    /// Probability that a concept is planted in an image.
    pub inclusion_prob: f64,
    /// Probability that a planted concept is reported.
    pub report_keep: f64,
    /// Probability that a free position shows background rather than a concept.
    pub background: f64,
    pub max_sentences: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            concepts: 6,
            positions: 27,
            feature_dim: 16,
            embed_dim: 8,
            noise: 0.1,
            instance_scale: 0.5,
            inclusion_prob: 0.4,
            report_keep: 1.0,
            background: 0.0,
            max_sentences: DEFAULT_MAX_SENTENCES,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts < 2 {
            return Err(invalid("at least two concepts are required"));
        }
        if self.concepts > self.feature_dim.min(self.embed_dim) {
            return Err(invalid("concept count exceeds embedding dimension"));
        }
        if self.positions < self.concepts {
            return Err(invalid("positions must be at least the concept count"));
        }
        if self.samples == 0 {
            return Err(invalid("sample count must be positive"));
        }
        if self.max_sentences == 0 {
            return Err(invalid("max_sentences must be positive"));
        }
        let prob = |name: &str, p: f64, allow_zero: bool| {
            let lo_ok = if allow_zero { p >= 0.0 } else { p > 0.0 };
            if lo_ok && p <= 1.0 {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be a probability, got {p}")))
            }
        };
        prob("inclusion_prob", self.inclusion_prob, false)?;
        prob("report_keep", self.report_keep, false)?;
        prob("background", self.background, true)?;
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid("noise must be finite and nonnegative"));
        }
        if !(self.instance_scale >= 0.0 && self.instance_scale.is_finite()) {
            return Err(invalid("instance_scale must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Dimension of the latent space shared by images and reports.
    pub fn latent_dim(&self) -> usize {
        self.feature_dim.min(self.embed_dim)
    }

    /// Marginal probability that concept `k`'s label is positive, accounting
    /// for the redraw of empty images and the forced sentence of empty reports.
    pub fn label_marginal(&self) -> f64 {
        let k = self.concepts as i32;
        let p = self.inclusion_prob;
        let r = self.report_keep;
        let nonempty = 1.0 - (1.0 - p).powi(k);
        // P(k reported) = Σ_n P(k planted, |planted| = n)·[r + (1−r)^n / n]
        let mut total = 0.0;
        for n in 1..=k {
            let others = binomial(k - 1, n - 1) * p.powi(n) * (1.0 - p).powi(k - n);
            total += others * (r + (1.0 - r).powi(n) / n as f64);
        }
        total / nonempty
    }
}

fn binomial(n: i32, k: i32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample<T> {
    pub features: FeatureMapSet<T>,
    pub sentences: SentenceEmbeddings<T>,
    /// Concept id per position; `None` for background.
    pub assignment: Vec<Option<usize>>,
    /// Concept ids in sentence order.
    pub report_concepts: Vec<usize>,
    /// Indicator of reported concepts.
    pub labels: Vec<bool>,
}

impl<T: Scalar> SyntheticSample<T> {
    pub fn planted_concepts(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.assignment.iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset<T> {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub samples: Vec<SyntheticSample<T>>,
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `count` orthonormal vectors in `dim` dimensions by Gram–Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, &y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// `Σ_i coords[i]·basis[i]`
fn embed(basis: &[Vec<f64>], coords: &[f64]) -> Vec<f64> {
    let dim = basis[0].len();
    let mut out = vec![0.0; dim];
    for (b, &c) in basis.iter().zip(coords) {
        out.iter_mut().zip(b).for_each(|(o, &x)| *o += c * x);
    }
    out
}

struct Geometry {
    /// Latent concept directions, orthonormal in `latent_dim`.
    concepts: Vec<Vec<f64>>,
    /// Latent → image embedding (orthonormal columns).
    image_basis: Vec<Vec<f64>>,
    /// Latent → sentence embedding.
    sentence_basis: Vec<Vec<f64>>,
    background: Vec<f64>,
}

impl Geometry {
    fn draw(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let r = cfg.latent_dim();
        let concepts = orthonormal(rng, cfg.concepts, r);
        // One extra image direction for background when there is room for it.
        let extra = usize::from(cfg.feature_dim > r);
        let mut image_basis = orthonormal(rng, r + extra, cfg.feature_dim);
        let background = if extra == 1 {
            image_basis.pop().expect("extra direction")
        } else {
            orthonormal(rng, 1, cfg.feature_dim).remove(0)
        };
        let sentence_basis = orthonormal(rng, r, cfg.embed_dim);
        Self { concepts, image_basis, sentence_basis, background }
    }
}

/// Generates a dataset; identical `(config, seed)` give bit-identical output.
pub fn gen_synthetic<T: Scalar>(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticDataset<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::draw(cfg, &mut rng);
    let samples = (0..cfg.samples).map(|_| gen_sample(cfg, &geo, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { config: cfg.clone(), seed, samples })
}

fn gen_sample<T: Scalar>(cfg: &SyntheticConfig, geo: &Geometry, rng: &mut ChaCha8Rng) -> Result<SyntheticSample<T>> {
    let k = cfg.concepts;
    let r = cfg.latent_dim();
    let planted: Vec<usize> = loop {
        let p: Vec<usize> = (0..k).filter(|_| rng.random::<f64>() < cfg.inclusion_prob).collect();
        if !p.is_empty() {
            break p;
        }
    };

    // Latent instance of each planted concept: direction + sample-specific offset.
    let instances: Vec<Vec<f64>> = planted
        .iter()
        .map(|&c| {
            let offset = gaussian(rng, r, cfg.instance_scale / (r as f64).sqrt());
            geo.concepts[c].iter().zip(&offset).map(|(a, b)| a + b).collect()
        })
        .collect();

    // Every planted concept covers at least one position.
    let mut assignment: Vec<Option<usize>> = (0..planted.len()).map(Some).collect();
    while assignment.len() < cfg.positions {
        if rng.random::<f64>() < cfg.background {
            assignment.push(None);
        } else {
            assignment.push(Some(rng.random_range(0..planted.len())));
        }
    }
    assignment.shuffle(rng);

    let image_noise = cfg.noise / (cfg.feature_dim as f64).sqrt();
    let mut features = Vec::with_capacity(cfg.positions * cfg.feature_dim);
    for slot in &assignment {
        let clean = match slot {
            Some(idx) => embed(&geo.image_basis, &instances[*idx]),
            None => geo.background.clone(),
        };
        let noise = gaussian(rng, cfg.feature_dim, image_noise);
        features.extend(clean.iter().zip(&noise).map(|(a, b)| T::lit(a + b)));
    }
    let features = FeatureMapSet::new(Matrix::new(cfg.positions, cfg.feature_dim, features)?);

    let mut reported: Vec<usize> = (0..planted.len()).filter(|_| rng.random::<f64>() < cfg.report_keep).collect();
    if reported.is_empty() {
        reported.push(rng.random_range(0..planted.len()));
    }
    reported.truncate(cfg.max_sentences);

    let sentence_noise = cfg.noise / (cfg.embed_dim as f64).sqrt();
    let mut rows = Vec::with_capacity(reported.len() * cfg.embed_dim);
    for &idx in &reported {
        let mut f = embed(&geo.sentence_basis, &instances[idx]);
        let noise = gaussian(rng, cfg.embed_dim, sentence_noise);
        f.iter_mut().zip(&noise).for_each(|(a, b)| *a += b);
        let n = norm(&f);
        rows.extend(f.iter().map(|&v| T::lit(v / n)));
    }
    let sentences = SentenceEmbeddings::with_max(Matrix::new(reported.len(), cfg.embed_dim, rows)?, cfg.max_sentences)?;

    let report_concepts: Vec<usize> = reported.iter().map(|&i| planted[i]).collect();
    let mut labels = vec![false; k];
    for &c in &report_concepts {
        labels[c] = true;
    }
    let assignment = assignment.into_iter().map(|s| s.map(|i| planted[i])).collect();
    Ok(SyntheticSample { features, sentences, assignment, report_concepts, labels })
}

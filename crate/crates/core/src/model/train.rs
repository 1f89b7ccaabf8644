use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{encode, for_each_param, EncoderParams, EncoderShape, ParamGrads};
use super::objective::{backward, ObjectiveConfig, Repulsion, Sample};
use super::synth::{SyntheticDataset, SyntheticSample};
use crate::contrastive::DEFAULT_TEMPERATURE;
use crate::error::{invalid, Error, Result};
use crate::matching::Scorer;
use crate::numerics::{pairwise_mean, Matrix};
use crate::qd_loss::{pairwise_repulsion_loss, DEFAULT_EPSILON};
use crate::retrieval::{evaluate_both, Direction, Gallery, GalleryItem, RetrievalMetrics};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_latents: f64,
    pub lr_projections: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub learn_temperature: bool,
    pub lr_temperature: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub matcher: Scorer,
    pub repulsion: Repulsion,
    pub views: usize,
    pub query_dim: usize,
    /// Fraction of the dataset (taken from the end) held out for retrieval.
    pub holdout_fraction: f64,
    /// Number of training samples (from the start) used for the collapse metric.
    pub probe_size: usize,
    /// Rescale the gradient when its global norm exceeds this; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            steps: 250,
            lr_latents: 0.05,
            lr_projections: 0.05,
            momentum: 0.9,
            temperature: DEFAULT_TEMPERATURE,
            learn_temperature: false,
            lr_temperature: 0.01,
            epsilon: DEFAULT_EPSILON,
            lambda: 1.0,
            matcher: Scorer::Pva,
            repulsion: Repulsion::Dpp,
            views: 8,
            query_dim: 8,
            holdout_fraction: 0.1,
            probe_size: 32,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be nonnegative, got {v}")))
            }
        };
        // A zero rate is accepted as an explicit no-op run.
        nonneg("lr_latents", self.lr_latents)?;
        nonneg("lr_projections", self.lr_projections)?;
        nonneg("lr_temperature", self.lr_temperature)?;
        positive("temperature", self.temperature)?;
        nonneg("epsilon", self.epsilon)?;
        nonneg("lambda", self.lambda)?;
        nonneg("grad_clip", self.grad_clip)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(invalid("holdout_fraction must lie in (0, 1)"));
        }
        if self.views == 0 || self.query_dim == 0 {
            return Err(invalid("views and query_dim must be positive"));
        }
        if self.probe_size == 0 {
            return Err(invalid("probe_size must be positive"));
        }
        Ok(())
    }

    pub fn objective<T: Scalar>(&self, temperature: f64) -> ObjectiveConfig<T> {
        ObjectiveConfig {
            matcher: self.matcher,
            repulsion: self.repulsion,
            temperature: T::lit(temperature),
            epsilon: T::lit(self.epsilon),
            lambda: T::lit(self.lambda),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub contrastive: f64,
    /// Unweighted batch-mean repulsion term (DPP or pairwise); 0 when disabled.
    pub repulsion: f64,
    /// Collapse metric on the probe batch after this step's update.
    pub collapse: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub direction: Direction,
    pub metrics: RetrievalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub steps_per_epoch: usize,
    pub initial_collapse: f64,
    pub steps: Vec<StepRecord>,
    /// Collapse metric at the end of each completed epoch.
    pub epoch_collapse: Vec<f64>,
    pub final_collapse: f64,
    pub final_temperature: f64,
    /// Held-out retrieval under the configured matcher.
    pub retrieval: Vec<DirectionMetrics>,
    pub initial_checksum: String,
    pub final_checksum: String,
}

impl TrainReport {
    pub fn retrieval_for(&self, d: Direction) -> Option<&RetrievalMetrics> {
        self.retrieval.iter().find(|m| m.direction == d).map(|m| &m.metrics)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub params: EncoderParams<T>,
}

/// Train/held-out split used by [`train`]: the held-out part is the last
/// `ceil(n · fraction)` samples.
pub fn split_point(n: usize, holdout_fraction: f64) -> usize {
    let held = ((n as f64) * holdout_fraction).ceil() as usize;
    n.saturating_sub(held.max(1))
}

/// Mean pairwise cosine of attention rows, averaged over `probe` images.
pub fn collapse_metric<T: Scalar>(params: &EncoderParams<T>, probe: &[SyntheticSample<T>]) -> Result<f64> {
    let vals = probe
        .iter()
        .map(|s| {
            let (_, c) = encode(params, &s.features)?;
            Ok(pairwise_repulsion_loss(&c)?.to_f64_lossy())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_mean(&vals))
}

pub fn gallery_from<T: Scalar>(
    params: &EncoderParams<T>,
    samples: &[SyntheticSample<T>],
    first_id: u64,
) -> Result<Gallery<T>> {
    let items = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (views, _) = encode(params, &s.features)?;
            Ok(GalleryItem { id: first_id + i as u64, views, sentences: s.sentences.clone(), labels: s.labels.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Gallery::new(items)
}

pub fn evaluate_retrieval<T: Scalar>(
    params: &EncoderParams<T>,
    samples: &[SyntheticSample<T>],
    scorer: Scorer,
) -> Result<Vec<DirectionMetrics>> {
    let gallery = gallery_from(params, samples, 0)?;
    Ok(evaluate_both(&gallery, scorer)?
        .into_iter()
        .map(|(t, metrics)| DirectionMetrics { direction: t.direction, metrics })
        .collect())
}

struct Momentum<T> {
    velocity: [Matrix<T>; 3],
    temperature: f64,
}

/// SGD with momentum (`v ← μv + g; θ ← θ − ηv`) over the synthetic task.
///
/// Deterministic for a fixed config: batches come from a seeded per-epoch
/// shuffle and every reduction has a fixed order.
pub fn train<T: Scalar>(config: &TrainConfig, dataset: &SyntheticDataset<T>) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let split = split_point(dataset.len(), config.holdout_fraction);
    let (train_set, heldout) = dataset.samples.split_at(split);
    if train_set.len() < config.batch_size {
        return Err(invalid(format!(
            "{} training samples cannot fill a batch of {}",
            train_set.len(),
            config.batch_size
        )));
    }
    if heldout.len() < 2 {
        return Err(invalid("held-out split needs at least two samples"));
    }
    let first = &train_set[0];
    let shape = EncoderShape {
        views: config.views,
        query_dim: config.query_dim,
        feature_dim: first.features.dim(),
        embed_dim: first.sentences.dim(),
    };
    let mut params = EncoderParams::<T>::init(shape, config.seed);
    let probe = &train_set[..config.probe_size.min(train_set.len())];
    let steps_per_epoch = train_set.len() / config.batch_size;

    let mut report = TrainReport {
        config: config.clone(),
        train_samples: train_set.len(),
        heldout_samples: heldout.len(),
        steps_per_epoch,
        initial_collapse: collapse_metric(&params, probe)?,
        steps: Vec::with_capacity(config.steps),
        epoch_collapse: Vec::new(),
        final_collapse: f64::NAN,
        final_temperature: config.temperature,
        retrieval: Vec::new(),
        initial_checksum: params.checksum(),
        final_checksum: String::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let zeros = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
    let mut state = Momentum {
        velocity: [zeros(&params.latents), zeros(&params.key_proj), zeros(&params.value_proj)],
        temperature: 0.0,
    };
    let mut log_tau = config.temperature.ln();
    let rates = [config.lr_latents, config.lr_projections, config.lr_projections];
    let mu = T::lit(config.momentum);

    for step in 0..config.steps {
        let in_epoch = step % steps_per_epoch;
        if in_epoch == 0 {
            order.shuffle(&mut rng);
        }
        let idx = &order[in_epoch * config.batch_size..(in_epoch + 1) * config.batch_size];
        let batch: Vec<Sample<'_, T>> =
            idx.iter().map(|&i| (&train_set[i].features, &train_set[i].sentences)).collect();

        let temperature = log_tau.exp();
        let obj = config.objective::<T>(temperature);
        let (value, mut grads) = match backward(&params, &batch, &obj) {
            Ok(v) => v,
            Err(Error::NotPositiveDefinite { .. }) | Err(Error::DegenerateRow { .. }) => {
                return Err(diverged(&mut report, &params, step));
            }
            Err(e) => return Err(e),
        };
        if !value.total.is_finite() || !grads.all_finite() {
            return Err(diverged(&mut report, &params, step));
        }
        clip(&mut grads, config.grad_clip);

        let last_good = params.clone();
        for_each_param(&mut params, &grads, |i, p, g| {
            let v = &mut state.velocity[i];
            for (vk, &gk) in v.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *vk = mu * *vk + gk;
            }
            p.add_scaled(-T::lit(rates[i]), v);
        });
        if config.learn_temperature {
            state.temperature = config.momentum * state.temperature + grads.log_temperature.to_f64_lossy();
            log_tau -= config.lr_temperature * state.temperature;
        }

        let updated_ok = params.validate().is_ok() && log_tau.is_finite();
        let collapse = match collapse_metric(&params, probe) {
            Ok(c) if updated_ok && c.is_finite() => c,
            _ => return Err(diverged(&mut report, &last_good, step)),
        };
        report.steps.push(StepRecord {
            step,
            contrastive: value.contrastive.to_f64_lossy(),
            repulsion: value.repulsion.to_f64_lossy(),
            collapse,
            temperature,
        });
        if in_epoch + 1 == steps_per_epoch {
            report.epoch_collapse.push(collapse);
        }
    }

    report.final_collapse = report.steps.last().map_or(report.initial_collapse, |s| s.collapse);
    report.final_temperature = log_tau.exp();
    report.retrieval = evaluate_retrieval(&params, heldout, config.matcher)?;
    report.final_checksum = params.checksum();
    Ok(TrainOutcome { report, params })
}

fn diverged<T: Scalar>(report: &mut TrainReport, params: &EncoderParams<T>, step: usize) -> Error {
    report.final_checksum = params.checksum();
    Error::Divergence { step, report: Box::new(report.clone()) }
}

fn clip<T: Scalar>(grads: &mut ParamGrads<T>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = grads.global_norm().to_f64_lossy();
    if n > max_norm {
        let s = T::lit(max_norm / n);
        for m in grads.tensors_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
}

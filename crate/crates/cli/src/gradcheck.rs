//! Central finite-difference checks of every analytic gradient.
//!
//! Error per component is `max |analytic − numeric| / max |numeric|` over all
//! checked instances.

use mview_core::contrastive::{info_nce, info_nce_grad, BatchSimilarity};
use mview_core::matching::{Scorer, SentenceEmbeddings};
use mview_core::model::{backward, objective, EncoderParams, EncoderShape, FeatureMapSet, ObjectiveConfig, Repulsion};
use mview_core::numerics::{row_normalize, softmax_in_place};
use mview_core::qd_loss::{
    dpp_grad_of_rows, dpp_loss_of_rows, pairwise_repulsion_grad_of_rows, pairwise_repulsion_of_rows,
};
use mview_core::{Matrix, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const QD_TOL: f64 = 1e-4;
pub const CONTRASTIVE_TOL: f64 = 1e-6;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub perturb_analytic: f64,
    pub components: Vec<ComponentResult>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ComponentResult> {
        self.components.iter().max_by(|a, b| (a.max_rel_err / a.tolerance).total_cmp(&(b.max_rel_err / b.tolerance)))
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_attention(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let mut m = random_matrix(rng, rows, cols, 1.5);
    for i in 0..rows {
        softmax_in_place(m.row_mut(i));
    }
    m
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    diff / scale
}

/// Central differences of `f` at every entry of `x`.
fn numeric_grad(x: &Matrix<f64>, h: f64, mut f: impl FnMut(&Matrix<f64>) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.as_slice().len());
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = f(&probe)?;
        probe.as_mut_slice()[k] = orig - h;
        let down = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Five-point stencil with a step proportional to each entry. Attention
/// entries span many orders of magnitude, and with `N_Q > l` the loss carries
/// a large `−ln ε` constant, so a fixed small step loses to cancellation.
fn numeric_grad_relative(
    x: &Matrix<f64>,
    rel: f64,
    mut f: impl FnMut(&Matrix<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.as_slice().len());
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        let h = rel * orig.abs().max(f64::MIN_POSITIVE);
        let mut at = |d: f64| -> Result<f64> {
            probe.as_mut_slice()[k] = orig + d;
            let v = f(&probe);
            probe.as_mut_slice()[k] = orig;
            v
        };
        let n = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
        out.push(n);
    }
    Ok(out)
}

fn perturbed(g: &[f64], delta: f64) -> Vec<f64> {
    g.iter().map(|v| v * (1.0 + delta)).collect()
}

fn component(name: &str, errs: &[f64], tolerance: f64) -> ComponentResult {
    let max_rel_err = errs.iter().fold(0.0f64, |a, &e| if e.is_nan() { f64::INFINITY } else { a.max(e) });
    ComponentResult { component: name.into(), max_rel_err, tolerance, passed: max_rel_err <= tolerance }
}

pub const DPP_VIEWS: [usize; 3] = [2, 4, 8];
pub const DPP_POSITIONS: [usize; 2] = [4, 16];
const INSTANCES: usize = 3;
const DPP_EPSILON: f64 = 1e-6;

fn check_dpp(rng: &mut ChaCha8Rng, delta: f64) -> Result<(ComponentResult, ComponentResult)> {
    let (mut dpp, mut pw) = (Vec::new(), Vec::new());
    for &nq in &DPP_VIEWS {
        for &l in &DPP_POSITIONS {
            for _ in 0..INSTANCES {
                let c = random_attention(rng, nq, l);
                let a = dpp_grad_of_rows(&c, DPP_EPSILON)?;
                let n = numeric_grad_relative(&c, 1e-3, |m| dpp_loss_of_rows(m, DPP_EPSILON))?;
                dpp.push(rel_err(&perturbed(a.as_slice(), delta), &n));
                let a = pairwise_repulsion_grad_of_rows(&c)?;
                let n = numeric_grad_relative(&c, 1e-3, pairwise_repulsion_of_rows)?;
                pw.push(rel_err(&perturbed(a.as_slice(), delta), &n));
            }
        }
    }
    Ok((component("dpp_loss", &dpp, QD_TOL), component("pairwise_repulsion", &pw, QD_TOL)))
}

fn check_contrastive(rng: &mut ChaCha8Rng, delta: f64) -> Result<ComponentResult> {
    let mut errs = Vec::new();
    for &b in &[2usize, 4, 8] {
        for &tau in &[0.07, 0.5] {
            for _ in 0..INSTANCES {
                // Logits Σ/τ within ±3: saturated softmaxes have gradients near
                // 1e-12, where a relative comparison only measures rounding.
                let s = Matrix::from_fn(b, b, |_, _| 3.0 * tau * rng.random_range(-1.0..1.0));
                let a = info_nce_grad(&BatchSimilarity::new(s.clone(), tau)?);
                let n = numeric_grad(&s, 1e-6, |m| Ok(info_nce(&BatchSimilarity::new(m.clone(), tau)?).symmetric()))?;
                errs.push(rel_err(&perturbed(a.as_slice(), delta), &n));
            }
        }
    }
    Ok(component("info_nce", &errs, CONTRASTIVE_TOL))
}

pub const END_TO_END_CASES: [(Scorer, Repulsion); 5] = [
    (Scorer::Pva, Repulsion::Dpp),
    (Scorer::Pva, Repulsion::Pairwise),
    (Scorer::Pva, Repulsion::None),
    (Scorer::MaxSim, Repulsion::Dpp),
    (Scorer::MeanPool, Repulsion::None),
];

struct Problem {
    params: EncoderParams<f64>,
    features: Vec<FeatureMapSet<f64>>,
    sentences: Vec<SentenceEmbeddings<f64>>,
}

/// Two-sample batch, `N_Q = 4`, `l = 6`, `D = 8`.
fn end_to_end_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let shape = EncoderShape { views: 4, query_dim: 4, feature_dim: 6, embed_dim: 8 };
    let params = EncoderParams::init(shape, rng.random());
    let features = (0..2).map(|_| FeatureMapSet::new(random_matrix(rng, 6, shape.feature_dim, 1.0))).collect();
    let sentences = [3usize, 2]
        .iter()
        .map(|&n| SentenceEmbeddings::new(row_normalize(&random_matrix(rng, n, shape.embed_dim, 1.0))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Problem { params, features, sentences })
}

fn check_end_to_end(rng: &mut ChaCha8Rng, delta: f64) -> Result<Vec<ComponentResult>> {
    let mut out = Vec::new();
    let mut temp_errs = Vec::new();
    for (matcher, repulsion) in END_TO_END_CASES {
        let mut errs = Vec::new();
        for _ in 0..INSTANCES {
            let p = end_to_end_problem(rng)?;
            let batch: Vec<_> = p.features.iter().zip(&p.sentences).collect();
            let cfg = ObjectiveConfig { matcher, repulsion, temperature: 0.5, epsilon: 1e-6, lambda: 0.3 };
            let (_, g) = backward(&p.params, &batch, &cfg)?;
            let h = 1e-5;
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for idx in 0..3 {
                let base = p.params.tensors()[idx].1.clone();
                let n = numeric_grad(&base, h, |m| {
                    let mut q = p.params.clone();
                    match idx {
                        0 => q.latents = m.clone(),
                        1 => q.key_proj = m.clone(),
                        _ => q.value_proj = m.clone(),
                    }
                    Ok(objective(&q, &batch, &cfg)?.total)
                })?;
                analytic.extend_from_slice(g.tensors()[idx].1.as_slice());
                numeric.extend(n);
            }
            errs.push(rel_err(&perturbed(&analytic, delta), &numeric));

            let at = |log_tau: f64| -> Result<f64> {
                let c = ObjectiveConfig { temperature: log_tau.exp(), ..cfg };
                Ok(objective(&p.params, &batch, &c)?.total)
            };
            let lt = cfg.temperature.ln();
            let n = (at(lt + h)? - at(lt - h)?) / (2.0 * h);
            temp_errs.push(rel_err(&perturbed(&[g.log_temperature], delta), &[n]));
        }
        out.push(component(&format!("end_to_end/{matcher}+{repulsion}"), &errs, END_TO_END_TOL));
    }
    out.push(component("end_to_end/log_temperature", &temp_errs, END_TO_END_TOL));
    Ok(out)
}

/// Runs every suite. `perturb_analytic` scales each analytic gradient by
/// `1 + δ` before comparison, to confirm the harness catches faults.
pub fn run(seed: u64, perturb_analytic: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dpp, pw) = check_dpp(&mut rng, perturb_analytic)?;
    let mut components = vec![dpp, pw, check_contrastive(&mut rng, perturb_analytic)?];
    components.extend(check_end_to_end(&mut rng, perturb_analytic)?);
    let passed = components.iter().all(|c| c.passed);
    Ok(GradCheckReport { seed, perturb_analytic, components, passed })
}

use mview_core::matching::{Scorer, SentenceEmbeddings};
use mview_core::model::{
    backward, encode, gen_synthetic, objective, split_point, train, EncoderParams, EncoderShape, FeatureMapSet,
    ObjectiveConfig, Repulsion, Sample, SyntheticConfig, TrainConfig,
};
use mview_core::numerics::row_normalize;
use mview_core::retrieval::Direction;
use mview_core::{Error, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn shape() -> EncoderShape {
    EncoderShape { views: 4, query_dim: 4, feature_dim: 6, embed_dim: 8 }
}

fn samples(seed: u64, n: usize) -> Vec<(FeatureMapSet<f64>, SentenceEmbeddings<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let f = FeatureMapSet::new(uniform(&mut rng, 6, 6));
            let s = SentenceEmbeddings::new(row_normalize(&uniform(&mut rng, 3, 8)).unwrap()).unwrap();
            (f, s)
        })
        .collect()
}

fn cfg(matcher: Scorer, repulsion: Repulsion, lambda: f64) -> ObjectiveConfig<f64> {
    ObjectiveConfig { matcher, repulsion, temperature: 0.5, epsilon: 1e-6, lambda }
}

#[test]
fn zero_key_projection_gives_uniform_attention() {
    let mut p = EncoderParams::<f64>::init(shape(), 1);
    p.key_proj = Matrix::zeros(6, 4);
    let (views, att) = encode(&p, &samples(0, 1)[0].0).unwrap();
    for i in 0..4 {
        assert!(att.matrix().row(i).iter().all(|&c| (c - 1.0 / 6.0).abs() < 1e-15));
        let n: f64 = views.matrix().row(i).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_position_attends_fully() {
    let p = EncoderParams::<f64>::init(shape(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, att) = encode(&p, &FeatureMapSet::new(uniform(&mut rng, 1, 6))).unwrap();
    assert!(att.matrix().as_slice().iter().all(|&c| c == 1.0));
}

#[test]
fn encode_rejects_wrong_feature_dim() {
    let p = EncoderParams::<f64>::init(shape(), 2);
    assert!(encode(&p, &FeatureMapSet::new(Matrix::zeros(3, 5))).is_err());
}

fn params_as_vec(p: &EncoderParams<f64>) -> Vec<f64> {
    p.tensors().iter().flat_map(|(_, m)| m.as_slice().to_vec()).collect()
}

fn set_param(p: &mut EncoderParams<f64>, mut k: usize, v: f64) {
    for m in [&mut p.latents, &mut p.key_proj, &mut p.value_proj] {
        let len = m.as_slice().len();
        if k < len {
            m.as_mut_slice()[k] = v;
            return;
        }
        k -= len;
    }
    panic!("index out of range");
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

fn central_diff(p: &EncoderParams<f64>, f: impl Fn(&EncoderParams<f64>) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let x = params_as_vec(p);
    (0..x.len())
        .map(|k| {
            let mut up = p.clone();
            set_param(&mut up, k, x[k] + h);
            let mut down = p.clone();
            set_param(&mut down, k, x[k] - h);
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let data = samples(11, 2);
    let batch: Vec<Sample<'_, f64>> = data.iter().map(|(f, s)| (f, s)).collect();
    let p = EncoderParams::<f64>::init(shape(), 5);
    for (matcher, repulsion) in
        [(Scorer::Pva, Repulsion::Dpp), (Scorer::Pva, Repulsion::Pairwise), (Scorer::MaxSim, Repulsion::None)]
    {
        let c = cfg(matcher, repulsion, 0.3);
        let (_, g) = backward(&p, &batch, &c).unwrap();
        let analytic: Vec<f64> = g.tensors().iter().flat_map(|(_, m)| m.as_slice().to_vec()).collect();
        let numeric = central_diff(&p, |q| objective(q, &batch, &c).unwrap().total);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= 1e-3, "{matcher}/{repulsion}: {err:e}");
    }
}

/// The mean-pooled single-vector pipeline written out from scratch.
fn clip_loss(p: &EncoderParams<f64>, batch: &[(FeatureMapSet<f64>, SentenceEmbeddings<f64>)], tau: f64) -> f64 {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (nq, dq, d) = (p.latents.rows(), p.latents.cols(), p.value_proj.cols());
    let images: Vec<Vec<f64>> = batch
        .iter()
        .map(|(f, _)| {
            let a = f.matrix();
            let l = a.rows();
            let mut pooled = vec![0.0; d];
            for i in 0..nq {
                let mut scores: Vec<f64> = (0..l)
                    .map(|t| {
                        let key: Vec<f64> =
                            (0..dq).map(|c| (0..a.cols()).map(|r| a[(t, r)] * p.key_proj[(r, c)]).sum()).collect();
                        dot(p.latents.row(i), &key) / (dq as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                scores.iter_mut().for_each(|s| *s = (*s - mx).exp());
                let z: f64 = scores.iter().sum();
                let mut view = vec![0.0; d];
                for t in 0..l {
                    for (e, v) in view.iter_mut().enumerate() {
                        let value: f64 = (0..a.cols()).map(|r| a[(t, r)] * p.value_proj[(r, e)]).sum();
                        *v += scores[t] / z * value;
                    }
                }
                for (acc, v) in pooled.iter_mut().zip(unit(view)) {
                    *acc += v / nq as f64;
                }
            }
            unit(pooled)
        })
        .collect();
    let texts: Vec<Vec<f64>> = batch
        .iter()
        .map(|(_, s)| {
            let m = s.matrix();
            unit((0..m.cols()).map(|c| (0..m.rows()).map(|r| m[(r, c)]).sum::<f64>() / m.rows() as f64).collect())
        })
        .collect();
    let b = batch.len();
    let logits: Vec<Vec<f64>> = (0..b).map(|m| (0..b).map(|k| dot(&images[m], &texts[k]) / tau).collect()).collect();
    let lse = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for (m, row) in logits.iter().enumerate() {
        total += lse(&mut row.iter().copied()) - row[m];
        total += lse(&mut logits.iter().map(|r| r[m])) - row[m];
    }
    total / (2.0 * b as f64)
}

#[test]
fn mean_pool_without_repulsion_is_plain_clip() {
    let data = samples(21, 3);
    let batch: Vec<Sample<'_, f64>> = data.iter().map(|(f, s)| (f, s)).collect();
    let p = EncoderParams::<f64>::init(shape(), 8);
    let c = cfg(Scorer::MeanPool, Repulsion::Dpp, 0.0);
    let (value, g) = backward(&p, &batch, &c).unwrap();
    let oracle = clip_loss(&p, &data, 0.5);
    assert!((value.total - oracle).abs() < 1e-12, "{} vs {oracle}", value.total);
    let analytic: Vec<f64> = g.tensors().iter().flat_map(|(_, m)| m.as_slice().to_vec()).collect();
    let numeric = central_diff(&p, |q| clip_loss(q, &data, 0.5));
    assert!(max_rel_err(&analytic, &numeric) <= 1e-6);
}

#[test]
fn single_pair_batch_has_no_contrastive_signal() {
    let data = samples(4, 1);
    let batch: Vec<Sample<'_, f64>> = data.iter().map(|(f, s)| (f, s)).collect();
    let p = EncoderParams::<f64>::init(shape(), 1);
    let (value, g) = backward(&p, &batch, &cfg(Scorer::Pva, Repulsion::None, 1.0)).unwrap();
    assert_eq!(value.contrastive, 0.0);
    assert!(g.global_norm() == 0.0 && g.log_temperature == 0.0);
}

#[test]
fn log_temperature_gradient_matches_finite_differences() {
    let data = samples(9, 3);
    let batch: Vec<Sample<'_, f64>> = data.iter().map(|(f, s)| (f, s)).collect();
    let p = EncoderParams::<f64>::init(shape(), 3);
    let at = |log_tau: f64| {
        let mut c = cfg(Scorer::Pva, Repulsion::None, 0.0);
        c.temperature = log_tau.exp();
        c
    };
    let (_, g) = backward(&p, &batch, &at(0.5f64.ln())).unwrap();
    let h = 1e-6;
    let f = |x: f64| objective(&p, &batch, &at(x)).unwrap().total;
    let numeric = (f(0.5f64.ln() + h) - f(0.5f64.ln() - h)) / (2.0 * h);
    assert!((g.log_temperature - numeric).abs() <= 1e-6 * numeric.abs().max(1e-3));
}

fn small_data(seed: u64) -> mview_core::model::SyntheticDataset<f64> {
    gen_synthetic(&SyntheticConfig { samples: 200, ..SyntheticConfig::default() }, seed).unwrap()
}

fn small_train() -> TrainConfig {
    TrainConfig { steps: 40, batch_size: 16, ..TrainConfig::default() }
}

#[test]
fn zero_steps_leaves_parameters_at_init() {
    let out = train(&TrainConfig { steps: 0, ..small_train() }, &small_data(0)).unwrap();
    assert!(out.report.steps.is_empty());
    assert_eq!(out.report.initial_checksum, out.report.final_checksum);
    assert_eq!(out.report.final_collapse, out.report.initial_collapse);
    assert_eq!(out.report.retrieval.len(), 2);
}

#[test]
fn zero_learning_rates_keep_parameters() {
    let c = TrainConfig { lr_latents: 0.0, lr_projections: 0.0, steps: 10, ..small_train() };
    let out = train(&c, &small_data(0)).unwrap();
    assert_eq!(out.report.initial_checksum, out.report.final_checksum);
    assert_eq!(out.report.steps.len(), 10);
}

#[test]
fn training_is_bit_reproducible() {
    let data = small_data(3);
    let a = train(&small_train(), &data).unwrap();
    let b = train(&small_train(), &data).unwrap();
    assert_eq!(a.report.final_checksum, b.report.final_checksum);
    assert_eq!(a.params, b.params);
    let c = train(&TrainConfig { seed: 1, ..small_train() }, &data).unwrap();
    assert_ne!(a.report.final_checksum, c.report.final_checksum);
}

#[test]
fn split_and_report_bookkeeping() {
    assert_eq!(split_point(200, 0.1), 180);
    assert_eq!(split_point(2001, 0.1), 1800);
    assert_eq!(split_point(5, 0.0), 4);
    let out = train(&small_train(), &small_data(1)).unwrap();
    let r = &out.report;
    assert_eq!((r.train_samples, r.heldout_samples, r.steps_per_epoch), (180, 20, 11));
    assert_eq!(r.epoch_collapse.len(), 40 / 11);
    assert!(r.retrieval_for(Direction::TextToImage).is_some());
    assert!(r.steps.iter().all(|s| s.temperature == 0.07));
}

#[test]
fn dpp_loss_trends_down() {
    let c = TrainConfig { steps: 250, ..TrainConfig::default() };
    let out = train(&c, &gen_synthetic::<f64>(&SyntheticConfig::default(), 0).unwrap()).unwrap();
    let rep: Vec<f64> = out.report.steps.iter().map(|s| s.repulsion).collect();
    let window = 50;
    let avg = |i: usize| rep[i..i + window].iter().sum::<f64>() / window as f64;
    let first = avg(0);
    let last = avg(rep.len() - window);
    assert!(last < first, "moving average rose: {first} -> {last}");
    for i in 0..=rep.len() - window {
        assert!(avg(i) <= 1.1 * first, "step {i}: {} above 1.1 x {first}", avg(i));
    }
    assert!(out.report.final_collapse < out.report.initial_collapse);
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let c = TrainConfig { lr_latents: 1e300, lr_projections: 1e300, ..small_train() };
    match train(&c, &small_data(0)) {
        Err(Error::Divergence { step, report }) => {
            assert!(step < c.steps);
            assert_eq!(report.steps.len(), step);
            assert!(!report.final_checksum.is_empty());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report.final_checksum)),
    }
}

#[test]
fn invalid_training_configs_are_rejected() {
    let data = small_data(0);
    assert!(train(&TrainConfig { batch_size: 500, ..small_train() }, &data).is_err());
    assert!(train(&TrainConfig { temperature: 0.0, ..small_train() }, &data).is_err());
    assert!(train(&TrainConfig { views: 0, ..small_train() }, &data).is_err());
}

#[test]
fn label_marginals_match_closed_form() {
    for (p, r) in [(0.4, 1.0), (0.2, 0.5), (0.7, 0.3)] {
        let cfg = SyntheticConfig { samples: 10_000, inclusion_prob: p, report_keep: r, ..SyntheticConfig::default() };
        let data = gen_synthetic::<f64>(&cfg, 7).unwrap();
        let expected = cfg.label_marginal();
        let se = (expected * (1.0 - expected) / cfg.samples as f64).sqrt();
        for k in 0..cfg.concepts {
            let freq = data.samples.iter().filter(|s| s.labels[k]).count() as f64 / cfg.samples as f64;
            assert!((freq - expected).abs() <= 3.0 * se, "p={p} r={r} k={k}: {freq} vs {expected}");
        }
    }
}

#[test]
fn generator_basics() {
    let cfg = SyntheticConfig { samples: 50, ..SyntheticConfig::default() };
    let a = gen_synthetic::<f64>(&cfg, 1).unwrap();
    let b = gen_synthetic::<f64>(&cfg, 1).unwrap();
    let c = gen_synthetic::<f64>(&cfg, 2).unwrap();
    assert_eq!(a.samples[10].features, b.samples[10].features);
    assert_ne!(a.samples[10].features, c.samples[10].features);
    for s in &a.samples {
        assert_eq!(s.features.positions(), cfg.positions);
        assert_eq!(s.sentences.dim(), cfg.embed_dim);
        assert!(!s.planted_concepts().is_empty());
        assert!(s.report_concepts.iter().all(|k| s.planted_concepts().contains(k)));
    }
}

#[test]
fn trains_in_single_precision() {
    let data = gen_synthetic::<f32>(&SyntheticConfig { samples: 200, ..SyntheticConfig::default() }, 0).unwrap();
    let out = train(&small_train(), &data).unwrap();
    assert!(out.report.final_collapse.is_finite());
    assert_eq!(out.report.steps.len(), 40);
}

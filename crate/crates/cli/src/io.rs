//! Datasets and checkpoints on top of the MVT container.

use std::path::Path;

use mview_core::matching::SentenceEmbeddings;
use mview_core::model::{
    EncoderParams, FeatureMapSet, SyntheticConfig, SyntheticDataset, SyntheticSample, TrainConfig,
};
use mview_core::numerics::row_normalize;
use mview_core::Matrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::mvt::MvtFile;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetMeta {
    kind: String,
    generator: SyntheticConfig,
    seed: u64,
    samples: usize,
}

fn meta_err(e: serde_json::Error) -> CliError {
    CliError::Input(format!("bad container metadata: {e}"))
}

fn to_usize(v: f32, what: &str) -> CliResult<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(CliError::Input(format!("bad {what} entry {v}")))
    }
}

/// Rows per sample: `features/i`, `sentences/i`, `report/i` (concept ids),
/// plus `assignment` (−1 for background) and `labels` over the whole set.
pub fn dataset_to_mvt(ds: &SyntheticDataset<f64>) -> CliResult<MvtFile> {
    let meta = DatasetMeta { kind: "dataset".into(), generator: ds.config.clone(), seed: ds.seed, samples: ds.len() };
    let mut f = MvtFile::new(serde_json::to_value(&meta).map_err(meta_err)?);
    for (i, s) in ds.samples.iter().enumerate() {
        f.push(format!("features/{i}"), s.features.matrix());
        f.push(format!("sentences/{i}"), s.sentences.matrix());
        let ids: Vec<f64> = s.report_concepts.iter().map(|&c| c as f64).collect();
        f.push(format!("report/{i}"), &Matrix::new(1, ids.len(), ids)?);
    }
    let l = ds.config.positions;
    let assignment = Matrix::from_fn(ds.len(), l, |i, p| ds.samples[i].assignment[p].map_or(-1.0, |c| c as f64));
    let k = ds.config.concepts;
    let labels = Matrix::from_fn(ds.len(), k, |i, c| f64::from(u8::from(ds.samples[i].labels[c])));
    f.push("assignment", &assignment);
    f.push("labels", &labels);
    Ok(f)
}

/// Sentence rows are re-normalized after the `f32` round trip.
pub fn dataset_from_mvt(f: &MvtFile) -> CliResult<SyntheticDataset<f64>> {
    let meta: DatasetMeta = serde_json::from_value(f.meta.clone()).map_err(meta_err)?;
    if meta.kind != "dataset" {
        return Err(CliError::Input(format!("expected a dataset container, found '{}'", meta.kind)));
    }
    let assignment = f.get("assignment")?.cast::<f64>();
    let labels = f.get("labels")?.cast::<f64>();
    if assignment.rows() != meta.samples || labels.rows() != meta.samples {
        return Err(CliError::Input("dataset tables do not match the sample count".into()));
    }
    let mut samples = Vec::with_capacity(meta.samples);
    for i in 0..meta.samples {
        let features = FeatureMapSet::new(f.get(&format!("features/{i}"))?.cast());
        let raw = f.get(&format!("sentences/{i}"))?.cast::<f64>();
        let sentences = SentenceEmbeddings::with_max(row_normalize(&raw)?, meta.generator.max_sentences)?;
        let report_concepts = f
            .get(&format!("report/{i}"))?
            .as_slice()
            .iter()
            .map(|&v| to_usize(v, "report"))
            .collect::<CliResult<Vec<_>>>()?;
        let assign = assignment
            .row(i)
            .iter()
            .map(|&v| if v < 0.0 { Ok(None) } else { to_usize(v as f32, "assignment").map(Some) })
            .collect::<CliResult<Vec<_>>>()?;
        samples.push(SyntheticSample {
            features,
            sentences,
            assignment: assign,
            report_concepts,
            labels: labels.row(i).iter().map(|&v| v != 0.0).collect(),
        });
    }
    Ok(SyntheticDataset { config: meta.generator, seed: meta.seed, samples })
}

pub fn read_dataset(path: &Path) -> CliResult<SyntheticDataset<f64>> {
    dataset_from_mvt(&MvtFile::read(path)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub train: TrainConfig,
    pub temperature: f64,
}

pub fn write_checkpoint(
    path: &Path,
    params: &EncoderParams<f64>,
    train: &TrainConfig,
    temperature: f64,
) -> CliResult<()> {
    let meta = json!({ "kind": "checkpoint", "train": train, "temperature": temperature });
    let mut f = MvtFile::new(meta);
    for (name, m) in params.tensors() {
        f.push(name, m);
    }
    f.write(path)
}

pub fn read_checkpoint(path: &Path) -> CliResult<(EncoderParams<f64>, CheckpointMeta)> {
    let f = MvtFile::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(f.meta.clone()).map_err(meta_err)?;
    if meta.kind != "checkpoint" {
        return Err(CliError::Input(format!("expected a checkpoint container, found '{}'", meta.kind)));
    }
    let params =
        EncoderParams::from_parts(f.get("latents")?.cast(), f.get("key_proj")?.cast(), f.get("value_proj")?.cast())?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mview_core::model::gen_synthetic;

    #[test]
    fn dataset_round_trip_keeps_structure() {
        let cfg = SyntheticConfig { samples: 12, background: 0.2, report_keep: 0.5, ..Default::default() };
        let ds = gen_synthetic::<f64>(&cfg, 3).unwrap();
        let back = dataset_from_mvt(&dataset_to_mvt(&ds).unwrap()).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.config, ds.config);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.assignment, b.assignment);
            assert_eq!(a.report_concepts, b.report_concepts);
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.features.matrix().as_slice().iter().zip(b.features.matrix().as_slice()) {
                assert!((x - y).abs() < 1e-6);
            }
            for row in b.sentences.matrix().row_iter() {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}

//! Posterior-mean features from a trained FHVAE.
//!
//! Every segment (stride `shift`, default 1) is encoded to its sequence mean
//! `μ_z2` and its content mean `μ_z1 = E[z1 | x, μ_z2]`. Utterance-level
//! vectors are arithmetic means over segments (and over frames for the
//! filterbank input).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_matrix_file, segment_utterance, write_matrix_file, Corpus, DomainLabel, FeatureMatrix, SegmentRecord};
use crate::error::{Error, Result};
use crate::model::Fhvae;

/// Segment stride used for extraction.
pub const EXTRACT_SHIFT: usize = 1;

const CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures {
    pub utterance_id: String,
    /// `S × z1_dim`.
    pub mu_z1: Array2<f32>,
    /// `S × z2_dim`.
    pub mu_z2: Array2<f32>,
    pub pooled_z1: Vec<f32>,
    pub pooled_z2: Vec<f32>,
    pub pooled_fbank: Vec<f32>,
}

impl UtteranceFeatures {
    pub fn num_segments(&self) -> usize {
        self.mu_z1.nrows()
    }
}

fn pooled(m: &Array2<f64>) -> Vec<f32> {
    m.mean_axis(Axis(0)).expect("non-empty").iter().map(|&v| v as f32).collect()
}

/// Features of one utterance, or `None` (with a warning) when it is shorter
/// than one segment.
pub fn extract_features(
    model: &Fhvae,
    utterance_id: &str,
    feat: &FeatureMatrix,
    shift: usize,
) -> Result<Option<UtteranceFeatures>> {
    if shift == 0 {
        return Err(Error::Config("extraction shift must be at least 1".into()));
    }
    if feat.dim() != model.config.feat_dim {
        return Err(Error::Contract(format!(
            "{utterance_id}: features have dimension {}, model expects {}",
            feat.dim(),
            model.config.feat_dim
        )));
    }
    let segs = segment_utterance(feat, model.config.seg_len, shift, 0, DomainLabel::Control);
    if segs.is_empty() {
        log::warn!("{utterance_id}: shorter than one segment; skipped");
        return Ok(None);
    }
    let refs: Vec<&SegmentRecord> = segs.iter().collect();
    let mut z1 = Array2::zeros((segs.len(), model.config.z1_dim));
    let mut z2 = Array2::zeros((segs.len(), model.config.z2_dim));
    for (k, chunk) in refs.chunks(CHUNK).enumerate() {
        let (m2, m1) = model.posterior_means(chunk)?;
        let at = k * CHUNK;
        z1.slice_mut(ndarray::s![at..at + chunk.len(), ..]).assign(&m1);
        z2.slice_mut(ndarray::s![at..at + chunk.len(), ..]).assign(&m2);
    }
    let fbank = feat.frames.mapv(|v| v as f64);
    Ok(Some(UtteranceFeatures {
        utterance_id: utterance_id.to_string(),
        pooled_z1: pooled(&z1),
        pooled_z2: pooled(&z2),
        pooled_fbank: pooled(&fbank),
        mu_z1: z1.mapv(|v| v as f32),
        mu_z2: z2.mapv(|v| v as f32),
    }))
}

/// Extract every utterance of `corpus` in manifest order, in parallel.
pub fn extract_corpus(model: &Fhvae, corpus: &Corpus, shift: usize) -> Result<Vec<UtteranceFeatures>> {
    let out: Vec<Option<UtteranceFeatures>> = corpus
        .manifest
        .entries
        .par_iter()
        .map(|e| {
            let feat = corpus
                .features
                .get(&e.utterance_id)
                .ok_or_else(|| Error::Contract(format!("no features for utterance {}", e.utterance_id)))?;
            extract_features(model, &e.utterance_id, feat, shift)
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Z1,
    Z2,
    Both,
    Fbank,
}

impl std::str::FromStr for Which {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z1" => Ok(Self::Z1),
            "z2" => Ok(Self::Z2),
            "both" => Ok(Self::Both),
            "fbank" => Ok(Self::Fbank),
            other => Err(Error::Config(format!("unknown feature selection {other:?}"))),
        }
    }
}

/// One exported file as listed in `features.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportRecord {
    pub utterance_id: String,
    pub kind: String,
    pub path: PathBuf,
    pub rows: usize,
    pub cols: usize,
}

pub const EXPORT_MANIFEST: &str = "features.tsv";

fn to_row(v: &[f32]) -> Array2<f32> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

/// Write per-utterance matrices in the feature-file layout plus a
/// tab-separated manifest (`utterance kind path rows cols`, paths relative to
/// `dir`). Segment-level kinds are `z1`/`z2`; utterance means are
/// `pooled_z1`/`pooled_z2`/`pooled_fbank` (one row each).
pub fn export_features(features: &[UtteranceFeatures], dir: &Path, which: Which) -> Result<Vec<ExportRecord>> {
    std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
    let mut records = Vec::new();
    for f in features {
        let mut items: Vec<(&str, Array2<f32>)> = Vec::new();
        if matches!(which, Which::Z1 | Which::Both) {
            items.push(("z1", f.mu_z1.clone()));
            items.push(("pooled_z1", to_row(&f.pooled_z1)));
        }
        if matches!(which, Which::Z2 | Which::Both) {
            items.push(("z2", f.mu_z2.clone()));
            items.push(("pooled_z2", to_row(&f.pooled_z2)));
        }
        if which == Which::Fbank {
            items.push(("pooled_fbank", to_row(&f.pooled_fbank)));
        }
        for (kind, m) in items {
            let rel = PathBuf::from(format!("{}.{kind}.feat", f.utterance_id));
            write_matrix_file(&dir.join(&rel), &m)?;
            records.push(ExportRecord {
                utterance_id: f.utterance_id.clone(),
                kind: kind.to_string(),
                path: rel,
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
    }
    let mut text = String::new();
    for r in &records {
        writeln!(text, "{}\t{}\t{}\t{}\t{}", r.utterance_id, r.kind, r.path.display(), r.rows, r.cols).unwrap();
    }
    let path = dir.join(EXPORT_MANIFEST);
    std::fs::write(&path, text).map_err(Error::at_path(&path))?;
    Ok(records)
}

/// Read back a manifest written by [`export_features`]; paths are made
/// absolute against `dir`.
pub fn read_export_manifest(dir: &Path) -> Result<Vec<ExportRecord>> {
    let path = dir.join(EXPORT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(Error::at_path(&path))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Format {
                what: "feature manifest",
                detail: format!("bad line {l:?}"),
            };
            let [utt, kind, p, rows, cols] = f[..] else {
                return Err(bad());
            };
            Ok(ExportRecord {
                utterance_id: utt.to_string(),
                kind: kind.to_string(),
                path: dir.join(p),
                rows: rows.parse().map_err(|_| bad())?,
                cols: cols.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Load one exported matrix and check it against its manifest record.
pub fn load_export(record: &ExportRecord) -> Result<Array2<f32>> {
    let m = read_matrix_file(&record.path)?;
    if m.dim() != (record.rows, record.cols) {
        return Err(Error::Format {
            what: "feature manifest",
            detail: format!("{} is {:?}, manifest says {:?}", record.path.display(), m.dim(), (record.rows, record.cols)),
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Fhvae {
        Fhvae::new(
            ModelConfig {
                feat_dim: 3,
                hidden: 4,
                layers: 1,
                z1_dim: 2,
                z2_dim: 3,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    fn feat(t: usize) -> FeatureMatrix {
        FeatureMatrix::new(Array2::from_shape_fn((t, 3), |(i, j)| ((i * 3 + j) as f32 * 0.37).sin())).unwrap()
    }

    #[test]
    fn segment_counts_and_pooling() {
        let m = model();
        let one = extract_features(&m, "a", &feat(20), 1).unwrap().unwrap();
        assert_eq!(one.num_segments(), 1);
        assert_eq!(one.pooled_z1, one.mu_z1.row(0).to_vec());
        let f = extract_features(&m, "b", &feat(36), 1).unwrap().unwrap();
        assert_eq!(f.num_segments(), 17);
        assert_eq!(f.mu_z2.ncols(), 3);
        for (k, col) in f.mu_z1.axis_iter(Axis(1)).enumerate() {
            let mean = col.iter().map(|&v| v as f64).sum::<f64>() / col.len() as f64;
            assert!((mean - f.pooled_z1[k] as f64).abs() < 1e-6);
        }
        assert!(extract_features(&m, "c", &feat(19), 1).unwrap().is_none());
        let again = extract_features(&m, "b", &feat(36), 1).unwrap().unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn coarse_shift_is_aligned_subset() {
        let m = model();
        let fine = extract_features(&m, "u", &feat(60), 1).unwrap().unwrap();
        let coarse = extract_features(&m, "u", &feat(60), 8).unwrap().unwrap();
        assert_eq!(coarse.num_segments(), 6);
        for k in 0..coarse.num_segments() {
            assert_eq!(coarse.mu_z1.row(k), fine.mu_z1.row(8 * k));
            assert_eq!(coarse.mu_z2.row(k), fine.mu_z2.row(8 * k));
        }
    }

    #[test]
    fn export_round_trip() {
        let m = model();
        let feats: Vec<UtteranceFeatures> = (0..100)
            .map(|i| extract_features(&m, &format!("u{i:03}"), &feat(20 + i % 5), 1).unwrap().unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let recs = export_features(&feats, dir.path(), Which::Z1).unwrap();
        assert_eq!(recs.len(), 200);
        let back = read_export_manifest(dir.path()).unwrap();
        let seg_rows: Vec<&ExportRecord> = back.iter().filter(|r| r.kind == "z1").collect();
        assert_eq!(seg_rows.len(), 100);
        for (r, f) in seg_rows.iter().zip(&feats) {
            assert_eq!(load_export(r).unwrap(), f.mu_z1);
        }

        let empty = tempfile::tempdir().unwrap();
        assert!(export_features(&[], empty.path(), Which::Both).unwrap().is_empty());
        let files: Vec<_> = std::fs::read_dir(empty.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        assert!(read_export_manifest(empty.path()).unwrap().is_empty());
    }
}

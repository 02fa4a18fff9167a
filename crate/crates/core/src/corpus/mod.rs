//! Corpus ingestion: manifests, feature matrices, segmentation, synthetic
//! corpora and feature normalization.

mod featio;
mod frontend;
mod manifest;
mod normalize;
mod segment;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use featio::{read_feature_file, read_matrix_file, write_feature_file, write_matrix_file};
pub use frontend::{compute_corpus_features, compute_logmel, read_wav, FrontendConfig};
pub use manifest::{parse_manifest, write_manifest};
pub use normalize::{normalize_corpus, NormStats};
pub use segment::{segment_count, segment_utterance, SEGMENT_FRAMES, TRAIN_SHIFT};
pub use synth::{synth_generate, SynthConfig, SynthCorpus, SynthTruth};

/// Binary domain label: control speech is 0, dysarthric speech is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Control = 0,
    Dysarthric = 1,
}

impl DomainLabel {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Control),
            1 => Some(Self::Dysarthric),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Control => "control",
            Self::Dysarthric => "dysarthric",
        }
    }
}

impl std::str::FromStr for DomainLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control" | "0" => Ok(Self::Control),
            "dysarthric" | "1" => Ok(Self::Dysarthric),
            other => Err(Error::Format {
                what: "domain label",
                detail: format!("expected control|dysarthric|0|1, got {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMeta {
    pub speaker_id: String,
    pub domain_label: DomainLabel,
    pub intelligibility: Option<f64>,
}

impl SpeakerMeta {
    pub fn validate(&self) -> Result<()> {
        if let Some(score) = self.intelligibility {
            if !(0.0..=100.0).contains(&score) {
                return Err(Error::Contract(format!(
                    "speaker {}: intelligibility {score} outside [0, 100]",
                    self.speaker_id
                )));
            }
        }
        Ok(())
    }
}

/// Where an utterance's observations come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    /// Audio (`.wav`) or feature file (`.feat`) on disk.
    Path(PathBuf),
    /// Features held in memory alongside the manifest.
    Inline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub source: Source,
    pub speaker_id: String,
    pub labels: Option<BTreeSet<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    /// Size of the slot-value label universe (0 when unlabeled).
    pub n_labels: usize,
    pub entries: Vec<ManifestEntry>,
    pub speakers: BTreeMap<String, SpeakerMeta>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::Contract(format!("duplicate utterance id {}", e.utterance_id)));
            }
            if !self.speakers.contains_key(&e.speaker_id) {
                return Err(Error::Contract(format!(
                    "utterance {} references unknown speaker {}",
                    e.utterance_id, e.speaker_id
                )));
            }
            if let Some(labels) = &e.labels {
                if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_labels) {
                    return Err(Error::Contract(format!(
                        "utterance {}: label {bad} outside [0, {})",
                        e.utterance_id, self.n_labels
                    )));
                }
            }
        }
        for s in self.speakers.values() {
            s.validate()?;
        }
        Ok(())
    }

    pub fn speaker_of(&self, utterance_id: &str) -> Option<&SpeakerMeta> {
        self.entries
            .iter()
            .find(|e| e.utterance_id == utterance_id)
            .and_then(|e| self.speakers.get(&e.speaker_id))
    }
}

/// Per-utterance `T×D` log-mel (or synthetic) observations at 10 ms frame
/// advance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::EmptyInput("feature matrix has no frames".into()));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// One fixed-length slice of an utterance: the FHVAE training unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRecord {
    /// `SEGMENT_FRAMES × D`.
    pub x: Array2<f32>,
    pub sequence_id: usize,
    pub domain_label: DomainLabel,
    pub frame_offset: usize,
}

/// A manifest together with the features of every entry, keyed (and
/// therefore ordered) by utterance id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub features: BTreeMap<String, FeatureMatrix>,
}

impl Corpus {
    /// Load a manifest and every `.feat` file it references. Audio entries
    /// must be converted with `prepare` first.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(Error::at_path(manifest_path))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest = parse_manifest(&text, base)?;
        let mut features = BTreeMap::new();
        for e in &manifest.entries {
            match &e.source {
                Source::Path(p) if p.extension().is_some_and(|x| x == "feat") => {
                    features.insert(e.utterance_id.clone(), read_feature_file(p)?);
                }
                Source::Path(p) => {
                    return Err(Error::Config(format!(
                        "{}: not a feature file; run `prepare` to compute features",
                        p.display()
                    )))
                }
                Source::Inline => {
                    return Err(Error::Config(format!(
                        "utterance {} has no source path",
                        e.utterance_id
                    )))
                }
            }
        }
        let corpus = Self { manifest, features };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Write every feature matrix to `<dir>/feats/<id>.feat` and the manifest
    /// to `<dir>/manifest.tsv`, returning the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let feat_dir = dir.join("feats");
        std::fs::create_dir_all(&feat_dir).map_err(Error::at_path(&feat_dir))?;
        let mut manifest = self.manifest.clone();
        for e in &mut manifest.entries {
            let rel = PathBuf::from("feats").join(format!("{}.feat", e.utterance_id));
            write_feature_file(&dir.join(&rel), &self.features[&e.utterance_id])?;
            e.source = Source::Path(rel);
        }
        let path = dir.join("manifest.tsv");
        std::fs::write(&path, write_manifest(&manifest)).map_err(Error::at_path(&path))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let mut dim = None;
        for e in &self.manifest.entries {
            let f = self.features.get(&e.utterance_id).ok_or_else(|| {
                Error::Contract(format!("no features for utterance {}", e.utterance_id))
            })?;
            match dim {
                None => dim = Some(f.dim()),
                Some(d) if d != f.dim() => {
                    return Err(Error::Contract(format!(
                        "utterance {} has feature dim {}, corpus uses {d}",
                        e.utterance_id,
                        f.dim()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.values().next().map(FeatureMatrix::dim)
    }

    pub fn speaker(&self, entry: &ManifestEntry) -> &SpeakerMeta {
        &self.manifest.speakers[&entry.speaker_id]
    }

    pub fn domains(&self) -> BTreeSet<DomainLabel> {
        self.manifest
            .entries
            .iter()
            .map(|e| self.speaker(e).domain_label)
            .collect()
    }

    /// Sub-corpus restricted to the given speakers.
    pub fn with_speakers(&self, keep: impl Fn(&SpeakerMeta) -> bool) -> Corpus {
        let speakers: BTreeMap<_, _> = self
            .manifest
            .speakers
            .iter()
            .filter(|(_, s)| keep(s))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let entries: Vec<_> = self
            .manifest
            .entries
            .iter()
            .filter(|e| speakers.contains_key(&e.speaker_id))
            .cloned()
            .collect();
        let features = entries
            .iter()
            .map(|e| (e.utterance_id.clone(), self.features[&e.utterance_id].clone()))
            .collect();
        Corpus {
            manifest: CorpusManifest {
                n_labels: self.manifest.n_labels,
                entries,
                speakers,
            },
            features,
        }
    }
}

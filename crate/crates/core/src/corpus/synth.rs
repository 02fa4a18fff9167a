//! Synthetic two-factor corpora with a controllable domain shift.
//!
//! Every utterance `i` of speaker `k` has a sequence factor
//! `s_i = s_k + 0.25·ε` and is a chain of `segments_per_sequence` content
//! units of `unit_frames` frames each. A unit carries a token: either the
//! keyword of one of the utterance's intent labels or a filler. Its content
//! factor is `c = prototype[token] + 0.15·ε`. Each frame is
//! `x = A·c + B·s_i + noise_std·ε` with fixed random maps `A`, `B`.
//!
//! Dysarthric speakers have a severity `v ∈ (0.2, 1)` (intelligibility
//! `100 − 50·v`) and both factors are shifted along fixed unit directions:
//! `c += strength·v·g·u_c` with a per-unit gain `g ~ U(0.5, 1.5)`, and
//! `s_i += strength·v·u_s`. The content shift therefore varies inside an
//! utterance while the sequence shift does not.
//!
//! `world_seed` fixes the maps, prototypes and shift directions so several
//! corpora can be drawn from the same world; `seed` drives everything else.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusManifest, DomainLabel, FeatureMatrix, ManifestEntry, Source, SpeakerMeta};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_control_speakers: usize,
    pub n_dysarthric_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Content units per utterance.
    pub segments_per_sequence: usize,
    pub unit_frames: usize,
    pub feat_dim: usize,
    pub seq_factor_dim: usize,
    pub seg_factor_dim: usize,
    pub n_labels: usize,
    pub domain_shift_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub world_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_control_speakers: 8,
            n_dysarthric_speakers: 8,
            utterances_per_speaker: 8,
            segments_per_sequence: 8,
            unit_frames: 10,
            feat_dim: 80,
            seq_factor_dim: 4,
            seg_factor_dim: 4,
            n_labels: 6,
            domain_shift_strength: 1.5,
            noise_std: 0.3,
            seed: 0,
            world_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_sequences(&self) -> usize {
        (self.n_control_speakers + self.n_dysarthric_speakers) * self.utterances_per_speaker
    }

    fn validate(&self) -> Result<()> {
        let counts = [
            ("n_control_speakers + n_dysarthric_speakers", self.n_control_speakers + self.n_dysarthric_speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("segments_per_sequence", self.segments_per_sequence),
            ("unit_frames", self.unit_frames),
            ("feat_dim", self.feat_dim),
            ("seq_factor_dim", self.seq_factor_dim),
            ("seg_factor_dim", self.seg_factor_dim),
            ("n_labels", self.n_labels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth: {name} must be at least 1")));
        }
        if self.segments_per_sequence < 2 {
            return Err(Error::Config("synth: segments_per_sequence must be at least 2".into()));
        }
        if !(self.domain_shift_strength >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("synth: strength and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground-truth latent factors of one synthetic utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// Sequence factor after any domain shift.
    pub seq_factor: Vec<f64>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub truth: BTreeMap<String, SynthTruth>,
}

struct World {
    content_map: Array2<f64>,
    seq_map: Array2<f64>,
    prototypes: Vec<Array1<f64>>,
    content_dir: Array1<f64>,
    seq_dir: Array1<f64>,
}

fn normal_vec(rng: &mut Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || scale * rng.sample::<f64, _>(StandardNormal))
}

fn unit(rng: &mut Rng, n: usize) -> Array1<f64> {
    let v = normal_vec(rng, n, 1.0);
    let norm = v.dot(&v).sqrt();
    v / norm
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = stream(cfg.world_seed, Purpose::SynthWorld, 0);
        let (d, dc, ds) = (cfg.feat_dim, cfg.seg_factor_dim, cfg.seq_factor_dim);
        let content_map = Array2::from_shape_simple_fn((d, dc), || {
            rng.sample::<f64, _>(StandardNormal) / (dc as f64).sqrt()
        });
        let seq_map = Array2::from_shape_simple_fn((d, ds), || {
            rng.sample::<f64, _>(StandardNormal) / (ds as f64).sqrt()
        });
        let n_tokens = cfg.n_labels + cfg.n_labels.max(4);
        let prototypes = (0..n_tokens).map(|_| normal_vec(&mut rng, dc, 1.0)).collect();
        let content_dir = unit(&mut rng, dc);
        let seq_dir = unit(&mut rng, ds);
        Self {
            content_map,
            seq_map,
            prototypes,
            content_dir,
            seq_dir,
        }
    }
}

/// Severity in (0.2, 1.0) of the `j`-th of `n` dysarthric speakers.
fn severity(j: usize, n: usize) -> f64 {
    0.2 + 0.8 * (j as f64 + 0.5) / n as f64
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut rng = stream(cfg.seed, Purpose::Synth, cfg.world_seed);
    let normal = StandardNormal;

    let mut speakers = BTreeMap::new();
    let mut speaker_list = Vec::new();
    for j in 0..cfg.n_control_speakers {
        speaker_list.push((format!("c{j:02}"), DomainLabel::Control, 0.0));
    }
    for j in 0..cfg.n_dysarthric_speakers {
        speaker_list.push((format!("d{j:02}"), DomainLabel::Dysarthric, severity(j, cfg.n_dysarthric_speakers)));
    }

    let n_fillers = cfg.n_labels.max(4);
    let mut entries = Vec::new();
    let mut features = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for (spk_id, domain, sev) in &speaker_list {
        let intelligibility = match domain {
            DomainLabel::Control => None,
            DomainLabel::Dysarthric => Some(100.0 - 50.0 * sev),
        };
        speakers.insert(
            spk_id.clone(),
            SpeakerMeta {
                speaker_id: spk_id.clone(),
                domain_label: *domain,
                intelligibility,
            },
        );
        let spk_factor = normal_vec(&mut rng, cfg.seq_factor_dim, 1.0);
        let shift = cfg.domain_shift_strength * sev;
        for u in 0..cfg.utterances_per_speaker {
            let utt_id = format!("{spk_id}_u{u:03}");
            let mut s = &spk_factor + &normal_vec(&mut rng, cfg.seq_factor_dim, 0.25);
            if *domain == DomainLabel::Dysarthric {
                s = s + &world.seq_dir * shift;
            }

            let n_kw = if cfg.n_labels > 1 && rng.random_bool(0.5) { 2 } else { 1 };
            let n_kw = n_kw.min(cfg.segments_per_sequence);
            let mut all_labels: Vec<usize> = (0..cfg.n_labels).collect();
            all_labels.shuffle(&mut rng);
            let labels: BTreeSet<usize> = all_labels[..n_kw].iter().copied().collect();
            let mut tokens: Vec<usize> = (0..cfg.segments_per_sequence)
                .map(|_| cfg.n_labels + rng.random_range(0..n_fillers))
                .collect();
            let mut positions: Vec<usize> = (0..cfg.segments_per_sequence).collect();
            positions.shuffle(&mut rng);
            for (&label, &pos) in labels.iter().zip(&positions) {
                tokens[pos] = label;
            }

            let t_total = cfg.segments_per_sequence * cfg.unit_frames;
            let mut frames = Array2::<f32>::zeros((t_total, cfg.feat_dim));
            let seq_part = world.seq_map.dot(&s);
            for (k, &tok) in tokens.iter().enumerate() {
                let mut c = &world.prototypes[tok] + &normal_vec(&mut rng, cfg.seg_factor_dim, 0.15);
                if *domain == DomainLabel::Dysarthric {
                    let gain: f64 = rng.random_range(0.5..1.5);
                    c = c + &world.content_dir * (shift * gain);
                }
                let mean = world.content_map.dot(&c) + &seq_part;
                for f in 0..cfg.unit_frames {
                    let mut row = frames.row_mut(k * cfg.unit_frames + f);
                    for (x, m) in row.iter_mut().zip(mean.iter()) {
                        let eps: f64 = normal.sample(&mut rng);
                        *x = (m + cfg.noise_std * eps) as f32;
                    }
                }
            }

            entries.push(ManifestEntry {
                utterance_id: utt_id.clone(),
                source: Source::Inline,
                speaker_id: spk_id.clone(),
                labels: Some(labels),
            });
            features.insert(utt_id.clone(), FeatureMatrix::new(frames)?);
            truth.insert(
                utt_id,
                SynthTruth {
                    seq_factor: s.to_vec(),
                    tokens,
                },
            );
        }
    }

    let corpus = Corpus {
        manifest: CorpusManifest {
            n_labels: cfg.n_labels,
            entries,
            speakers,
        },
        features,
    };
    corpus.validate()?;
    Ok(SynthCorpus { corpus, truth })
}

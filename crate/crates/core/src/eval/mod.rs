//! Evaluation harness: domain probes under rotating k-fold speaker blocks,
//! multi-label intent recognition under speaker splits, and the method ×
//! metric comparison grid.

mod grid;
mod models;
mod splits;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use grid::{GridRow, ResultGrid};
pub use models::{
    compress_steps, micro_f1, train_intent_model, train_probe, IntentConfig, IntentModel, Probe, ProbeConfig,
};
pub use splits::{assert_disjoint, fold_rotation, kfold_blocks, split_in_domain, split_out_of_domain, Fold};

use crate::corpus::{Corpus, DomainLabel, SpeakerMeta};
use crate::error::{Error, Result};
use crate::extract::UtteranceFeatures;
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    OutOfDomain,
    InDomain,
    Kfold,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Self::OutOfDomain => "ood",
            Self::InDomain => "indomain",
            Self::Kfold => "kfold",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            Self::Kfold => "accuracy",
            _ => "micro_f1",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ood" | "out_of_domain" => Ok(Self::OutOfDomain),
            "indomain" | "in_domain" => Ok(Self::InDomain),
            "kfold" => Ok(Self::Kfold),
            other => Err(Error::Config(format!("unknown protocol {other:?} (ood, indomain, kfold)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Fbank,
    Z1,
    Z2,
    Z12,
}

impl InputKind {
    pub const ALL: [InputKind; 4] = [Self::Fbank, Self::Z1, Self::Z2, Self::Z12];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fbank => "fbank",
            Self::Z1 => "z1",
            Self::Z2 => "z2",
            Self::Z12 => "z12",
        }
    }
}

impl std::str::FromStr for InputKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown input {s:?} (fbank, z1, z2, z12)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: Protocol,
    pub threshold: f64,
    pub n_folds: usize,
    pub repeats: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: Protocol::OutOfDomain,
            threshold: 70.0,
            n_folds: 6,
            repeats: 5,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 100.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 100)", self.threshold)));
        }
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be at least 2".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: SplitSpec,
    pub probe: ProbeConfig,
    pub intent: IntentConfig,
}

/// One utterance as seen by the harness.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub utterance_id: String,
    pub speaker: SpeakerMeta,
    pub labels: Option<BTreeSet<usize>>,
    fbank: Array2<f64>,
    z1: Option<Array2<f64>>,
    z2: Option<Array2<f64>>,
}

impl EvalItem {
    /// Frame-level (fbank) or segment-level (latent) sequence.
    pub fn sequence(&self, kind: InputKind) -> Result<Array2<f64>> {
        let missing = || Error::Config(format!("input {} needs extracted features", kind.name()));
        Ok(match kind {
            InputKind::Fbank => self.fbank.clone(),
            InputKind::Z1 => self.z1.clone().ok_or_else(missing)?,
            InputKind::Z2 => self.z2.clone().ok_or_else(missing)?,
            InputKind::Z12 => {
                let (a, b) = (self.z1.as_ref().ok_or_else(missing)?, self.z2.as_ref().ok_or_else(missing)?);
                ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same segment count")
            }
        })
    }

    /// Utterance mean vector.
    pub fn pooled(&self, kind: InputKind) -> Result<Vec<f64>> {
        Ok(self.sequence(kind)?.mean_axis(Axis(0)).expect("non-empty").to_vec())
    }
}

/// Utterances in manifest order, paired with their features.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub items: Vec<EvalItem>,
    pub n_labels: usize,
}

impl EvalData {
    /// Raw-filterbank view of a corpus: only [`InputKind::Fbank`] is usable.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        Self::build(corpus, None)
    }

    /// Corpus plus extracted latents. Utterances without features (too short
    /// to segment) are dropped.
    pub fn with_features(corpus: &Corpus, features: &[UtteranceFeatures]) -> Result<Self> {
        Self::build(corpus, Some(features))
    }

    fn build(corpus: &Corpus, features: Option<&[UtteranceFeatures]>) -> Result<Self> {
        let by_id: Option<BTreeMap<&str, &UtteranceFeatures>> =
            features.map(|fs| fs.iter().map(|f| (f.utterance_id.as_str(), f)).collect());
        let mut items = Vec::new();
        for e in &corpus.manifest.entries {
            let feat = corpus
                .features
                .get(&e.utterance_id)
                .ok_or_else(|| Error::Contract(format!("no features for utterance {}", e.utterance_id)))?;
            let (z1, z2) = match &by_id {
                None => (None, None),
                Some(m) => match m.get(e.utterance_id.as_str()) {
                    Some(f) => (Some(f.mu_z1.mapv(f64::from)), Some(f.mu_z2.mapv(f64::from))),
                    None => continue,
                },
            };
            items.push(EvalItem {
                utterance_id: e.utterance_id.clone(),
                speaker: corpus.speaker(e).clone(),
                labels: e.labels.clone(),
                fbank: feat.frames.mapv(f64::from),
                z1,
                z2,
            });
        }
        if items.is_empty() {
            return Err(Error::EmptyInput("no utterances to evaluate".into()));
        }
        Ok(Self {
            items,
            n_labels: corpus.manifest.n_labels,
        })
    }

    /// Distinct speakers, ordered by id.
    pub fn speakers(&self) -> Vec<SpeakerMeta> {
        let m: BTreeMap<&str, &SpeakerMeta> = self.items.iter().map(|i| (i.speaker.speaker_id.as_str(), &i.speaker)).collect();
        m.into_values().cloned().collect()
    }

    fn of_speakers(&self, ids: &[String]) -> Vec<&EvalItem> {
        let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        self.items.iter().filter(|i| set.contains(i.speaker.speaker_id.as_str())).collect()
    }

    fn pooled_matrix(items: &[&EvalItem], kind: InputKind) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = items.iter().map(|i| i.pooled(kind)).collect::<Result<_>>()?;
        let cols = rows.first().map_or(0, Vec::len);
        Ok(Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("equal widths"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub input: InputKind,
    /// One score per repeat.
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Per test speaker, averaged over the repeats in which it was tested.
    pub per_speaker: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub metric: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, input: InputKind) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.input == input)
    }

    /// Tab-separated table: one line per input with per-repeat scores.
    pub fn to_tsv(&self) -> String {
        let n = self.rows.iter().map(|r| r.scores.len()).max().unwrap_or(0);
        let mut out = String::from("protocol\tinput\tmetric\tmean");
        for k in 0..n {
            out.push_str(&format!("\trepeat{k}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\t{:.6}", self.protocol.name(), r.input.name(), self.metric, r.mean));
            for s in &r.scores {
                out.push_str(&format!("\t{s:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{} ({}):\n", self.protocol.name(), self.metric);
        for r in &self.rows {
            out.push_str(&format!("  {:<6} mean {:.4} over {} repeats\n", r.input.name(), r.mean, r.scores.len()));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Tally of per-speaker scores across repeats.
#[derive(Default)]
struct SpeakerTally(BTreeMap<String, (f64, usize)>);

impl SpeakerTally {
    fn add(&mut self, spk: &str, score: f64) {
        let e = self.0.entry(spk.to_string()).or_default();
        e.0 += score;
        e.1 += 1;
    }

    fn means(self) -> BTreeMap<String, f64> {
        self.0.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

/// One intent repeat: train on `train` speakers, score micro-F1 on `test`.
fn intent_repeat(
    data: &EvalData,
    train: &[String],
    test: &[String],
    kind: InputKind,
    cfg: &IntentConfig,
    seed: u64,
) -> Result<(f64, Vec<(String, f64)>)> {
    assert_disjoint(train, test, &[]);
    let labelled = |items: Vec<&EvalItem>| -> Result<(Vec<Array2<f64>>, Vec<BTreeSet<usize>>, Vec<String>)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut spk = Vec::new();
        for i in items {
            let l = i
                .labels
                .clone()
                .ok_or_else(|| Error::Contract(format!("utterance {} has no intent labels", i.utterance_id)))?;
            xs.push(i.sequence(kind)?);
            ys.push(l);
            spk.push(i.speaker.speaker_id.clone());
        }
        Ok((xs, ys, spk))
    };
    let (tx, ty, _) = labelled(data.of_speakers(train))?;
    let (ex, ey, espk) = labelled(data.of_speakers(test))?;
    let model = train_intent_model(&tx, &ty, data.n_labels, cfg, seed)?;
    let pred = model.predict(&ex);
    let overall = micro_f1(&pred, &ey)?;
    let mut per = Vec::new();
    for s in test {
        let idx: Vec<usize> = (0..espk.len()).filter(|&k| &espk[k] == s).collect();
        let p: Vec<_> = idx.iter().map(|&k| pred[k].clone()).collect();
        let t: Vec<_> = idx.iter().map(|&k| ey[k].clone()).collect();
        per.push((s.clone(), micro_f1(&p, &t)?));
    }
    Ok((overall, per))
}

/// One k-fold repeat of the domain probe: accuracy pooled over all test
/// blocks, so every utterance is classified exactly once.
fn kfold_repeat(
    data: &EvalData,
    kind: InputKind,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(f64, Vec<(String, f64)>)> {
    let speakers: Vec<&SpeakerMeta> = data.items.iter().map(|i| &i.speaker).collect();
    let blocks = kfold_blocks(&speakers, cfg.split.n_folds, &mut stream(seed, Purpose::Folds, 0))?;
    let folds = fold_rotation(&blocks);
    let mut per_spk: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for (f, fold) in folds.iter().enumerate() {
        assert_disjoint(&fold.train, &fold.val, &fold.test);
        let part = |ids: &[String]| -> Result<(Array2<f64>, Vec<usize>, Vec<&EvalItem>)> {
            let items = data.of_speakers(ids);
            let y = items.iter().map(|i| i.speaker.domain_label as usize).collect();
            Ok((EvalData::pooled_matrix(&items, kind)?, y, items))
        };
        let (tx, ty, _) = part(&fold.train)?;
        let (vx, vy, _) = part(&fold.val)?;
        let (ex, ey, eitems) = part(&fold.test)?;
        let val = (!vy.is_empty()).then_some((&vx, vy.as_slice()));
        let probe = train_probe(&tx, &ty, 2, &cfg.probe, val, seed.wrapping_mul(1000) + f as u64)?;
        let pred = probe.predict(&ex);
        for ((p, t), item) in pred.iter().zip(&ey).zip(&eitems) {
            let e = per_spk.entry(item.speaker.speaker_id.clone()).or_default();
            e.0 += usize::from(p == t);
            e.1 += 1;
            hits += usize::from(p == t);
            total += 1;
        }
    }
    let per = per_spk.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect();
    Ok((hits as f64 / total as f64, per))
}

/// Run one protocol for each requested input. Repeat `r` uses seed `r`.
pub fn run_eval_suite(data: &EvalData, inputs: &[InputKind], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.split.validate()?;
    let protocol = cfg.split.mode;
    let split = match protocol {
        Protocol::Kfold => None,
        Protocol::OutOfDomain | Protocol::InDomain => {
            let dys: Vec<SpeakerMeta> = data
                .speakers()
                .into_iter()
                .filter(|s| s.domain_label == DomainLabel::Dysarthric)
                .collect();
            let (tr, te) = if protocol == Protocol::OutOfDomain {
                split_out_of_domain(&dys, cfg.split.threshold)?
            } else {
                split_in_domain(&dys)?
            };
            if te.is_empty() {
                return Err(Error::Config("split has no test speakers".into()));
            }
            Some((tr, te))
        }
    };
    let mut rows = Vec::new();
    for &kind in inputs {
        let results: Vec<(f64, Vec<(String, f64)>)> = (0..cfg.split.repeats as u64)
            .into_par_iter()
            .map(|seed| match &split {
                Some((tr, te)) => intent_repeat(data, tr, te, kind, &cfg.intent, seed),
                None => kfold_repeat(data, kind, cfg, seed),
            })
            .collect::<Result<_>>()?;
        let mut tally = SpeakerTally::default();
        for (_, per) in &results {
            for (s, v) in per {
                tally.add(s, *v);
            }
        }
        let scores: Vec<f64> = results.iter().map(|r| r.0).collect();
        rows.push(EvalRow {
            input: kind,
            mean: mean(&scores),
            scores,
            per_speaker: tally.means(),
        });
    }
    Ok(EvalReport {
        protocol,
        metric: protocol.metric().to_string(),
        rows,
    })
}

/// Held-out accuracy of a speaker-identity probe on pooled vectors: each
/// speaker's utterances are split in half (first half trains).
pub fn identity_probe_accuracy(data: &EvalData, kind: InputKind, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let speakers = data.speakers();
    let index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(k, s)| (s.speaker_id.as_str(), k)).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in &speakers {
        let mine: Vec<&EvalItem> = data.items.iter().filter(|i| i.speaker.speaker_id == s.speaker_id).collect();
        if mine.len() < 2 {
            return Err(Error::Config(format!("speaker {} needs at least two utterances", s.speaker_id)));
        }
        let half = mine.len().div_ceil(2);
        train.extend_from_slice(&mine[..half]);
        test.extend_from_slice(&mine[half..]);
    }
    let label = |items: &[&EvalItem]| -> Vec<usize> { items.iter().map(|i| index[i.speaker.speaker_id.as_str()]).collect() };
    let tx = EvalData::pooled_matrix(&train, kind)?;
    let ex = EvalData::pooled_matrix(&test, kind)?;
    let probe = train_probe(&tx, &label(&train), speakers.len(), cfg, None, seed)?;
    Ok(probe.accuracy(&ex, &label(&test)))
}

/// Summed squared Pearson cross-correlation between the columns of the
/// segment-level latents of all utterances.
pub fn latent_cross_correlation(data: &EvalData) -> Result<f64> {
    let z1: Vec<Array2<f64>> = data.items.iter().map(|i| i.sequence(InputKind::Z1)).collect::<Result<_>>()?;
    let z2: Vec<Array2<f64>> = data.items.iter().map(|i| i.sequence(InputKind::Z2)).collect::<Result<_>>()?;
    let cat = |v: &[Array2<f64>]| ndarray::concatenate(Axis(0), &v.iter().map(|m| m.view()).collect::<Vec<_>>()).expect("widths");
    crate::losses::disentangle_loss(&cat(&z1), &cat(&z2))
}

#[cfg(test)]
mod tests;

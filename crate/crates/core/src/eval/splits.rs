//! Speaker splits for the intent protocols and the k-fold probe protocol.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::corpus::{DomainLabel, SpeakerMeta};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn scored(speakers: &[SpeakerMeta]) -> Result<Vec<(f64, &str)>> {
    speakers
        .iter()
        .map(|s| {
            s.intelligibility
                .map(|x| (x, s.speaker_id.as_str()))
                .ok_or_else(|| Error::Config(format!("speaker {} has no intelligibility score", s.speaker_id)))
        })
        .collect()
}

/// Train on speakers scoring at least `threshold`, test on the rest.
pub fn split_out_of_domain(speakers: &[SpeakerMeta], threshold: f64) -> Result<(Vec<String>, Vec<String>)> {
    let s = scored(speakers)?;
    let (train, test): (Vec<_>, Vec<_>) = s.into_iter().partition(|(x, _)| *x >= threshold);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "intelligibility threshold {threshold} leaves an empty {} side",
            if train.is_empty() { "train" } else { "test" }
        )));
    }
    let ids = |v: Vec<(f64, &str)>| v.into_iter().map(|(_, id)| id.to_string()).collect();
    Ok((ids(train), ids(test)))
}

/// Rank by intelligibility (descending, ties by speaker id); odd ranks
/// train, even ranks test.
pub fn split_in_domain(speakers: &[SpeakerMeta]) -> Result<(Vec<String>, Vec<String>)> {
    let mut s = scored(speakers)?;
    s.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (rank, (_, id)) in s.into_iter().enumerate() {
        if rank % 2 == 0 {
            train.push(id.to_string());
        } else {
            test.push(id.to_string());
        }
    }
    if test.is_empty() {
        log::warn!("in-domain split has no test speakers");
    }
    Ok((train, test))
}

/// Speaker sets of one rotation step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Partition speakers into `n_folds` speaker-disjoint blocks with balanced
/// utterance counts per domain. `utterance_speakers` lists the speaker of
/// every utterance. Speakers are shuffled, then placed largest first into
/// the block with the fewest utterances of their domain.
pub fn kfold_blocks(
    utterance_speakers: &[&SpeakerMeta],
    n_folds: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<String>>> {
    if n_folds < 2 {
        return Err(Error::Config("n_folds must be at least 2".into()));
    }
    let mut counts: BTreeMap<&str, (DomainLabel, usize)> = BTreeMap::new();
    for s in utterance_speakers {
        counts.entry(s.speaker_id.as_str()).or_insert((s.domain_label, 0)).1 += 1;
    }
    let mut blocks: Vec<Vec<String>> = vec![Vec::new(); n_folds];
    for d in [DomainLabel::Control, DomainLabel::Dysarthric] {
        let mut spk: Vec<(&str, usize)> = counts
            .iter()
            .filter(|(_, (dl, _))| *dl == d)
            .map(|(id, (_, n))| (*id, *n))
            .collect();
        if spk.len() < n_folds {
            return Err(Error::Config(format!(
                "{} {} speakers cannot fill {n_folds} folds",
                spk.len(),
                d.name()
            )));
        }
        spk.shuffle(rng);
        spk.sort_by_key(|s| std::cmp::Reverse(s.1));
        let mut load = vec![0usize; n_folds];
        let mut members = vec![0usize; n_folds];
        for (id, n) in spk {
            let k = (0..n_folds)
                .min_by_key(|&k| (load[k], members[k], k))
                .expect("n_folds >= 2");
            load[k] += n;
            members[k] += 1;
            blocks[k].push(id.to_string());
        }
    }
    for b in &mut blocks {
        b.sort();
    }
    Ok(blocks)
}

/// Rotation: fold `f` tests on block `f`, validates on block `f + 1` and
/// trains on the rest. With two blocks there is no validation block.
pub fn fold_rotation(blocks: &[Vec<String>]) -> Vec<Fold> {
    let n = blocks.len();
    (0..n)
        .map(|f| {
            let val_idx = (n >= 3).then_some((f + 1) % n);
            let mut train = Vec::new();
            for (k, b) in blocks.iter().enumerate() {
                if k != f && Some(k) != val_idx {
                    train.extend(b.iter().cloned());
                }
            }
            Fold {
                train,
                val: val_idx.map(|k| blocks[k].clone()).unwrap_or_default(),
                test: blocks[f].clone(),
            }
        })
        .collect()
}

/// Panics unless the three speaker sets are pairwise disjoint.
pub fn assert_disjoint(a: &[String], b: &[String], c: &[String]) {
    let sa: BTreeSet<&String> = a.iter().collect();
    let sb: BTreeSet<&String> = b.iter().collect();
    let sc: BTreeSet<&String> = c.iter().collect();
    assert!(sa.is_disjoint(&sb) && sa.is_disjoint(&sc) && sb.is_disjoint(&sc), "speaker sets overlap");
}

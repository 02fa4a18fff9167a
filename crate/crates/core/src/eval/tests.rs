use super::*;
use crate::corpus::{synth_generate, SynthConfig};
use crate::extract::extract_corpus;
use crate::model::{Fhvae, ModelConfig};
use proptest::prelude::*;

fn corpus() -> Corpus {
    synth_generate(&SynthConfig {
        n_control_speakers: 6,
        n_dysarthric_speakers: 6,
        utterances_per_speaker: 4,
        feat_dim: 8,
        ..SynthConfig::default()
    })
    .unwrap()
    .corpus
}

fn quick() -> EvalConfig {
    EvalConfig {
        split: SplitSpec {
            repeats: 1,
            ..SplitSpec::default()
        },
        probe: ProbeConfig {
            epochs: 10,
            ..ProbeConfig::default()
        },
        intent: IntentConfig {
            epochs: 3,
            hidden: 8,
            ..IntentConfig::default()
        },
    }
}

#[test]
fn single_repeat_mean_is_the_score() {
    let data = EvalData::from_corpus(&corpus()).unwrap();
    for mode in [Protocol::OutOfDomain, Protocol::InDomain] {
        let mut cfg = quick();
        cfg.split.mode = mode;
        let rep = run_eval_suite(&data, &[InputKind::Fbank], &cfg).unwrap();
        let row = rep.row(InputKind::Fbank).unwrap();
        assert_eq!(row.scores.len(), 1);
        assert_eq!(row.mean, row.scores[0]);
        assert!((0.0..=1.0).contains(&row.mean));
        assert!(row.per_speaker.keys().all(|s| s.starts_with('d')));
        assert_eq!(rep.metric, "micro_f1");
    }
    assert!(run_eval_suite(&data, &[InputKind::Z1], &quick()).is_err());
}

#[test]
fn kfold_tests_every_speaker_and_is_deterministic() {
    let data = EvalData::from_corpus(&corpus()).unwrap();
    let mut cfg = quick();
    cfg.split.mode = Protocol::Kfold;
    cfg.split.repeats = 2;
    let a = run_eval_suite(&data, &[InputKind::Fbank], &cfg).unwrap();
    let b = run_eval_suite(&data, &[InputKind::Fbank], &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows[0].per_speaker.len(), 12);
    assert_eq!(a.metric, "accuracy");
    assert!(a.summary().contains("fbank"));
    assert_eq!(a.to_tsv().lines().count(), 2);
}

#[test]
fn latent_inputs_concatenate() {
    let c = corpus();
    let model = Fhvae::new(
        ModelConfig {
            feat_dim: 8,
            hidden: 4,
            layers: 1,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let feats = extract_corpus(&model, &c, 8).unwrap();
    let data = EvalData::with_features(&c, &feats).unwrap();
    let item = &data.items[0];
    assert_eq!(item.pooled(InputKind::Z12).unwrap().len(), 64);
    assert_eq!(item.sequence(InputKind::Z12).unwrap().nrows(), item.sequence(InputKind::Z1).unwrap().nrows());
    assert_eq!(item.pooled(InputKind::Fbank).unwrap().len(), 8);
    let acc = identity_probe_accuracy(&data, InputKind::Z2, &ProbeConfig { epochs: 5, ..ProbeConfig::default() }, 0).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(latent_cross_correlation(&data).unwrap() >= 0.0);
}

#[test]
fn spec_validation() {
    assert!(SplitSpec { threshold: 100.0, ..SplitSpec::default() }.validate().is_err());
    assert!(SplitSpec { n_folds: 1, ..SplitSpec::default() }.validate().is_err());
    assert!(SplitSpec::default().validate().is_ok());
    assert_eq!("z12".parse::<InputKind>().unwrap(), InputKind::Z12);
    assert!("z3".parse::<InputKind>().is_err());
    assert_eq!("ood".parse::<Protocol>().unwrap(), Protocol::OutOfDomain);
}

fn random_speakers(n_ctrl: usize, scores: &[f64]) -> Vec<SpeakerMeta> {
    let mut v: Vec<SpeakerMeta> = (0..n_ctrl)
        .map(|i| SpeakerMeta {
            speaker_id: format!("c{i:02}"),
            domain_label: DomainLabel::Control,
            intelligibility: None,
        })
        .collect();
    v.extend(scores.iter().enumerate().map(|(i, &s)| SpeakerMeta {
        speaker_id: format!("d{i:02}"),
        domain_label: DomainLabel::Dysarthric,
        intelligibility: Some(s),
    }));
    v
}

proptest! {
    #[test]
    fn speaker_splits_partition(scores in prop::collection::vec(0.0f64..100.0, 1..50), threshold in 1.0f64..99.0) {
        let spk = random_speakers(0, &scores);
        let ids: BTreeSet<String> = spk.iter().map(|s| s.speaker_id.clone()).collect();
        if let Ok((tr, te)) = split_out_of_domain(&spk, threshold) {
            assert_disjoint(&tr, &te, &[]);
            prop_assert_eq!(tr.len() + te.len(), spk.len());
            for s in &spk {
                let score = s.intelligibility.unwrap();
                prop_assert_eq!(tr.contains(&s.speaker_id), score >= threshold);
            }
        } else {
            prop_assert!(scores.iter().all(|&s| s >= threshold) || scores.iter().all(|&s| s < threshold));
        }
        let (tr, te) = split_in_domain(&spk).unwrap();
        assert_disjoint(&tr, &te, &[]);
        let union: BTreeSet<String> = tr.iter().chain(&te).cloned().collect();
        prop_assert_eq!(union, ids);
        prop_assert_eq!(tr.len(), spk.len().div_ceil(2));
        let score_of = |id: &String| spk.iter().find(|s| &s.speaker_id == id).unwrap().intelligibility.unwrap();
        for k in 0..te.len() {
            prop_assert!(score_of(&tr[k]) >= score_of(&te[k]));
        }
    }

    #[test]
    fn kfold_rotation_properties(
        n_ctrl in 6usize..26,
        n_dys in 6usize..25,
        utts in prop::collection::vec(1usize..9, 50),
        n_folds in 2usize..7,
        seed in 0u64..1000,
    ) {
        let spk = random_speakers(n_ctrl, &vec![50.0; n_dys]);
        let per_utt: Vec<&SpeakerMeta> = spk.iter().enumerate().flat_map(|(k, s)| std::iter::repeat_n(s, utts[k])).collect();
        let blocks = kfold_blocks(&per_utt, n_folds, &mut stream(seed, Purpose::Folds, 0)).unwrap();
        prop_assert_eq!(blocks.len(), n_folds);
        let folds = fold_rotation(&blocks);
        let mut tested: BTreeMap<&str, usize> = BTreeMap::new();
        for f in &folds {
            assert_disjoint(&f.train, &f.val, &f.test);
            prop_assert_eq!(f.train.len() + f.val.len() + f.test.len(), spk.len());
            prop_assert_eq!(f.val.is_empty(), n_folds < 3);
            for s in &f.test {
                *tested.entry(s.as_str()).or_default() += 1;
            }
        }
        prop_assert_eq!(tested.len(), spk.len());
        prop_assert!(tested.values().all(|&n| n == 1));
        // Greedy largest-first packing keeps every block within one
        // speaker's worth of utterances of the lightest block.
        for d in [DomainLabel::Control, DomainLabel::Dysarthric] {
            let count = |b: &Vec<String>| -> usize {
                per_utt.iter().filter(|s| s.domain_label == d && b.contains(&s.speaker_id)).count()
            };
            let loads: Vec<usize> = blocks.iter().map(count).collect();
            let spread = loads.iter().max().unwrap() - loads.iter().min().unwrap();
            prop_assert!(spread <= 8, "loads {loads:?}");
        }
    }
}

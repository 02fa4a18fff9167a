use super::*;
use crate::corpus::{synth_generate, SynthConfig};

fn tiny_corpus(n_ctrl: usize, n_dys: usize) -> Corpus {
    synth_generate(&SynthConfig {
        n_control_speakers: n_ctrl,
        n_dysarthric_speakers: n_dys,
        utterances_per_speaker: 3,
        feat_dim: 6,
        ..SynthConfig::default()
    })
    .unwrap()
    .corpus
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        feat_dim: 6,
        hidden: 6,
        layers: 1,
        z1_dim: 2,
        z2_dim: 2,
        disc_hidden: 4,
        ..ModelConfig::default()
    }
}

fn tiny_training(max_epochs: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: 16,
        hier_sample_size: 16,
        max_epochs,
        patience: max_epochs.min(3),
        lr_fhvae: 3e-3,
        lr_disc: 1e-3,
        ..TrainingConfig::default()
    }
}

fn data(corpus: &Corpus) -> TrainData {
    TrainData::from_corpus(corpus, 20, TRAIN_SHIFT).unwrap()
}

#[test]
fn config_validation() {
    assert!(TrainingConfig::default().validate().is_ok());
    let bad = [
        TrainingConfig {
            lr_fhvae: 0.0,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            hier_sample_size: 10,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            patience: 60,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            val_fraction: 1.0,
            ..TrainingConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn validation_split_is_disjoint_and_per_domain() {
    let d = data(&tiny_corpus(4, 4));
    let (tr, va) = d.split_validation(0.25, 3);
    let a: BTreeSet<usize> = tr.sequence_ids().into_iter().collect();
    let b: BTreeSet<usize> = va.sequence_ids().into_iter().collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(a.len() + b.len(), d.num_sequences());
    assert_eq!(va.domains().len(), 2);
    assert_eq!(b.len(), 6);
    let (_, again) = d.split_validation(0.25, 3);
    assert_eq!(again.sequence_ids(), va.sequence_ids());
}

#[test]
fn small_corpus_fits_in_one_cache() {
    let d = TrainData::from_segments(data(&tiny_corpus(1, 0)).segments);
    assert_eq!(d.num_sequences(), 3);
    let model = Fhvae::new(tiny_model(), 0).unwrap();
    let mut rng = stream(1, Purpose::Sampling, 0);
    let mut s = hierarchical_sample(&d, 5000, 4, &PriorConfig::default(), &mut rng).unwrap();
    let block = s.next_block(&model, &mut rng).unwrap().unwrap();
    assert_eq!(block.cache.len(), 3);
    assert!(s.next_block(&model, &mut rng).unwrap().is_none());
    assert!(hierarchical_sample(&TrainData::default(), 5, 4, &PriorConfig::default(), &mut rng).is_err());
}

fn epoch_plan(d: &TrainData, model: &Fhvae, k: usize, seed: u64) -> Vec<(Vec<usize>, Vec<Vec<usize>>)> {
    let mut rng = stream(seed, Purpose::Sampling, 0);
    let mut s = hierarchical_sample(d, k, 5, &PriorConfig::default(), &mut rng).unwrap();
    let mut out = Vec::new();
    while let Some(b) = s.next_block(model, &mut rng).unwrap() {
        out.push((b.cache.seq_ids.clone(), b.batches));
    }
    out
}

#[test]
fn sampling_is_deterministic_and_stays_in_cache() {
    let d = data(&tiny_corpus(3, 2));
    let model = Fhvae::new(tiny_model(), 0).unwrap();
    assert_eq!(epoch_plan(&d, &model, 6, 9), epoch_plan(&d, &model, 6, 9));
    for seed in 0..10 {
        let plan = epoch_plan(&d, &model, 6, seed);
        let mut seen = BTreeSet::new();
        for (seqs, batches) in &plan {
            assert!(seqs.len() <= 6);
            for s in seqs {
                assert!(seen.insert(*s), "sequence cached twice in one epoch");
            }
            for b in batches {
                for &i in b {
                    assert!(seqs.contains(&d.segments[i].sequence_id));
                }
            }
        }
        assert_eq!(seen.len(), d.num_sequences());
    }
}

#[test]
fn cache_means_follow_shrinkage() {
    let d = data(&tiny_corpus(1, 0));
    let model = Fhvae::new(tiny_model(), 2).unwrap();
    let priors = PriorConfig::default();
    let ids = d.sequence_ids();
    let cache = build_cache(&model, &d, &ids, &priors).unwrap();
    for &s in &ids {
        let segs: Vec<&SegmentRecord> = d.segments_of(s).iter().map(|&i| &d.segments[i]).collect();
        let means = model.z2_means(&segs).unwrap();
        let rows: Vec<Vec<f64>> = means.outer_iter().map(|r| r.to_vec()).collect();
        let expect = crate::model::infer_seq_mean(&rows, &priors).unwrap();
        assert_eq!(cache.mu2_of(s).unwrap(), expect);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let corpus = tiny_corpus(2, 0);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let out = pretrain(&corpus, tiny_model(), &tiny_training(1), &opts).unwrap();
    let path = dir.path().join("latest.ckpt");
    let bytes = std::fs::read(&path).unwrap();
    let ck = decode_checkpoint(&bytes).unwrap();
    assert_eq!(ck, out.latest);
    assert_eq!(encode_checkpoint(&ck).unwrap(), bytes);

    let model = out.latest.model().unwrap();
    let loaded = ck.model().unwrap();
    let d = data(&corpus);
    let segs: Vec<&SegmentRecord> = d.segments.iter().take(4).collect();
    let a = model.posterior_means(&segs).unwrap();
    let b = loaded.posterior_means(&segs).unwrap();
    assert_eq!(a, b);

    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::Format { .. })));
    let mut wrong = bytes.clone();
    wrong[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&wrong), Err(Error::Version { found: 7, .. })));
}

#[test]
fn pretraining_reduces_loss() {
    let corpus = tiny_corpus(2, 0);
    let cfg = TrainingConfig {
        patience: 5,
        ..tiny_training(5)
    };
    let out = pretrain(&corpus, tiny_model(), &cfg, &RunOptions::default()).unwrap();
    assert_eq!(out.epochs.len(), 5);
    assert!(out.epochs[4].train.total < out.epochs[0].train.total);
    assert!(out.epochs.iter().all(|e| e.train.gen_loss == 0.0 && e.train.ref_loss == 0.0));
}

#[test]
fn zero_patience_stops_after_first_bad_epoch() {
    let corpus = tiny_corpus(2, 0);
    let cfg = TrainingConfig {
        patience: 0,
        lr_fhvae: 0.5,
        ..tiny_training(8)
    };
    let out = pretrain(&corpus, tiny_model(), &cfg, &RunOptions::default()).unwrap();
    let first_bad = out.epochs.iter().position(|e| e.bad_epochs == 1);
    if let Some(k) = first_bad {
        assert!(out.stopped_early);
        assert_eq!(out.epochs.len(), k + 1);
    } else {
        assert_eq!(out.epochs.len(), 8);
    }
}

#[test]
fn resume_reproduces_metrics_bitwise() {
    let corpus = tiny_corpus(2, 1);
    let cfg = tiny_training(3);
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let opts = |dir: &Path| RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    };
    pretrain(&corpus, tiny_model(), &cfg, &opts(full.path())).unwrap();
    let partial = RunOptions {
        stop_after_epochs: Some(1),
        ..opts(split.path())
    };
    pretrain(&corpus, tiny_model(), &cfg, &partial).unwrap();
    // Simulate a crash part-way through epoch 2 that left stray lines.
    let metrics = split.path().join("metrics.jsonl");
    let mut text = std::fs::read_to_string(&metrics).unwrap();
    text.push_str("{\"kind\":\"step\",\"epoch\":1,\"step\":999}\n");
    std::fs::write(&metrics, text).unwrap();
    let ck = load_checkpoint(&split.path().join("latest.ckpt")).unwrap();
    let resumed = RunOptions {
        resume: Some(ck),
        ..opts(split.path())
    };
    pretrain(&corpus, tiny_model(), &cfg, &resumed).unwrap();
    let a = std::fs::read(full.path().join("metrics.jsonl")).unwrap();
    let b = std::fs::read(metrics).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(full.path().join("latest.ckpt")).unwrap(),
        std::fs::read(split.path().join("latest.ckpt")).unwrap()
    );
}

#[test]
fn adversarial_needs_both_domains() {
    let corpus = tiny_corpus(2, 0);
    let pre = pretrain(&corpus, tiny_model(), &tiny_training(1), &RunOptions::default()).unwrap();
    let mut cfg = tiny_training(1);
    cfg.flags.adversarial = true;
    assert!(matches!(
        finetune(&pre.best, &corpus, &cfg, &RunOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn plain_finetuning_matches_pretraining_objective() {
    let corpus = tiny_corpus(2, 1);
    let pre = pretrain(&corpus, tiny_model(), &tiny_training(1), &RunOptions::default()).unwrap();
    let cfg = tiny_training(2);
    let ft = finetune(&pre.best, &corpus, &cfg, &RunOptions::default()).unwrap();
    for e in &ft.epochs {
        let r = &e.train;
        assert!((r.total - (r.lb_loss + 10.0 * r.z2_disc_loss)).abs() < 1e-9 * (1.0 + r.total.abs()));
        assert_eq!(r.gen_loss, 0.0);
        assert_eq!(r.ref_loss, 0.0);
        assert!(e.val_components.reference > 0.0, "reference divergence is still measured");
    }
}

#[test]
fn adversarial_finetuning_runs_all_epochs_with_isolated_updates() {
    let corpus = tiny_corpus(2, 2);
    let pre = pretrain(&corpus, tiny_model(), &tiny_training(1), &RunOptions::default()).unwrap();
    let cfg = TrainingConfig {
        flags: TermFlags {
            adversarial: true,
            reference: true,
            gen_dys_only: true,
            disentangle: true,
        },
        patience: 0,
        ..tiny_training(3)
    };
    let ft = finetune(&pre.best, &corpus, &cfg, &RunOptions::default()).unwrap();
    assert!(!ft.stopped_early);
    assert_eq!(ft.epochs.len(), 3);
    let last = ft.epochs.last().unwrap();
    assert!(last.val_disc_accuracy.is_some());
    assert!(last.train.disc_loss > 0.0);
    assert!(ft.latest.disc.is_some() && ft.latest.reference.is_some());
    assert_eq!(ft.latest.reference.as_ref().unwrap(), &pre.best.fhvae);
}

#[test]
fn objective_gradients_match_finite_differences() {
    let corpus = tiny_corpus(1, 1);
    let d = data(&corpus);
    let cfg_m = ModelConfig {
        hidden: 4,
        ..tiny_model()
    };
    let model = Fhvae::new(cfg_m.clone(), 5).unwrap();
    let reference = Fhvae::new(cfg_m.clone(), 6).unwrap();
    let disc = Discriminator::new(&cfg_m, 7);
    let cfg = TrainingConfig {
        flags: TermFlags {
            adversarial: true,
            reference: true,
            gen_dys_only: false,
            disentangle: true,
        },
        ..tiny_training(1)
    };
    let segs: Vec<&SegmentRecord> = [0, 9, 17, 30].iter().map(|&i| &d.segments[i]).collect();
    let cache = build_cache(&model, &d, &d.sequence_ids(), &cfg.priors).unwrap();
    let eval = |m: &Fhvae| {
        fhvae_objective(ObjectiveInputs {
            model: m,
            disc: Some(&disc),
            reference: Some(&reference),
            cfg: &cfg,
            segs: &segs,
            cache: &cache,
            noise_seed: Some(3),
        })
        .unwrap()
    };
    let (_, grads) = eval(&model);
    let h = 1e-5;
    // A spread of scalars from every tensor keeps the unit test quick; the
    // acceptance suite checks every scalar.
    for (t, grad) in grads.iter().enumerate() {
        for idx in [0, grad.len() / 2, grad.len() - 1] {
            let shift = |delta: f64| {
                let mut m = model.clone();
                m.params.values_mut()[t].as_slice_mut().unwrap()[idx] += delta;
                eval(&m).0.total
            };
            let num = (shift(h) - shift(-h)) / (2.0 * h);
            let ana = grad.iter().nth(idx).copied().unwrap();
            let tol = 1e-3 * num.abs().max(ana.abs()).max(1e-2);
            assert!((num - ana).abs() <= tol, "tensor {t} element {idx}: numeric {num}, analytic {ana}");
        }
    }
}

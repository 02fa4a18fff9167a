//! Pretraining and finetuning with hierarchical sampling.
//!
//! An epoch is one pass over the training sequences. The sequences are
//! shuffled and cut into cache blocks of at most `hier_sample_size`; for each
//! block `μ̃2` is estimated from the current sequence encoder and held fixed
//! while the block's segments are visited in shuffled batches.
//!
//! Finetuning with the adversarial flag runs, per batch, the discriminator
//! update first and then one FHVAE update on the same batch. The FHVAE tape
//! sees discriminator parameters only as constants, and the two optimizers
//! never share state.
//!
//! All randomness of epoch `e` comes from `(seed, purpose, e)` streams, so a
//! run resumed from the checkpoint written after epoch `e` continues exactly
//! as the uninterrupted run would.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, ResumeState, Stage,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::autodiff::{Graph, Var};
use crate::corpus::{segment_utterance, Corpus, DomainLabel, SegmentRecord, TRAIN_SHIFT};
use crate::error::{Error, Result};
use crate::losses::{
    bce_logit_rows, disentangle_graph, lower_bound_rows, reference_rows, total_fhvae_loss, z2_disc_rows,
    GenMode, KlDirection, LossComponents, LossReport, LossWeights, LowerBoundInputs, TermFlags,
};
use crate::model::{Discriminator, Fhvae, GaussVars, ModelConfig, PriorConfig, SegmentBatch, SequenceCache};
use crate::nn::{Bound, ParamStore};
use crate::optim::Adam;
use crate::rng::{stream, Purpose, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr_fhvae: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
    pub hier_sample_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weights: LossWeights,
    pub flags: TermFlags,
    pub seed: u64,
    /// Discriminator updates per batch.
    pub n_disc_steps: usize,
    /// Re-estimate `μ̃2` of the whole cache before every step.
    pub refresh_mu2_each_step: bool,
    pub kl_direction: KlDirection,
    /// Share of sequences held out for validation, per domain.
    pub val_fraction: f64,
    pub seg_shift: usize,
    pub priors: PriorConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr_fhvae: 1e-3,
            lr_disc: 2e-4,
            batch_size: 500,
            hier_sample_size: 5000,
            max_epochs: 50,
            patience: 10,
            weights: LossWeights::default(),
            flags: TermFlags::default(),
            seed: 0,
            n_disc_steps: 1,
            refresh_mu2_each_step: false,
            kl_direction: KlDirection::ReferenceFirst,
            val_fraction: 0.1,
            seg_shift: TRAIN_SHIFT,
            priors: PriorConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_fhvae > 0.0 && self.lr_disc > 0.0) {
            return bad(format!("learning rates must be positive ({}, {})", self.lr_fhvae, self.lr_disc));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.flags.disentangle && self.batch_size < 3 {
            return bad("the disentanglement loss needs batch_size >= 3".into());
        }
        if self.hier_sample_size < self.batch_size {
            return bad(format!(
                "hier_sample_size ({}) must be at least batch_size ({})",
                self.hier_sample_size, self.batch_size
            ));
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience ({}) exceeds max_epochs ({})", self.patience, self.max_epochs));
        }
        if self.n_disc_steps == 0 {
            return bad("n_disc_steps must be at least 1".into());
        }
        if self.seg_shift == 0 {
            return bad("seg_shift must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        self.weights.validate()?;
        self.priors.validate()
    }
}

// ---------------------------------------------------------------------------
// Data

/// Training segments grouped by sequence (utterance).
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub segments: Vec<SegmentRecord>,
    by_seq: BTreeMap<usize, Vec<usize>>,
}

impl TrainData {
    pub fn from_segments(segments: Vec<SegmentRecord>) -> Self {
        let mut by_seq: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in segments.iter().enumerate() {
            by_seq.entry(s.sequence_id).or_default().push(i);
        }
        Self { segments, by_seq }
    }

    /// Segment every utterance; the sequence id is the manifest position.
    pub fn from_corpus(corpus: &Corpus, seg_len: usize, shift: usize) -> Result<Self> {
        let mut segments = Vec::new();
        for (i, e) in corpus.manifest.entries.iter().enumerate() {
            let feat = corpus
                .features
                .get(&e.utterance_id)
                .ok_or_else(|| Error::Contract(format!("no features for utterance {}", e.utterance_id)))?;
            let label = corpus.speaker(e).domain_label;
            segments.extend(segment_utterance(feat, seg_len, shift, i, label));
        }
        if segments.is_empty() {
            return Err(Error::EmptyInput("corpus yields no training segments".into()));
        }
        Ok(Self::from_segments(segments))
    }

    pub fn num_sequences(&self) -> usize {
        self.by_seq.len()
    }

    pub fn sequence_ids(&self) -> Vec<usize> {
        self.by_seq.keys().copied().collect()
    }

    pub fn segments_of(&self, seq: usize) -> &[usize] {
        self.by_seq.get(&seq).map_or(&[], Vec::as_slice)
    }

    pub fn domain_of(&self, seq: usize) -> Option<DomainLabel> {
        self.segments_of(seq).first().map(|&i| self.segments[i].domain_label)
    }

    pub fn domains(&self) -> BTreeSet<DomainLabel> {
        self.segments.iter().map(|s| s.domain_label).collect()
    }

    fn subset(&self, seqs: &BTreeSet<usize>) -> Self {
        Self::from_segments(
            self.segments
                .iter()
                .filter(|s| seqs.contains(&s.sequence_id))
                .cloned()
                .collect(),
        )
    }

    /// Hold out `fraction` of the sequences of each domain (at least one when
    /// the domain has two or more). Returns `(train, validation)`.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut rng = stream(seed, Purpose::ValSplit, 0);
        let mut held = BTreeSet::new();
        for d in [DomainLabel::Control, DomainLabel::Dysarthric] {
            let mut ids: Vec<usize> = self
                .sequence_ids()
                .into_iter()
                .filter(|&s| self.domain_of(s) == Some(d))
                .collect();
            if ids.len() < 2 || fraction <= 0.0 {
                continue;
            }
            ids.shuffle(&mut rng);
            let n = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
            held.extend(ids.into_iter().take(n));
        }
        let kept: BTreeSet<usize> = self.by_seq.keys().filter(|s| !held.contains(s)).copied().collect();
        (self.subset(&kept), self.subset(&held))
    }
}

// ---------------------------------------------------------------------------
// Hierarchical sampling

/// One cache refresh: the cached sequences with their `μ̃2` and the batches
/// (indices into [`TrainData::segments`]) drawn from them.
#[derive(Clone, Debug)]
pub struct CacheBlock {
    pub cache: SequenceCache,
    pub batches: Vec<Vec<usize>>,
}

/// Stream of cache blocks covering every sequence once.
pub struct HierarchicalSampler<'a> {
    data: &'a TrainData,
    chunks: VecDeque<Vec<usize>>,
    batch_size: usize,
    priors: PriorConfig,
}

/// Start an epoch: sequences are shuffled and grouped into caches of at most
/// `k` sequences.
pub fn hierarchical_sample<'a>(
    data: &'a TrainData,
    k: usize,
    batch_size: usize,
    priors: &PriorConfig,
    rng: &mut Rng,
) -> Result<HierarchicalSampler<'a>> {
    if data.num_sequences() == 0 {
        return Err(Error::EmptyInput("no sequences to sample from".into()));
    }
    if k == 0 || batch_size == 0 {
        return Err(Error::Config("cache size and batch size must be positive".into()));
    }
    let mut ids = data.sequence_ids();
    ids.shuffle(rng);
    Ok(HierarchicalSampler {
        data,
        chunks: ids.chunks(k).map(<[usize]>::to_vec).collect(),
        batch_size,
        priors: *priors,
    })
}

impl HierarchicalSampler<'_> {
    pub fn remaining(&self) -> usize {
        self.chunks.len()
    }

    /// Next cache with `μ̃2` from `model`'s current sequence encoder.
    pub fn next_block(&mut self, model: &Fhvae, rng: &mut Rng) -> Result<Option<CacheBlock>> {
        let Some(seqs) = self.chunks.pop_front() else {
            return Ok(None);
        };
        let cache = build_cache(model, self.data, &seqs, &self.priors)?;
        let mut members: Vec<usize> = seqs.iter().flat_map(|&s| self.data.segments_of(s).iter().copied()).collect();
        members.shuffle(rng);
        let mut batches: Vec<Vec<usize>> = members.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        // A trailing sliver is too small for batch statistics.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 3) {
            let tail = batches.pop().unwrap();
            log::debug!("dropping trailing batch of {} segments", tail.len());
        }
        Ok(Some(CacheBlock { cache, batches }))
    }
}

const EVAL_CHUNK: usize = 512;

/// `μ̃2` for each of `seqs` from the encoder means of all its segments.
pub fn build_cache(model: &Fhvae, data: &TrainData, seqs: &[usize], priors: &PriorConfig) -> Result<SequenceCache> {
    let flat: Vec<&SegmentRecord> = seqs
        .iter()
        .flat_map(|&s| data.segments_of(s).iter().map(|&i| &data.segments[i]))
        .collect();
    let mut means = Vec::with_capacity(flat.len());
    for chunk in flat.chunks(EVAL_CHUNK) {
        let m = model.z2_means(chunk)?;
        means.extend(m.outer_iter().map(|r| r.to_owned()));
    }
    let mut blocks = Vec::with_capacity(seqs.len());
    let mut pos = 0;
    for &s in seqs {
        let n = data.segments_of(s).len();
        let mut block = Array2::zeros((n, model.config.z2_dim));
        for (r, row) in means[pos..pos + n].iter().enumerate() {
            block.row_mut(r).assign(row);
        }
        pos += n;
        blocks.push(block);
    }
    SequenceCache::from_encoder_means(seqs.to_vec(), &blocks, priors)
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: u64,
    pub train: LossReport,
    pub val: LossReport,
    /// Validation terms before flags are applied.
    pub val_components: LossComponents,
    pub val_disc_accuracy: Option<f64>,
    /// Quantity watched by early stopping.
    pub monitor: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

struct MetricsLog {
    out: Option<BufWriter<File>>,
}

impl MetricsLog {
    /// Open `path`, keeping only lines from epochs before `keep_before`.
    fn open(path: Option<&Path>, keep_before: usize) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self { out: None });
        };
        let mut kept = Vec::new();
        if keep_before > 0 && path.exists() {
            let f = File::open(path).map_err(Error::at_path(path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(Error::at_path(path))?;
                let v: serde_json::Value = serde_json::from_str(&line)?;
                if v["epoch"].as_u64().is_some_and(|e| (e as usize) < keep_before) {
                    kept.push(line);
                }
            }
        }
        let f = File::create(path).map_err(Error::at_path(path))?;
        let mut out = BufWriter::new(f);
        for l in kept {
            writeln!(out, "{l}").map_err(Error::at_path(path))?;
        }
        Ok(Self { out: Some(out) })
    }

    fn write(&mut self, v: &serde_json::Value) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, v)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training session

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Receives `metrics.jsonl`, `best.ckpt` and `latest.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint that carries resume state.
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete (for interrupted runs).
    pub stop_after_epochs: Option<usize>,
    /// Recorded in checkpoints.
    pub norm_stats: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best validation epoch, or the final epoch for adversarial runs.
    pub best: Checkpoint,
    pub latest: Checkpoint,
    pub epochs: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

struct Session {
    cfg: TrainingConfig,
    stage: Stage,
    flags: TermFlags,
    model: Fhvae,
    disc: Option<Discriminator>,
    reference: Option<Fhvae>,
    opt_f: Adam,
    opt_d: Option<Adam>,
    step: u64,
    epoch: usize,
    bad_epochs: usize,
    best_val: Option<f64>,
    best_fhvae: Option<ParamStore>,
    best_disc: Option<ParamStore>,
    norm_stats: Option<String>,
    /// Parameter hashes are compared around every update.
    check_isolation: bool,
}

/// Tape state after the encoders and decoder have run on a batch.
struct Forward {
    g: Graph,
    p: Bound,
    frames: Vec<Var>,
    recon: Vec<GaussVars>,
    q1: GaussVars,
    q2: GaussVars,
    z2: Var,
}

struct StepOutput {
    g: Graph,
    p: Bound,
    total: Var,
    report: LossReport,
    comps: LossComponents,
    mu_z1: Array2<f64>,
}

fn noise(rng: Option<&mut Rng>, rows: usize, cols: usize) -> Array2<f64> {
    match rng {
        Some(r) => Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *r)),
        None => Array2::zeros((rows, cols)),
    }
}

fn mean_of(g: &mut Graph, rows: Var) -> Var {
    g.mean_all(rows)
}

/// Content posterior of a frozen model: `z1` conditioned on its own `z2` mean.
fn frozen_content_posterior(model: &Fhvae, batch: &SegmentBatch) -> (Array2<f64>, Array2<f64>) {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let frames = batch.place(&mut g);
    let q2 = model.encode_z2_graph(&mut g, &p, &frames);
    let q1 = model.encode_z1_graph(&mut g, &p, &frames, q2.mean);
    (g.value(q1.mean).clone(), g.value(q1.logvar).clone())
}

impl Session {
    fn forward(&self, batch: &SegmentBatch, mut rng: Option<&mut Rng>, trainable: bool) -> Forward {
        let cfg = &self.model.config;
        let b = batch.len();
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, trainable);
        let frames = batch.place(&mut g);
        let q2 = self.model.encode_z2_graph(&mut g, &p, &frames);
        let n2 = noise(rng.as_deref_mut(), b, cfg.z2_dim);
        let z2 = q2.sample(&mut g, n2);
        let q1 = self.model.encode_z1_graph(&mut g, &p, &frames, z2);
        let n1 = noise(rng.as_deref_mut(), b, cfg.z1_dim);
        let z1 = q1.sample(&mut g, n1);
        let recon = self.model.decode_graph(&mut g, &p, z1, z2);
        Forward {
            g,
            p,
            frames,
            recon,
            q1,
            q2,
            z2,
        }
    }

    /// Build every loss term on the tape. Disabled terms are still evaluated
    /// for reporting when their inputs exist but stay out of the total.
    fn losses(&self, fw: Forward, segs: &[&SegmentRecord], batch: &SegmentBatch, cache: &SequenceCache) -> Result<StepOutput> {
        let Forward {
            mut g,
            p,
            frames,
            recon,
            q1,
            q2,
            z2,
        } = fw;
        let priors = &self.cfg.priors;
        let w = &self.cfg.weights;
        let mut clamps = 0;
        let rows_of: Vec<usize> = segs
            .iter()
            .map(|s| {
                cache
                    .position(s.sequence_id)
                    .ok_or_else(|| Error::Contract(format!("sequence {} is not cached", s.sequence_id)))
            })
            .collect::<Result<_>>()?;
        let mu2 = Array2::from_shape_fn((segs.len(), cache.mu2.ncols()), |(b, d)| cache.mu2[[rows_of[b], d]]);
        let counts = rows_of.iter().map(|&k| cache.counts[k]).collect();
        let lb_rows = lower_bound_rows(
            &mut g,
            LowerBoundInputs {
                frames: &frames,
                recon: &recon,
                q_z1: q1,
                q_z2: q2,
                mu2,
                counts,
            },
            priors,
        );
        let lb = mean_of(&mut g, lb_rows);
        let zd_rows = z2_disc_rows(&mut g, z2, cache, &rows_of, priors);
        let zd = mean_of(&mut g, zd_rows);
        let zd_w = g.scale(zd, w.w_z2_disc);
        let mut total = g.add(lb, zd_w);
        let labels: Vec<DomainLabel> = segs.iter().map(|s| s.domain_label).collect();

        let mut comps = LossComponents {
            lb: g.scalar_value(lb),
            z2_disc: g.scalar_value(zd),
            ..LossComponents::default()
        };

        if let Some(disc) = &self.disc {
            let dp = disc.params.bind(&mut g, false);
            let logits = disc.logits_graph(&mut g, &dp, q1.mean);
            let (targets, weights): (Vec<f64>, Vec<f64>) = labels
                .iter()
                .map(|l| match self.flags.gen_mode() {
                    GenMode::Both => (1.0 - l.as_f64(), 1.0),
                    GenMode::DysOnly => (0.0, l.as_f64()),
                })
                .unzip();
            let (rows, c) = bce_logit_rows(&mut g, logits, &targets, &weights);
            clamps += c;
            let gen = mean_of(&mut g, rows);
            comps.gen = g.scalar_value(gen);
            if self.flags.adversarial {
                let t = g.scale(gen, w.w_gen);
                total = g.add(total, t);
            }
        }
        if let Some(reference) = &self.reference {
            let (fm, flv) = frozen_content_posterior(reference, batch);
            let frozen = GaussVars {
                mean: g.constant(fm),
                logvar: g.constant(flv),
            };
            let rows = reference_rows(&mut g, q1, frozen, &labels, self.cfg.kl_direction);
            let r = mean_of(&mut g, rows);
            comps.reference = g.scalar_value(r);
            if self.flags.reference {
                let t = g.scale(r, w.w_ref);
                total = g.add(total, t);
            }
        }
        if segs.len() >= 3 {
            let d = disentangle_graph(&mut g, q1.mean, q2.mean);
            comps.dstg = g.scalar_value(d);
            if self.flags.disentangle {
                let t = g.scale(d, w.w_dstg);
                total = g.add(total, t);
            }
        }
        let mut report = total_fhvae_loss(&comps, w, &self.flags)?;
        report.clamp_events = clamps;
        let tape_total = g.scalar_value(total);
        if report.total.is_finite() && (tape_total - report.total).abs() > 1e-9 * (1.0 + report.total.abs()) {
            return Err(Error::Contract(format!(
                "weighted loss identity broken: tape {tape_total}, components {}",
                report.total
            )));
        }
        let mu_z1 = g.value(q1.mean).clone();
        Ok(StepOutput {
            g,
            p,
            total,
            report,
            comps,
            mu_z1,
        })
    }

    /// One discriminator update on content means; returns (loss, clamps).
    fn disc_update(&mut self, mu_z1: &Array2<f64>, labels: &[DomainLabel]) -> Result<(f64, u64)> {
        let (Some(disc), Some(opt)) = (&mut self.disc, &mut self.opt_d) else {
            return Ok((0.0, 0));
        };
        let before = self.check_isolation.then(|| self.model.params.fingerprint());
        let mut g = Graph::new();
        let p = disc.params.bind(&mut g, true);
        let x = g.constant(mu_z1.clone());
        let logits = disc.logits_graph(&mut g, &p, x);
        let targets: Vec<f64> = labels.iter().map(|l| l.as_f64()).collect();
        let (rows, clamps) = bce_logit_rows(&mut g, logits, &targets, &vec![1.0; labels.len()]);
        let loss = g.mean_all(rows);
        g.backward(loss);
        let grads = p.grads(&g);
        opt.update(&mut disc.params, &grads);
        if before.is_some_and(|h| h != self.model.params.fingerprint()) {
            return Err(Error::Contract("discriminator update changed FHVAE parameters".into()));
        }
        Ok((g.scalar_value(loss), clamps))
    }

    fn dump_batch(&self, out_dir: Option<&Path>, segs: &[&SegmentRecord], report: &LossReport) -> Error {
        let ids: Vec<(usize, usize)> = segs.iter().map(|s| (s.sequence_id, s.frame_offset)).collect();
        let msg = format!(
            "non-finite loss at epoch {} step {}: {report:?}",
            self.epoch, self.step
        );
        if let Some(dir) = out_dir {
            let dump = json!({
                "epoch": self.epoch,
                "step": self.step,
                "report": report,
                "segments": ids,
                "frames": segs.iter().map(|s| s.x.iter().copied().collect::<Vec<f32>>()).collect::<Vec<_>>(),
            });
            let path = dir.join("nonfinite_batch.json");
            if let Err(e) = std::fs::write(&path, dump.to_string()) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        Error::NonFinite(msg)
    }

    fn train_step(
        &mut self,
        segs: &[&SegmentRecord],
        cache: &SequenceCache,
        rng: &mut Rng,
        out_dir: Option<&Path>,
    ) -> Result<LossReport> {
        let batch = SegmentBatch::from_records(segs)?;
        let fw = self.forward(&batch, Some(rng), true);
        let labels: Vec<DomainLabel> = segs.iter().map(|s| s.domain_label).collect();
        let mut disc_loss = 0.0;
        let mut clamps = 0;
        if self.flags.adversarial {
            let mu_z1 = fw.g.value(fw.q1.mean).clone();
            for _ in 0..self.cfg.n_disc_steps {
                let (l, c) = self.disc_update(&mu_z1, &labels)?;
                disc_loss = l;
                clamps += c;
            }
        }
        let StepOutput {
            mut g,
            p,
            total,
            mut report,
            ..
        } = self.losses(fw, segs, &batch, cache)?;
        report.disc_loss = disc_loss;
        report.clamp_events += clamps;
        if !report.total.is_finite() || !disc_loss.is_finite() {
            return Err(self.dump_batch(out_dir, segs, &report));
        }
        let disc_hash = match (&self.disc, self.check_isolation) {
            (Some(d), true) => Some(d.params.fingerprint()),
            _ => None,
        };
        g.backward(total);
        let grads = p.grads(&g);
        self.opt_f.update(&mut self.model.params, &grads);
        if let (Some(h), Some(d)) = (disc_hash, &self.disc) {
            if h != d.params.fingerprint() {
                return Err(Error::Contract("FHVAE update changed discriminator parameters".into()));
            }
        }
        self.step += 1;
        Ok(report)
    }

    /// Mean losses over `data` with posterior means in place of samples.
    fn evaluate(&self, data: &TrainData) -> Result<(LossReport, LossComponents, Option<f64>)> {
        if data.num_sequences() == 0 {
            return Ok((LossReport::default(), LossComponents::default(), None));
        }
        let ids = data.sequence_ids();
        let cache = build_cache(&self.model, data, &ids, &self.cfg.priors)?;
        let order: Vec<usize> = ids.iter().flat_map(|&s| data.segments_of(s).iter().copied()).collect();
        let mut acc = Accum::default();
        let mut raw = LossComponents::default();
        let mut correct = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let segs: Vec<&SegmentRecord> = chunk.iter().map(|&i| &data.segments[i]).collect();
            let batch = SegmentBatch::from_records(&segs)?;
            let fw = self.forward(&batch, None, false);
            let out = self.losses(fw, &segs, &batch, &cache)?;
            if let Some(disc) = &self.disc {
                let logits = disc.logits(&out.mu_z1);
                correct += logits
                    .iter()
                    .zip(&segs)
                    .filter(|(z, s)| (**z > 0.0) == (s.domain_label == DomainLabel::Dysarthric))
                    .count();
            }
            acc.add(&out.report, segs.len());
            let k = segs.len() as f64;
            raw.lb += k * out.comps.lb;
            raw.z2_disc += k * out.comps.z2_disc;
            raw.gen += k * out.comps.gen;
            raw.reference += k * out.comps.reference;
            raw.dstg += k * out.comps.dstg;
        }
        let n = order.len() as f64;
        let raw = LossComponents {
            lb: raw.lb / n,
            z2_disc: raw.z2_disc / n,
            gen: raw.gen / n,
            reference: raw.reference / n,
            dstg: raw.dstg / n,
        };
        let acc_disc = self.disc.as_ref().map(|_| correct as f64 / n);
        Ok((acc.mean(&self.cfg.weights), raw, acc_disc))
    }

    fn checkpoint(&self, with_resume: bool) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            priors: self.cfg.priors,
            training: self.cfg.clone(),
            fhvae: self.model.params.clone(),
            disc: self.disc.as_ref().map(|d| d.params.clone()),
            reference: self.reference.as_ref().map(|r| r.params.clone()),
            epoch: self.epoch,
            best_val_loss: self.best_val,
            norm_stats: self.norm_stats.clone(),
            resume: with_resume.then(|| ResumeState {
                stage: self.stage,
                step: self.step,
                bad_epochs: self.bad_epochs,
                best_fhvae: self.best_fhvae.clone(),
                best_disc: self.best_disc.clone(),
                opt_fhvae: self.opt_f.clone(),
                opt_disc: self.opt_d.clone(),
            }),
        }
    }

    fn best_checkpoint(&self) -> Checkpoint {
        let mut ck = self.checkpoint(false);
        if !self.flags.adversarial {
            if let Some(b) = &self.best_fhvae {
                ck.fhvae = b.clone();
            }
            if let Some(b) = &self.best_disc {
                ck.disc = Some(b.clone());
            }
        }
        ck
    }

    fn run(mut self, train: &TrainData, val: &TrainData, opts: &RunOptions) -> Result<TrainOutcome> {
        let out_dir = opts.out_dir.as_deref();
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d).map_err(Error::at_path(d))?;
        }
        let mut log = MetricsLog::open(out_dir.map(|d| d.join("metrics.jsonl")).as_deref(), self.epoch)?;
        let stage_name = match self.stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        };
        let mut epochs = Vec::new();
        let mut stopped_early = false;
        let stop_at = opts
            .stop_after_epochs
            .map_or(self.cfg.max_epochs, |s| s.min(self.cfg.max_epochs));
        if val.num_sequences() == 0 {
            log::warn!("no validation sequences; early stopping watches the training loss");
        }
        while self.epoch < stop_at {
            let epoch = self.epoch;
            let mut srng = stream(self.cfg.seed, Purpose::Sampling, epoch as u64);
            let mut nrng = stream(self.cfg.seed, Purpose::Reparam, epoch as u64);
            let mut sampler = hierarchical_sample(
                train,
                self.cfg.hier_sample_size,
                self.cfg.batch_size,
                &self.cfg.priors,
                &mut srng,
            )?;
            let mut acc = Accum::default();
            while let Some(block) = sampler.next_block(&self.model, &mut srng)? {
                let mut cache = block.cache;
                for idx in &block.batches {
                    if self.cfg.refresh_mu2_each_step {
                        cache = build_cache(&self.model, train, &cache.seq_ids.clone(), &self.cfg.priors)?;
                    }
                    let segs: Vec<&SegmentRecord> = idx.iter().map(|&i| &train.segments[i]).collect();
                    let r = self.train_step(&segs, &cache, &mut nrng, out_dir)?;
                    log.write(&step_line(stage_name, epoch, self.step, segs.len(), &r))?;
                    acc.add(&r, segs.len());
                }
            }
            let train_report = acc.mean(&self.cfg.weights);
            let (val_report, val_components, val_acc) = self.evaluate(val)?;
            let monitor = if val.num_sequences() > 0 {
                val_report.total
            } else {
                train_report.total
            };
            if !monitor.is_finite() {
                return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
            }
            self.epoch += 1;
            let improved = self.best_val.is_none_or(|b| monitor < b);
            if improved {
                self.best_val = Some(monitor);
                self.bad_epochs = 0;
                self.best_fhvae = Some(self.model.params.clone());
                self.best_disc = self.disc.as_ref().map(|d| d.params.clone());
            } else {
                self.bad_epochs += 1;
            }
            let m = EpochMetrics {
                stage: self.stage,
                epoch,
                steps: self.step,
                train: train_report,
                val: val_report,
                val_components,
                val_disc_accuracy: val_acc,
                monitor,
                best: self.best_val,
                bad_epochs: self.bad_epochs,
            };
            let mut line = serde_json::to_value(&m)?;
            line["kind"] = json!("epoch");
            log.write(&line)?;
            log.flush()?;
            log::info!(
                "{stage_name} epoch {epoch}: train {:.4} val {:.4}{}",
                train_report.total,
                val_report.total,
                val_acc.map_or(String::new(), |a| format!(" disc acc {a:.3}"))
            );
            epochs.push(m);
            if let Some(d) = out_dir {
                save_checkpoint(&self.checkpoint(true), &d.join("latest.ckpt"))?;
                if improved || self.flags.adversarial {
                    save_checkpoint(&self.best_checkpoint(), &d.join("best.ckpt"))?;
                }
            }
            if !self.flags.adversarial && self.bad_epochs > self.cfg.patience {
                log::info!("{stage_name}: early stop after epoch {epoch}");
                stopped_early = true;
                break;
            }
        }
        log.flush()?;
        Ok(TrainOutcome {
            best: self.best_checkpoint(),
            latest: self.checkpoint(true),
            epochs,
            stopped_early,
        })
    }
}

fn step_line(stage: &str, epoch: usize, step: u64, batch: usize, r: &LossReport) -> serde_json::Value {
    json!({
        "kind": "step",
        "stage": stage,
        "epoch": epoch,
        "step": step,
        "batch": batch,
        "lb_loss": r.lb_loss,
        "z2_disc_loss": r.z2_disc_loss,
        "gen_loss": r.gen_loss,
        "ref_loss": r.ref_loss,
        "dstg_loss": r.dstg_loss,
        "total": r.total,
        "disc_loss": r.disc_loss,
        "clamp_events": r.clamp_events,
    })
}

/// Segment-weighted running mean of loss reports.
#[derive(Default)]
struct Accum {
    sum: LossReport,
    n: usize,
}

impl Accum {
    fn add(&mut self, r: &LossReport, n: usize) {
        let k = n as f64;
        self.sum.lb_loss += k * r.lb_loss;
        self.sum.z2_disc_loss += k * r.z2_disc_loss;
        self.sum.gen_loss += k * r.gen_loss;
        self.sum.ref_loss += k * r.ref_loss;
        self.sum.dstg_loss += k * r.dstg_loss;
        self.sum.disc_loss += k * r.disc_loss;
        self.sum.clamp_events += r.clamp_events;
        self.n += n;
    }

    fn mean(&self, w: &LossWeights) -> LossReport {
        if self.n == 0 {
            return LossReport::default();
        }
        let k = self.n as f64;
        let mut r = LossReport {
            lb_loss: self.sum.lb_loss / k,
            z2_disc_loss: self.sum.z2_disc_loss / k,
            gen_loss: self.sum.gen_loss / k,
            ref_loss: self.sum.ref_loss / k,
            dstg_loss: self.sum.dstg_loss / k,
            disc_loss: self.sum.disc_loss / k,
            clamp_events: self.sum.clamp_events,
            total: 0.0,
        };
        r.total = r.weighted_sum(w);
        r
    }
}

fn check_feature_dim(corpus: &Corpus, cfg: &ModelConfig) -> Result<()> {
    match corpus.feature_dim() {
        Some(d) if d == cfg.feat_dim => Ok(()),
        Some(d) => Err(Error::Config(format!(
            "corpus features have dimension {d}, model expects {}",
            cfg.feat_dim
        ))),
        None => Err(Error::EmptyInput("corpus has no features".into())),
    }
}

fn resume_state(opts: &RunOptions, stage: Stage) -> Result<Option<(Checkpoint, ResumeState)>> {
    match &opts.resume {
        None => Ok(None),
        Some(ck) => {
            let st = ck
                .resume
                .clone()
                .ok_or_else(|| Error::Contract("checkpoint carries no resume state".into()))?;
            if st.stage != stage {
                return Err(Error::Contract(format!("cannot resume a {:?} checkpoint as {stage:?}", st.stage)));
            }
            Ok(Some((ck.clone(), st)))
        }
    }
}

/// Plain objective on control-domain data: lower bound plus the
/// sequence-discriminative term, early-stopped on validation loss.
pub fn pretrain(
    corpus: &Corpus,
    model_cfg: ModelConfig,
    cfg: &TrainingConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_feature_dim(corpus, &model_cfg)?;
    if !corpus.domains().contains(&DomainLabel::Control) {
        return Err(Error::Contract("pretraining corpus has no control-domain speakers".into()));
    }
    let data = TrainData::from_corpus(corpus, model_cfg.seg_len, cfg.seg_shift)?;
    let (train, val) = data.split_validation(cfg.val_fraction, cfg.seed);
    let session = match resume_state(opts, Stage::Pretrain)? {
        Some((ck, st)) => Session {
            model: ck.model()?,
            disc: None,
            reference: None,
            opt_f: st.opt_fhvae,
            opt_d: None,
            step: st.step,
            epoch: ck.epoch,
            bad_epochs: st.bad_epochs,
            best_val: ck.best_val_loss,
            best_fhvae: st.best_fhvae,
            best_disc: None,
            ..new_session(Stage::Pretrain, cfg, Fhvae::new(model_cfg, cfg.seed)?, opts)
        },
        None => new_session(Stage::Pretrain, cfg, Fhvae::new(model_cfg, cfg.seed)?, opts),
    };
    session.run(&train, &val, opts)
}

fn new_session(stage: Stage, cfg: &TrainingConfig, model: Fhvae, opts: &RunOptions) -> Session {
    let flags = match stage {
        Stage::Pretrain => TermFlags::default(),
        Stage::Finetune => cfg.flags,
    };
    Session {
        cfg: cfg.clone(),
        stage,
        flags,
        opt_f: Adam::new(cfg.lr_fhvae, &model.params),
        model,
        disc: None,
        reference: None,
        opt_d: None,
        step: 0,
        epoch: 0,
        bad_epochs: 0,
        best_val: None,
        best_fhvae: None,
        best_disc: None,
        norm_stats: opts.norm_stats.clone(),
        check_isolation: cfg!(debug_assertions),
    }
}

/// Continue training a pretrained model on `corpus` with the terms enabled in
/// `cfg.flags`. The pretrained parameters become the frozen reference.
pub fn finetune(
    pretrained: &Checkpoint,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = pretrained.model_config.clone();
    check_feature_dim(corpus, &model_cfg)?;
    if cfg.flags.adversarial && corpus.domains().len() < 2 {
        return Err(Error::Config(
            "adversarial finetuning needs both control and dysarthric speakers".into(),
        ));
    }
    let data = TrainData::from_corpus(corpus, model_cfg.seg_len, cfg.seg_shift)?;
    let (train, val) = data.split_validation(cfg.val_fraction, cfg.seed);
    let mut session = new_session(Stage::Finetune, cfg, pretrained.model()?, opts);
    session.reference = Some(pretrained.model()?);
    if cfg.flags.adversarial {
        let d = Discriminator::new(&model_cfg, cfg.seed);
        session.opt_d = Some(Adam::new(cfg.lr_disc, &d.params));
        session.disc = Some(d);
    }
    if let Some((ck, st)) = resume_state(opts, Stage::Finetune)? {
        session.model = ck.model()?;
        session.disc = ck.discriminator()?;
        session.reference = ck.reference_model()?;
        session.opt_f = st.opt_fhvae;
        session.opt_d = st.opt_disc;
        session.step = st.step;
        session.epoch = ck.epoch;
        session.bad_epochs = st.bad_epochs;
        session.best_val = ck.best_val_loss;
        session.best_fhvae = st.best_fhvae;
        session.best_disc = st.best_disc;
    }
    session.run(&train, &val, opts)
}

/// Inputs for evaluating the FHVAE objective outside a training run.
pub struct ObjectiveInputs<'a> {
    pub model: &'a Fhvae,
    pub disc: Option<&'a Discriminator>,
    pub reference: Option<&'a Fhvae>,
    pub cfg: &'a TrainingConfig,
    pub segs: &'a [&'a SegmentRecord],
    pub cache: &'a SequenceCache,
    /// Seed of the reparameterization noise; `None` uses posterior means.
    pub noise_seed: Option<u64>,
}

/// The finetuning objective on one batch and its gradient with respect to
/// every FHVAE parameter (store order).
pub fn fhvae_objective(inp: ObjectiveInputs<'_>) -> Result<(LossReport, Vec<Array2<f64>>)> {
    let mut s = new_session(Stage::Finetune, inp.cfg, inp.model.clone(), &RunOptions::default());
    s.disc = inp.disc.cloned();
    s.reference = inp.reference.cloned();
    let batch = SegmentBatch::from_records(inp.segs)?;
    let mut rng = inp.noise_seed.map(|seed| stream(seed, Purpose::Reparam, 0));
    let fw = s.forward(&batch, rng.as_mut(), true);
    let StepOutput {
        mut g, p, total, report, ..
    } = s.losses(fw, inp.segs, &batch, inp.cache)?;
    g.backward(total);
    Ok((report, p.grads(&g)))
}

#[cfg(test)]
mod tests;

//! End-to-end synthetic comparison: pretrain on control speech, finetune
//! with each combination of extra terms, extract features and run the
//! evaluation protocols for every variant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_corpus, synth_generate, Corpus, DomainLabel, NormStats, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{
    identity_probe_accuracy, latent_cross_correlation, run_eval_suite, EvalConfig, EvalData, GridRow, InputKind,
    Protocol, ResultGrid,
};
use crate::extract::{extract_corpus, EXTRACT_SHIFT};
use crate::losses::{LossWeights, TermFlags};
use crate::model::{Fhvae, ModelConfig};
use crate::trainer::{finetune, pretrain, Checkpoint, RunOptions, TrainingConfig};

/// A feature-extraction variant: `None` means the pretrained model as is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Method {
    pub name: &'static str,
    pub flags: Option<TermFlags>,
}

const fn flags(adversarial: bool, reference: bool, gen_dys_only: bool, disentangle: bool) -> Option<TermFlags> {
    Some(TermFlags {
        adversarial,
        reference,
        gen_dys_only,
        disentangle,
    })
}

pub const METHODS: [Method; 6] = [
    Method { name: "pretrained", flags: None },
    Method { name: "plain", flags: flags(false, false, false, false) },
    Method { name: "adv", flags: flags(true, false, false, false) },
    Method { name: "adv_ref", flags: flags(true, true, false, false) },
    Method { name: "adv_ref_dys", flags: flags(true, true, true, false) },
    Method { name: "adv_ref_dys_dstg", flags: flags(true, true, true, true) },
];

pub fn method(name: &str) -> Result<Method> {
    METHODS
        .iter()
        .copied()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::Config(format!("unknown method {name:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: TrainingConfig,
    /// Flags are replaced per method.
    pub finetune: TrainingConfig,
    pub eval: EvalConfig,
    pub extract_shift: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Sized so five seeds of pretraining plus three finetuned variants
    /// finish within about a quarter of an hour on one CPU core.
    ///
    /// The lower bound here is roughly ten times smaller than with 80-dim
    /// features, so the generator weight is scaled down to match; at the
    /// nominal weight the generator overpowers a discriminator of this size
    /// and scrambles the content latent instead of aligning it.
    pub fn desk() -> Self {
        let synth = SynthConfig {
            n_control_speakers: 12,
            n_dysarthric_speakers: 12,
            utterances_per_speaker: 12,
            feat_dim: 20,
            seg_factor_dim: 8,
            n_labels: 4,
            domain_shift_strength: 5.0,
            ..SynthConfig::default()
        };
        let model = ModelConfig {
            feat_dim: synth.feat_dim,
            hidden: 16,
            layers: 1,
            z1_dim: 8,
            z2_dim: 8,
            disc_hidden: 64,
            ..ModelConfig::default()
        };
        let pretrain = TrainingConfig {
            lr_fhvae: 3e-3,
            lr_disc: 1e-3,
            batch_size: 64,
            hier_sample_size: 64,
            max_epochs: 15,
            patience: 5,
            ..TrainingConfig::default()
        };
        let finetune = TrainingConfig {
            lr_disc: 2e-3,
            max_epochs: 16,
            n_disc_steps: 5,
            weights: LossWeights {
                w_gen: 10.0,
                w_dstg: 5.0,
                ..LossWeights::default()
            },
            ..pretrain.clone()
        };
        let mut eval = EvalConfig::default();
        eval.split.repeats = 3;
        Self {
            synth,
            model,
            pretrain,
            finetune,
            eval,
            extract_shift: EXTRACT_SHIFT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.feat_dim != self.synth.feat_dim {
            return Err(Error::Config(format!(
                "model.feat_dim ({}) differs from synth.feat_dim ({})",
                self.model.feat_dim, self.synth.feat_dim
            )));
        }
        if self.extract_shift == 0 {
            return Err(Error::Config("extract_shift must be at least 1".into()));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.eval.split.validate()
    }
}

/// Normalized synthetic corpus for one seed. The world (speaker and content
/// maps) stays fixed by `cfg.world_seed`; the seed draws speakers and
/// utterances.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<(Corpus, NormStats)> {
    let mut s = synth_generate(&SynthConfig { seed, ..cfg.clone() })?;
    let stats = normalize_corpus(&mut s.corpus.features, None)?;
    Ok((s.corpus, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub ood_f1: f64,
    pub indomain_f1: f64,
    pub probe_z1: f64,
    pub probe_z2: f64,
    pub probe_z12: f64,
    /// Summed squared correlation between content and sequence latents.
    pub cross_correlation: f64,
    pub epochs: usize,
}

/// Score one model on `corpus`: intent F1 from content-latent sequences under
/// both speaker splits, and domain-probe accuracy from each pooled latent.
pub fn score_model(model: &Fhvae, corpus: &Corpus, cfg: &ExperimentConfig) -> Result<MethodScores> {
    let feats = extract_corpus(model, corpus, cfg.extract_shift)?;
    let data = EvalData::with_features(corpus, &feats)?;
    let run = |mode: Protocol, inputs: &[InputKind]| {
        let mut e = cfg.eval.clone();
        e.split.mode = mode;
        run_eval_suite(&data, inputs, &e)
    };
    let ood = run(Protocol::OutOfDomain, &[InputKind::Z1])?;
    let ind = run(Protocol::InDomain, &[InputKind::Z1])?;
    let probe = run(Protocol::Kfold, &[InputKind::Z1, InputKind::Z2, InputKind::Z12])?;
    let mean_of = |r: &crate::eval::EvalReport, k| r.row(k).map(|r| r.mean).expect("requested input");
    Ok(MethodScores {
        method: String::new(),
        ood_f1: mean_of(&ood, InputKind::Z1),
        indomain_f1: mean_of(&ind, InputKind::Z1),
        probe_z1: mean_of(&probe, InputKind::Z1),
        probe_z2: mean_of(&probe, InputKind::Z2),
        probe_z12: mean_of(&probe, InputKind::Z12),
        cross_correlation: latent_cross_correlation(&data)?,
        epochs: 0,
    })
}

fn run_dir(out: Option<&Path>, name: &str) -> Option<PathBuf> {
    out.map(|d| d.join(name))
}

fn opts(dir: Option<PathBuf>, stats: &NormStats) -> Result<RunOptions> {
    Ok(RunOptions {
        out_dir: dir,
        norm_stats: Some(serde_json::to_string(stats)?),
        ..RunOptions::default()
    })
}

/// Pretrain on the control speakers of `corpus`.
pub fn pretrain_control(
    corpus: &Corpus,
    stats: &NormStats,
    cfg: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<(Checkpoint, usize)> {
    let control = corpus.with_speakers(|s| s.domain_label == DomainLabel::Control);
    let tc = TrainingConfig {
        seed,
        ..cfg.pretrain.clone()
    };
    let o = pretrain(&control, cfg.model.clone(), &tc, &opts(run_dir(out, "pretrain"), stats)?)?;
    Ok((o.best, o.epochs.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub methods: Vec<MethodScores>,
}

impl SeedResult {
    pub fn get(&self, method: &str) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Full pipeline for one seed over the named methods. With `out`, each
/// training run writes its metrics log and checkpoints under
/// `out/<method>/`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, methods: &[Method], out: Option<&Path>) -> Result<SeedResult> {
    cfg.validate()?;
    let (corpus, stats) = synth_corpus(&cfg.synth, seed)?;
    let (pre, pre_epochs) = pretrain_control(&corpus, &stats, cfg, seed, out)?;
    let mut results = Vec::new();
    for m in methods {
        let (model, epochs) = match m.flags {
            None => (pre.model()?, pre_epochs),
            Some(flags) => {
                let tc = TrainingConfig {
                    seed,
                    flags,
                    ..cfg.finetune.clone()
                };
                let o = finetune(&pre, &corpus, &tc, &opts(run_dir(out, m.name), &stats)?)?;
                (o.best.model()?, o.epochs.len())
            }
        };
        let mut s = score_model(&model, &corpus, cfg)?;
        s.method = m.name.to_string();
        s.epochs = epochs;
        log::info!("seed {seed} {}: {s:?}", m.name);
        results.push(s);
    }
    Ok(SeedResult { seed, methods: results })
}

/// Collect per-seed scores into the comparison grid.
pub fn grid_from(results: &[SeedResult]) -> ResultGrid {
    let seeds = results.iter().map(|r| r.seed).collect();
    let mut rows: Vec<GridRow> = Vec::new();
    for r in results {
        for m in &r.methods {
            let row = match rows.iter_mut().position(|g| g.method == m.method) {
                Some(k) => &mut rows[k],
                None => {
                    rows.push(GridRow {
                        method: m.method.clone(),
                        ..GridRow::default()
                    });
                    rows.last_mut().expect("just pushed")
                }
            };
            row.ood_f1.push(m.ood_f1);
            row.indomain_f1.push(m.indomain_f1);
            row.probe_z1.push(m.probe_z1);
            row.probe_z2.push(m.probe_z2);
            row.probe_z12.push(m.probe_z12);
        }
    }
    ResultGrid { seeds, rows }
}

/// Run every method for every seed and write `grid.tsv`, `grid.md` and
/// `results.json` under `out` when given.
pub fn reproduce_synth(cfg: &ExperimentConfig, seeds: &[u64], out: Option<&Path>) -> Result<(ResultGrid, Vec<SeedResult>)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut results = Vec::new();
    for &seed in seeds {
        let dir = out.map(|d| d.join(format!("seed{seed}")));
        results.push(run_seed(cfg, seed, &METHODS, dir.as_deref())?);
    }
    let grid = grid_from(&results);
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(Error::at_path(d))?;
        let write = |name: &str, text: String| {
            let p = d.join(name);
            std::fs::write(&p, text).map_err(Error::at_path(&p))
        };
        write("grid.tsv", grid.to_tsv())?;
        write("grid.md", grid.to_markdown())?;
        write("results.json", serde_json::to_string_pretty(&results)?)?;
    }
    Ok((grid, results))
}

/// Speaker-identity probe accuracies `(pooled z1, pooled z2)` of a model
/// pretrained on the control speakers only.
pub fn factorization_probe(cfg: &ExperimentConfig, seed: u64) -> Result<(f64, f64)> {
    cfg.validate()?;
    let (corpus, stats) = synth_corpus(&cfg.synth, seed)?;
    let (pre, _) = pretrain_control(&corpus, &stats, cfg, seed, None)?;
    let control = corpus.with_speakers(|s| s.domain_label == DomainLabel::Control);
    let feats = extract_corpus(&pre.model()?, &control, cfg.extract_shift)?;
    let data = EvalData::with_features(&control, &feats)?;
    let z1 = identity_probe_accuracy(&data, InputKind::Z1, &cfg.eval.probe, seed)?;
    let z2 = identity_probe_accuracy(&data, InputKind::Z2, &cfg.eval.probe, seed)?;
    Ok((z1, z2))
}

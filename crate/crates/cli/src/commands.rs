use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

use fhvae_core::corpus::{compute_corpus_features, parse_manifest, synth_generate, Corpus, DomainLabel, NormStats};
use fhvae_core::eval::{run_eval_suite, EvalData, InputKind, Protocol};
use fhvae_core::experiment::reproduce_synth;
use fhvae_core::extract::{export_features, extract_corpus, Which, EXTRACT_SHIFT};
use fhvae_core::losses::TermFlags;
use fhvae_core::trainer::{self, load_checkpoint, Checkpoint, RunOptions, TrainOutcome};
use fhvae_core::Error;

use crate::config::{self, RunConfig};
use crate::{Cli, Command, Failure, UsageError, OUT_ROOT_ENV};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Path {
        path: path.to_path_buf(),
        source,
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), UsageError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())))
    }
}

/// Output directory of one invocation.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Create the directory exclusively; an existing one is only reused when
    /// resuming.
    fn open(path: PathBuf, resume: bool) -> Result<Self, Failure> {
        if resume {
            if !path.join("latest.ckpt").is_file() {
                return Err(UsageError(format!("--resume: no latest.ckpt in {}", path.display())).into());
            }
            return Ok(Self { path });
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        match fs::create_dir(&path) {
            Ok(()) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(UsageError(format!(
                "run directory {} already exists; choose another --out-dir",
                path.display()
            ))
            .into()),
            Err(e) => Err(io_err(&path)(e).into()),
        }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<(), Error> {
        let p = self.file(name);
        fs::write(&p, text).map_err(io_err(&p))
    }

    /// Append one event to the run's metrics log.
    fn log_event(&self, event: serde_json::Value) -> Result<(), Error> {
        let p = self.file("metrics.jsonl");
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?;
        writeln!(f, "{event}").map_err(io_err(&p))
    }
}

fn default_out_dir(command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}

fn parse_flags(names: &[String]) -> Result<TermFlags, UsageError> {
    let mut f = TermFlags::default();
    for n in names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        match n {
            "adversarial" => f.adversarial = true,
            "reference" => f.reference = true,
            "gen_dys_only" => f.gen_dys_only = true,
            "disentangle" => f.disentangle = true,
            other => {
                return Err(UsageError(format!(
                    "unknown flag {other:?} (adversarial, reference, gen_dys_only, disentangle)"
                )))
            }
        }
    }
    Ok(f)
}

fn usage<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, UsageError> {
    s.parse().map_err(|e: Error| UsageError(e.to_string()))
}

/// Normalize with the statistics stored in a checkpoint, if it has any.
fn normalize_like(corpus: &mut Corpus, ck: &Checkpoint) -> Result<(), Error> {
    if let Some(text) = &ck.norm_stats {
        let stats: NormStats = serde_json::from_str(text)?;
        fhvae_core::corpus::normalize_corpus(&mut corpus.features, Some(&stats))?;
    }
    Ok(())
}

fn report_training(dir: &RunDir, out: &TrainOutcome) {
    let last = out.epochs.last();
    println!(
        "{} epochs{}; best validation loss {}; checkpoints in {}",
        out.latest.epoch,
        if out.stopped_early { " (stopped early)" } else { "" },
        out.best.best_val_loss.map_or("n/a".into(), |v| format!("{v:.4}")),
        dir.path.display()
    );
    if let Some(e) = last {
        log::info!("final epoch: {e:?}");
    }
}

fn digest_dir(manifest: &Path, corpus: &Corpus) -> Result<String, Error> {
    let mut h = Sha256::new();
    h.update(fs::read(manifest).map_err(io_err(manifest))?);
    let base = manifest.parent().unwrap_or(Path::new("."));
    for e in &corpus.manifest.entries {
        let p = base.join("feats").join(format!("{}.feat", e.utterance_id));
        h.update(fs::read(&p).map_err(io_err(&p))?);
    }
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    }))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| UsageError(format!("--threads: {e}")))?;
    }
    let file_text = match &common.config {
        Some(p) => {
            Some(fs::read_to_string(p).map_err(|e| UsageError(format!("config file {}: {e}", p.display())))?)
        }
        None => None,
    };
    let cfg = config::load(file_text.as_deref(), &common.overrides, common.seed)?;

    // Validate inputs before anything is written.
    let resume = match &cli.command {
        Command::Prepare { manifest } => {
            require_file(manifest, "manifest")?;
            false
        }
        Command::Synth | Command::ReproduceSynth { .. } => false,
        Command::Pretrain { manifest, resume, .. } => {
            require_file(manifest, "manifest")?;
            *resume
        }
        Command::Finetune {
            ckpt, manifest, resume, ..
        } => {
            require_file(ckpt, "checkpoint")?;
            require_file(manifest, "manifest")?;
            *resume
        }
        Command::Extract { ckpt, manifest, .. } => {
            require_file(ckpt, "checkpoint")?;
            require_file(manifest, "manifest")?;
            false
        }
        Command::Eval { ckpt, manifest, .. } => {
            if let Some(c) = ckpt {
                require_file(c, "checkpoint")?;
            }
            require_file(manifest, "manifest")?;
            false
        }
    };
    preflight(&cli.command)?;
    let out = common.out_dir.clone().unwrap_or_else(|| default_out_dir(cli.command.name()));
    let dir = RunDir::open(out, resume)?;
    dir.write("config.resolved.toml", &config::to_toml(&cfg))?;
    dispatch(&cli.command, &cfg, &dir)
}

/// Parse every string-typed argument so bad values fail before the run
/// directory is created.
fn preflight(command: &Command) -> Result<(), UsageError> {
    match command {
        Command::Finetune { flags: Some(f), .. } => parse_flags(f).map(|_| ()),
        Command::Extract { which, .. } => usage::<Which>(which).map(|_| ()),
        Command::Eval { protocol, input, .. } => {
            usage::<Protocol>(protocol)?;
            input.iter().try_for_each(|s| usage::<InputKind>(s).map(|_| ()))
        }
        _ => Ok(()),
    }
}

fn dispatch(command: &Command, cfg: &RunConfig, dir: &RunDir) -> Result<(), Failure> {
    match command {
        Command::Prepare { manifest } => {
            let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
            let m = parse_manifest(&text, manifest.parent().unwrap_or(Path::new(".")))?;
            m.validate()?;
            let features = compute_corpus_features(&m.entries, &cfg.frontend)?;
            let corpus = Corpus { manifest: m, features };
            corpus.validate()?;
            let path = corpus.save(&dir.path)?;
            dir.log_event(json!({"event": "prepare", "utterances": corpus.manifest.entries.len()}))?;
            println!("features written; manifest {}", path.display());
        }
        Command::Synth => {
            let s = synth_generate(&cfg.synth)?;
            let path = s.corpus.save(&dir.path)?;
            let digest = digest_dir(&path, &s.corpus)?;
            dir.write("digest.txt", &format!("{digest}\n"))?;
            dir.log_event(json!({"event": "synth", "utterances": s.corpus.manifest.entries.len(), "digest": digest}))?;
            println!("manifest {}\ndigest {digest}", path.display());
        }
        Command::Pretrain {
            manifest, all_speakers, resume, ..
        } => {
            let mut corpus = Corpus::load(manifest)?;
            if !all_speakers {
                corpus = corpus.with_speakers(|s| s.domain_label == DomainLabel::Control);
            }
            let stats = fhvae_core::corpus::normalize_corpus(&mut corpus.features, None)?;
            let stats_json = serde_json::to_string(&stats).map_err(Error::from)?;
            dir.write("norm.json", &stats_json)?;
            let opts = RunOptions {
                out_dir: Some(dir.path.clone()),
                resume: if *resume { Some(load_checkpoint(&dir.file("latest.ckpt"))?) } else { None },
                norm_stats: Some(stats_json),
                ..RunOptions::default()
            };
            let out = trainer::pretrain(&corpus, cfg.model.clone(), &cfg.pretrain, &opts)?;
            report_training(dir, &out);
        }
        Command::Finetune {
            ckpt,
            manifest,
            flags,
            resume,
        } => {
            let pre = load_checkpoint(ckpt)?;
            let mut corpus = Corpus::load(manifest)?;
            normalize_like(&mut corpus, &pre)?;
            let mut tc = cfg.finetune.clone();
            if let Some(names) = flags {
                tc.flags = parse_flags(names)?;
            }
            let opts = RunOptions {
                out_dir: Some(dir.path.clone()),
                resume: if *resume { Some(load_checkpoint(&dir.file("latest.ckpt"))?) } else { None },
                norm_stats: pre.norm_stats.clone(),
                ..RunOptions::default()
            };
            let out = trainer::finetune(&pre, &corpus, &tc, &opts)?;
            report_training(dir, &out);
        }
        Command::Extract {
            ckpt,
            manifest,
            shift,
            which,
        } => {
            let which: Which = usage(which)?;
            let ck = load_checkpoint(ckpt)?;
            let mut corpus = Corpus::load(manifest)?;
            normalize_like(&mut corpus, &ck)?;
            let feats = extract_corpus(&ck.model()?, &corpus, *shift)?;
            let records = export_features(&feats, &dir.path, which)?;
            dir.log_event(json!({"event": "extract", "utterances": feats.len(), "files": records.len()}))?;
            println!("{} utterances, {} files in {}", feats.len(), records.len(), dir.path.display());
        }
        Command::Eval {
            protocol,
            input,
            ckpt,
            manifest,
            repeats,
        } => {
            let protocol: Protocol = usage(protocol)?;
            let inputs: Vec<InputKind> = input.iter().map(|s| usage(s)).collect::<Result<_, _>>()?;
            let mut ec = cfg.eval.clone();
            ec.split.mode = protocol;
            if let Some(r) = repeats {
                ec.split.repeats = *r;
            }
            let mut corpus = Corpus::load(manifest)?;
            let data = match ckpt {
                Some(c) => {
                    let ck = load_checkpoint(c)?;
                    normalize_like(&mut corpus, &ck)?;
                    let feats = extract_corpus(&ck.model()?, &corpus, EXTRACT_SHIFT)?;
                    EvalData::with_features(&corpus, &feats)?
                }
                None => {
                    if let Some(k) = inputs.iter().find(|k| **k != InputKind::Fbank) {
                        return Err(UsageError(format!("input {} needs --ckpt", k.name())).into());
                    }
                    EvalData::from_corpus(&corpus)?
                }
            };
            let report = run_eval_suite(&data, &inputs, &ec)?;
            dir.write("report.tsv", &report.to_tsv())?;
            dir.write("report.json", &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
            dir.write("summary.txt", &report.summary())?;
            for r in &report.rows {
                dir.log_event(json!({"event": "eval", "protocol": protocol.name(), "input": r.input.name(), "scores": r.scores, "mean": r.mean}))?;
            }
            print!("{}", report.summary());
        }
        Command::ReproduceSynth { seeds } => {
            let (grid, _) = reproduce_synth(&cfg.reproduce, seeds, Some(&dir.path))?;
            for r in &grid.rows {
                dir.log_event(json!({"event": "grid", "method": r.method, "ood_f1": r.ood_f1, "indomain_f1": r.indomain_f1,
                    "probe_z1": r.probe_z1, "probe_z2": r.probe_z2, "probe_z12": r.probe_z12}))?;
            }
            print!("{}", grid.to_markdown());
        }
    }
    Ok(())
}

//! Checkpoint container.
//!
//! ```text
//! magic    "FHVC"
//! version  u32 LE
//! hlen     u64 LE
//! header   hlen bytes of JSON (configs, scalars, tensor directory)
//! data     every tensor of the directory, in order, row-major f64 LE
//! ```
//!
//! The data section must have exactly the length the directory implies, so
//! truncated or padded files are rejected before any state is built.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::{Discriminator, Fhvae, ModelConfig, PriorConfig};
use crate::nn::ParamStore;
use crate::optim::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FHVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Everything needed to continue an interrupted run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub stage: Stage,
    pub step: u64,
    pub bad_epochs: usize,
    pub best_fhvae: Option<ParamStore>,
    pub best_disc: Option<ParamStore>,
    pub opt_fhvae: Adam,
    pub opt_disc: Option<Adam>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub priors: PriorConfig,
    pub training: TrainingConfig,
    pub fhvae: ParamStore,
    pub disc: Option<ParamStore>,
    /// Frozen pretrained encoder used by the reference loss.
    pub reference: Option<ParamStore>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Normalization statistics of the training features, as JSON.
    pub norm_stats: Option<String>,
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Fhvae> {
        Fhvae::from_params(self.model_config.clone(), self.fhvae.clone())
    }

    pub fn discriminator(&self) -> Result<Option<Discriminator>> {
        self.disc
            .as_ref()
            .map(|p| Discriminator::from_params(&self.model_config, p.clone()))
            .transpose()
    }

    pub fn reference_model(&self) -> Result<Option<Fhvae>> {
        self.reference
            .as_ref()
            .map(|p| Fhvae::from_params(self.model_config.clone(), p.clone()))
            .transpose()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Group {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct ResumeHeader {
    stage: Stage,
    step: u64,
    bad_epochs: usize,
    opt_fhvae: Adam,
    opt_disc: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    priors: PriorConfig,
    training: TrainingConfig,
    epoch: usize,
    best_val_loss: Option<f64>,
    norm_stats: Option<String>,
    resume: Option<ResumeHeader>,
    groups: Vec<Group>,
}

const G_FHVAE: &str = "fhvae";
const G_DISC: &str = "disc";
const G_REF: &str = "reference";
const G_BEST_FHVAE: &str = "best_fhvae";
const G_BEST_DISC: &str = "best_disc";
const G_ADAM_F_M: &str = "adam_fhvae.m";
const G_ADAM_F_V: &str = "adam_fhvae.v";
const G_ADAM_D_M: &str = "adam_disc.m";
const G_ADAM_D_V: &str = "adam_disc.v";

fn group_of(name: &str, store: &ParamStore) -> Group {
    Group {
        name: name.to_string(),
        tensors: store
            .iter()
            .map(|(n, v)| TensorEntry {
                name: n.to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
    }
}

/// Optimizer moments named after the parameters they belong to.
fn moment_store(names: &ParamStore, moments: &[Array2<f64>]) -> ParamStore {
    let mut s = ParamStore::new();
    for ((n, _), m) in names.iter().zip(moments) {
        s.add(n, m.clone());
    }
    s
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut stores: Vec<(&str, ParamStore)> = vec![(G_FHVAE, ck.fhvae.clone())];
    if let Some(d) = &ck.disc {
        stores.push((G_DISC, d.clone()));
    }
    if let Some(r) = &ck.reference {
        stores.push((G_REF, r.clone()));
    }
    let resume = ck.resume.as_ref().map(|r| {
        if let Some(b) = &r.best_fhvae {
            stores.push((G_BEST_FHVAE, b.clone()));
        }
        if let Some(b) = &r.best_disc {
            stores.push((G_BEST_DISC, b.clone()));
        }
        let (m, v) = r.opt_fhvae.moments();
        stores.push((G_ADAM_F_M, moment_store(&ck.fhvae, m)));
        stores.push((G_ADAM_F_V, moment_store(&ck.fhvae, v)));
        if let (Some(opt), Some(d)) = (&r.opt_disc, &ck.disc) {
            let (m, v) = opt.moments();
            stores.push((G_ADAM_D_M, moment_store(d, m)));
            stores.push((G_ADAM_D_V, moment_store(d, v)));
        }
        ResumeHeader {
            stage: r.stage,
            step: r.step,
            bad_epochs: r.bad_epochs,
            opt_fhvae: r.opt_fhvae.clone(),
            opt_disc: r.opt_disc.clone(),
        }
    });
    let header = Header {
        model_config: ck.model_config.clone(),
        priors: ck.priors,
        training: ck.training.clone(),
        epoch: ck.epoch,
        best_val_loss: ck.best_val_loss,
        norm_stats: ck.norm_stats.clone(),
        resume,
        groups: stores.iter().map(|(n, s)| group_of(n, s)).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, s) in &stores {
        for v in s.values() {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing FHVC header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(corrupt("header is truncated"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let data = &body[hlen..];
    let expected: usize = header
        .groups
        .iter()
        .flat_map(|g| &g.tensors)
        .map(|t| t.rows * t.cols * 8)
        .sum();
    if data.len() != expected {
        return Err(corrupt(format!("data section is {} bytes, expected {expected}", data.len())));
    }
    let mut pos = 0;
    let mut groups: Vec<(String, ParamStore)> = Vec::new();
    for g in &header.groups {
        let mut s = ParamStore::new();
        for t in &g.tensors {
            let n = t.rows * t.cols;
            let vals: Vec<f64> = data[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * n;
            s.add(&t.name, Array2::from_shape_vec((t.rows, t.cols), vals).expect("sized above"));
        }
        groups.push((g.name.clone(), s));
    }
    let mut take = |name: &str| {
        groups
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| groups.remove(i).1)
    };
    let fhvae = take(G_FHVAE).ok_or_else(|| corrupt("no fhvae parameters"))?;
    let disc = take(G_DISC);
    let reference = take(G_REF);
    let resume = match header.resume {
        None => None,
        Some(r) => {
            let mut opt_fhvae = r.opt_fhvae;
            let m = take(G_ADAM_F_M).ok_or_else(|| corrupt("missing optimizer moments"))?;
            let v = take(G_ADAM_F_V).ok_or_else(|| corrupt("missing optimizer moments"))?;
            opt_fhvae.set_moments(m.values().to_vec(), v.values().to_vec());
            let best_fhvae = take(G_BEST_FHVAE);
            let best_disc = take(G_BEST_DISC);
            let opt_disc = match r.opt_disc {
                None => None,
                Some(mut o) => {
                    let m = take(G_ADAM_D_M).ok_or_else(|| corrupt("missing optimizer moments"))?;
                    let v = take(G_ADAM_D_V).ok_or_else(|| corrupt("missing optimizer moments"))?;
                    o.set_moments(m.values().to_vec(), v.values().to_vec());
                    Some(o)
                }
            };
            Some(ResumeState {
                stage: r.stage,
                step: r.step,
                bad_epochs: r.bad_epochs,
                best_fhvae,
                best_disc,
                opt_fhvae,
                opt_disc,
            })
        }
    };
    let ck = Checkpoint {
        model_config: header.model_config,
        priors: header.priors,
        training: header.training,
        fhvae,
        disc,
        reference,
        epoch: header.epoch,
        best_val_loss: header.best_val_loss,
        norm_stats: header.norm_stats,
        resume,
    };
    // Shape and finiteness checks against a freshly built network.
    ck.model()?;
    ck.discriminator()?;
    ck.reference_model()?;
    Ok(ck)
}

/// Write atomically: a temporary sibling is renamed over `path`.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(Error::at_path(&tmp))?;
        f.write_all(&bytes).map_err(Error::at_path(&tmp))?;
        f.sync_all().map_err(Error::at_path(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(Error::at_path(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(Error::at_path(path))?;
    decode_checkpoint(&bytes)
}

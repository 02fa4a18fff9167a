//! FHVAE networks and the domain discriminator.
//!
//! Each segment `x` (`seg_len × D` frames) is encoded twice. The sequence
//! encoder gives `q(z2 | x)`. The content encoder sees every frame
//! concatenated with a `z2` vector and gives `q(z1 | x, z2)`. The decoder runs
//! a recurrent stack over `[z1, z2]` repeated per frame and emits a diagonal
//! Gaussian for every frame. Recurrent summaries are the final states of both
//! directions of the top layer. Every log-variance head is clamped to
//! `[-logvar_clamp, logvar_clamp]`.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::corpus::{SegmentRecord, SEGMENT_FRAMES};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore, RecurrentStack};
use crate::rng::{stream, Purpose};

/// Prior variances of `z1`, `z2` around `μ2`, and `μ2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub var_z1: f64,
    pub var_z2: f64,
    pub var_mu2: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            var_z1: 1.0,
            var_z2: 0.25,
            var_mu2: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.var_z1, self.var_z2, self.var_mu2].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("prior variances must be positive: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub seg_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub z1_dim: usize,
    pub z2_dim: usize,
    pub disc_hidden: usize,
    pub disc_leaky_slope: f64,
    pub logvar_clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 80,
            seg_len: SEGMENT_FRAMES,
            hidden: 256,
            layers: 2,
            bidirectional: true,
            z1_dim: 32,
            z2_dim: 32,
            disc_hidden: 32,
            disc_leaky_slope: 0.2,
            logvar_clamp: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.feat_dim, self.seg_len, self.hidden, self.layers, self.z1_dim, self.z2_dim, self.disc_hidden];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !(self.logvar_clamp > 0.0) {
            return Err(Error::Config("logvar_clamp must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian given by mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::Contract(format!(
                "posterior mean has {} entries, logvar {}",
                mean.len(),
                logvar.len()
            )));
        }
        Ok(Self { mean, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| l.exp()).collect()
    }
}

/// `mean + exp(logvar / 2) ⊙ noise`.
pub fn reparam_sample(q: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(Error::Contract(format!(
            "noise has {} entries, posterior {}",
            noise.len(),
            q.dim()
        )));
    }
    Ok(q
        .mean
        .iter()
        .zip(&q.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Shrinkage estimate of a sequence's `μ2` from the sequence encoder means of
/// its segments: `Σ_n m_n / (N + var_z2 / var_mu2)`.
pub fn infer_seq_mean<V: AsRef<[f64]>>(enc_means: &[V], priors: &PriorConfig) -> Result<Vec<f64>> {
    let first = enc_means
        .first()
        .ok_or_else(|| Error::Contract("infer_seq_mean needs at least one segment".into()))?;
    let dim = first.as_ref().len();
    let mut sum = vec![0.0; dim];
    for m in enc_means {
        let m = m.as_ref();
        if m.len() != dim {
            return Err(Error::Contract("encoder means differ in length".into()));
        }
        for (s, x) in sum.iter_mut().zip(m) {
            *s += x;
        }
    }
    let denom = enc_means.len() as f64 + priors.var_z2 / priors.var_mu2;
    Ok(sum.into_iter().map(|s| s / denom).collect())
}

/// Mean / log-variance pair on a tape, both `B×dim`.
#[derive(Clone, Copy, Debug)]
pub struct GaussVars {
    pub mean: Var,
    pub logvar: Var,
}

impl GaussVars {
    /// Reparameterized draw with constant standard-normal `noise`.
    pub fn sample(&self, g: &mut Graph, noise: Array2<f64>) -> Var {
        let half = g.scale(self.logvar, 0.5);
        let std = g.exp(half);
        let eps = g.constant(noise);
        let scaled = g.mul(std, eps);
        g.add(self.mean, scaled)
    }
}

/// Segments stacked per frame: `frames[t]` is `B×D`.
#[derive(Clone, Debug)]
pub struct SegmentBatch {
    pub frames: Vec<Array2<f64>>,
}

impl SegmentBatch {
    pub fn from_records(segs: &[&SegmentRecord]) -> Result<Self> {
        let first = segs
            .first()
            .ok_or_else(|| Error::Contract("empty segment batch".into()))?;
        let (t_len, d) = first.x.dim();
        let mut frames = vec![Array2::zeros((segs.len(), d)); t_len];
        for (b, s) in segs.iter().enumerate() {
            if s.x.dim() != (t_len, d) {
                return Err(Error::Contract(format!(
                    "segment is {:?}, batch expects {:?}",
                    s.x.dim(),
                    (t_len, d)
                )));
            }
            for (t, frame) in frames.iter_mut().enumerate() {
                frame
                    .row_mut(b)
                    .iter_mut()
                    .zip(s.x.row(t))
                    .for_each(|(o, &x)| *o = x as f64);
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.first().map_or(0, |f| f.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn place(&self, g: &mut Graph) -> Vec<Var> {
        self.frames.iter().map(|f| g.constant(f.clone())).collect()
    }
}

#[derive(Clone, Debug)]
struct FhvaeLayout {
    enc_z2: RecurrentStack,
    z2_mean: Linear,
    z2_logvar: Linear,
    enc_z1: RecurrentStack,
    z1_mean: Linear,
    z1_logvar: Linear,
    dec: RecurrentStack,
    x_mean: Linear,
    x_logvar: Linear,
}

impl FhvaeLayout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::ModelInit, 0);
        let (h, l, bi) = (cfg.hidden, cfg.layers, cfg.bidirectional);
        let enc_z2 = RecurrentStack::new(store, "enc_z2", cfg.feat_dim, h, l, bi, &mut rng);
        let w = enc_z2.output_width();
        let z2_mean = Linear::new(store, "enc_z2.mean", w, cfg.z2_dim, &mut rng);
        let z2_logvar = Linear::new(store, "enc_z2.logvar", w, cfg.z2_dim, &mut rng);
        let enc_z1 = RecurrentStack::new(store, "enc_z1", cfg.feat_dim + cfg.z2_dim, h, l, bi, &mut rng);
        let z1_mean = Linear::new(store, "enc_z1.mean", w, cfg.z1_dim, &mut rng);
        let z1_logvar = Linear::new(store, "enc_z1.logvar", w, cfg.z1_dim, &mut rng);
        let dec = RecurrentStack::new(store, "dec", cfg.z1_dim + cfg.z2_dim, h, l, bi, &mut rng);
        let x_mean = Linear::new(store, "dec.mean", w, cfg.feat_dim, &mut rng);
        let x_logvar = Linear::new(store, "dec.logvar", w, cfg.feat_dim, &mut rng);
        Self {
            enc_z2,
            z2_mean,
            z2_logvar,
            enc_z1,
            z1_mean,
            z1_logvar,
            dec,
            x_mean,
            x_logvar,
        }
    }
}

/// Check that `params` has exactly the names and shapes of `reference`.
fn check_params(reference: &ParamStore, params: &ParamStore, what: &str) -> Result<()> {
    if reference.len() != params.len() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("{what}: {} tensors, expected {}", params.len(), reference.len()),
        });
    }
    for ((rn, rv), (pn, pv)) in reference.iter().zip(params.iter()) {
        if rn != pn || rv.dim() != pv.dim() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{what}: tensor {pn} {:?}, expected {rn} {:?}", pv.dim(), rv.dim()),
            });
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite(format!("{what} parameters")));
    }
    Ok(())
}

/// The FHVAE: sequence encoder, content encoder and decoder.
#[derive(Clone, Debug)]
pub struct Fhvae {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: FhvaeLayout,
}

impl Fhvae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = FhvaeLayout::build(&config, &mut params, seed);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        check_params(&fresh.params, &params, "fhvae")?;
        Ok(Self { params, ..fresh })
    }

    fn clamp_logvar(&self, g: &mut Graph, v: Var) -> Var {
        let c = self.config.logvar_clamp;
        g.clamp(v, -c, c)
    }

    pub fn encode_z2_graph(&self, g: &mut Graph, p: &Bound, frames: &[Var]) -> GaussVars {
        let out = self.layout.enc_z2.forward(g, p, frames);
        let mean = self.layout.z2_mean.forward(g, p, out.summary);
        let lv = self.layout.z2_logvar.forward(g, p, out.summary);
        GaussVars {
            mean,
            logvar: self.clamp_logvar(g, lv),
        }
    }

    pub fn encode_z1_graph(&self, g: &mut Graph, p: &Bound, frames: &[Var], z2: Var) -> GaussVars {
        let inputs: Vec<Var> = frames.iter().map(|&f| g.concat_cols(&[f, z2])).collect();
        let out = self.layout.enc_z1.forward(g, p, &inputs);
        let mean = self.layout.z1_mean.forward(g, p, out.summary);
        let lv = self.layout.z1_logvar.forward(g, p, out.summary);
        GaussVars {
            mean,
            logvar: self.clamp_logvar(g, lv),
        }
    }

    /// Per-frame observation Gaussians for latents `z1`, `z2` (`B×dim`).
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z1: Var, z2: Var) -> Vec<GaussVars> {
        let z = g.concat_cols(&[z1, z2]);
        let inputs = vec![z; self.config.seg_len];
        let out = self.layout.dec.forward(g, p, &inputs);
        out.steps
            .iter()
            .map(|&h| {
                let mean = self.layout.x_mean.forward(g, p, h);
                let lv = self.layout.x_logvar.forward(g, p, h);
                GaussVars {
                    mean,
                    logvar: self.clamp_logvar(g, lv),
                }
            })
            .collect()
    }

    fn check_segment(&self, x: &SegmentRecord) -> Result<()> {
        let want = (self.config.seg_len, self.config.feat_dim);
        if x.x.dim() != want {
            return Err(Error::Contract(format!("segment is {:?}, model expects {want:?}", x.x.dim())));
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64], dim: usize, what: &str) -> Result<()> {
        if z.len() != dim {
            return Err(Error::Contract(format!("{what} has {} entries, expected {dim}", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    pub fn encode_z2(&self, x: &SegmentRecord) -> Result<GaussianPosterior> {
        self.check_segment(x)?;
        let batch = SegmentBatch::from_records(&[x])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let frames = batch.place(&mut g);
        let q = self.encode_z2_graph(&mut g, &p, &frames);
        Ok(row_posterior(&g, q, 0))
    }

    pub fn encode_z1(&self, x: &SegmentRecord, z2: &[f64]) -> Result<GaussianPosterior> {
        self.check_segment(x)?;
        self.check_latent(z2, self.config.z2_dim, "z2")?;
        let batch = SegmentBatch::from_records(&[x])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let frames = batch.place(&mut g);
        let z2 = g.constant(row(z2));
        let q = self.encode_z1_graph(&mut g, &p, &frames, z2);
        Ok(row_posterior(&g, q, 0))
    }

    /// Observation model for one latent pair; mean and logvar are the
    /// `seg_len × D` frames flattened row-major.
    pub fn decode(&self, z1: &[f64], z2: &[f64]) -> Result<GaussianPosterior> {
        self.check_latent(z1, self.config.z1_dim, "z1")?;
        self.check_latent(z2, self.config.z2_dim, "z2")?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z1 = g.constant(row(z1));
        let z2 = g.constant(row(z2));
        let frames = self.decode_graph(&mut g, &p, z1, z2);
        let mut mean = Vec::new();
        let mut logvar = Vec::new();
        for f in frames {
            mean.extend(g.value(f.mean).iter());
            logvar.extend(g.value(f.logvar).iter());
        }
        GaussianPosterior::new(mean, logvar)
    }

    /// Posterior means for a batch of segments: `(μ_z2, μ_z1)`, each `B×dim`,
    /// with the content encoder conditioned on the sequence-encoder mean.
    pub fn posterior_means(&self, segs: &[&SegmentRecord]) -> Result<(Array2<f64>, Array2<f64>)> {
        for s in segs {
            self.check_segment(s)?;
        }
        let batch = SegmentBatch::from_records(segs)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let frames = batch.place(&mut g);
        let q2 = self.encode_z2_graph(&mut g, &p, &frames);
        let q1 = self.encode_z1_graph(&mut g, &p, &frames, q2.mean);
        Ok((g.value(q2.mean).clone(), g.value(q1.mean).clone()))
    }

    /// Sequence-encoder means only.
    pub fn z2_means(&self, segs: &[&SegmentRecord]) -> Result<Array2<f64>> {
        let batch = SegmentBatch::from_records(segs)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let frames = batch.place(&mut g);
        let q2 = self.encode_z2_graph(&mut g, &p, &frames);
        Ok(g.value(q2.mean).clone())
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

fn row_posterior(g: &Graph, q: GaussVars, b: usize) -> GaussianPosterior {
    GaussianPosterior {
        mean: g.value(q.mean).row(b).to_vec(),
        logvar: g.value(q.logvar).row(b).to_vec(),
    }
}

/// Domain discriminator: `z1 → hidden (leaky ReLU) → 1 (logistic)`. Its
/// output is read as P(dysarthric).
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    l1: Linear,
    l2: Linear,
    slope: f64,
}

impl Discriminator {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::DiscInit, 0);
        let mut params = ParamStore::new();
        let l1 = Linear::new(&mut params, "disc.l1", config.z1_dim, config.disc_hidden, &mut rng);
        let l2 = Linear::new(&mut params, "disc.l2", config.disc_hidden, 1, &mut rng);
        Self {
            params,
            l1,
            l2,
            slope: config.disc_leaky_slope,
        }
    }

    pub fn from_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0);
        check_params(&fresh.params, &params, "discriminator")?;
        Ok(Self { params, ..fresh })
    }

    /// Logits `B×1` for content means `B×z1_dim`.
    pub fn logits_graph(&self, g: &mut Graph, p: &Bound, mu_z1: Var) -> Var {
        let h = self.l1.forward(g, p, mu_z1);
        let h = g.leaky_relu(h, self.slope);
        self.l2.forward(g, p, h)
    }

    pub fn logits(&self, mu_z1: &Array2<f64>) -> Array1<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(mu_z1.clone());
        let z = self.logits_graph(&mut g, &p, x);
        g.value(z).column(0).to_owned()
    }

    /// P(dysarthric | μ_z1).
    pub fn discriminate(&self, mu_z1: &[f64]) -> f64 {
        sigmoid(self.logits(&row(mu_z1))[0])
    }

    /// Output-layer bias, exposed for tests that probe monotonicity.
    pub fn output_bias(&mut self) -> &mut Array2<f64> {
        self.params.get_mut(self.l2.b)
    }
}

/// Working set for hierarchical sampling: cached sequences and their `μ̃2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceCache {
    pub seq_ids: Vec<usize>,
    /// `K × z2_dim`, row `k` belongs to `seq_ids[k]`.
    pub mu2: Array2<f64>,
    pub counts: Vec<usize>,
    index: HashMap<usize, usize>,
}

impl SequenceCache {
    /// Build from per-sequence encoder means (`N_i × z2_dim` each).
    pub fn from_encoder_means(
        seq_ids: Vec<usize>,
        enc_means: &[Array2<f64>],
        priors: &PriorConfig,
    ) -> Result<Self> {
        if seq_ids.len() != enc_means.len() {
            return Err(Error::Contract("one encoder-mean block per cached sequence".into()));
        }
        let dim = enc_means.first().map_or(0, |m| m.ncols());
        let mut mu2 = Array2::zeros((seq_ids.len(), dim));
        let mut counts = Vec::with_capacity(seq_ids.len());
        for (k, means) in enc_means.iter().enumerate() {
            let rows: Vec<Vec<f64>> = means.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
            let m = infer_seq_mean(&rows, priors)?;
            mu2.row_mut(k).assign(&Array1::from(m));
            counts.push(means.nrows());
        }
        let index = seq_ids.iter().enumerate().map(|(k, &s)| (s, k)).collect();
        Ok(Self {
            seq_ids,
            mu2,
            counts,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.seq_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq_ids.is_empty()
    }

    pub fn position(&self, seq_id: usize) -> Option<usize> {
        self.index.get(&seq_id).copied()
    }

    pub fn contains(&self, seq_id: usize) -> bool {
        self.index.contains_key(&seq_id)
    }

    pub fn mu2_of(&self, seq_id: usize) -> Option<Vec<f64>> {
        self.position(seq_id).map(|k| self.mu2.row(k).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DomainLabel;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            seg_len: 5,
            hidden: 4,
            layers: 2,
            z1_dim: 2,
            z2_dim: 2,
            disc_hidden: 4,
            ..ModelConfig::default()
        }
    }

    fn seg(cfg: &ModelConfig, f: impl Fn(usize, usize) -> f32) -> SegmentRecord {
        SegmentRecord {
            x: Array2::from_shape_fn((cfg.seg_len, cfg.feat_dim), |(t, d)| f(t, d)),
            sequence_id: 0,
            domain_label: DomainLabel::Control,
            frame_offset: 0,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let cfg = tiny();
        let mut m = Fhvae::new(cfg.clone(), 1).unwrap();
        m.params.map_values(|v| v.fill(0.0));
        let x = seg(&cfg, |t, d| (t + d) as f32);
        let q2 = m.encode_z2(&x).unwrap();
        assert_eq!(q2, GaussianPosterior::standard(2));
        let q1 = m.encode_z1(&x, &[0.3, -0.2]).unwrap();
        assert_eq!(q1, GaussianPosterior::standard(2));
        let px = m.decode(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(px, GaussianPosterior::standard(cfg.seg_len * cfg.feat_dim));

        let mut d = Discriminator::new(&cfg, 0);
        d.params.map_values(|v| v.fill(0.0));
        assert_eq!(d.discriminate(&[5.0, -1.0]), 0.5);
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let cfg = tiny();
        let m = Fhvae::new(cfg.clone(), 3).unwrap();
        let x = seg(&cfg, |t, d| (t as f32 * 0.1) - d as f32);
        assert_eq!(m.encode_z2(&x).unwrap(), m.encode_z2(&x.clone()).unwrap());
        assert_eq!(m.decode(&[0.1, 0.2], &[0.3, 0.4]).unwrap(), m.decode(&[0.1, 0.2], &[0.3, 0.4]).unwrap());
        let bad = SegmentRecord {
            x: Array2::zeros((4, 3)),
            ..x.clone()
        };
        assert!(matches!(m.encode_z2(&bad), Err(Error::Contract(_))));
        assert!(matches!(m.encode_z1(&x, &[0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn logvar_heads_are_clamped() {
        let cfg = tiny();
        let mut m = Fhvae::new(cfg.clone(), 3).unwrap();
        m.params.map_values(|v| v.mapv_inplace(|x| x * 1e3));
        let x = seg(&cfg, |t, d| (t * 10 + d) as f32);
        let q = m.encode_z2(&x).unwrap();
        assert!(q.logvar.iter().all(|l| l.abs() <= 10.0));
        assert!(q.mean.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reparam_cases() {
        let q = GaussianPosterior::new(vec![1.5, -2.0], vec![0.3, -0.7]).unwrap();
        assert_eq!(reparam_sample(&q, &[0.0, 0.0]).unwrap(), q.mean);
        let q = GaussianPosterior::new(vec![0.0], vec![4f64.ln()]).unwrap();
        assert!((reparam_sample(&q, &[1.0]).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!(reparam_sample(&q, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn seq_mean_cases() {
        let p = PriorConfig::default();
        let m = infer_seq_mean(&[vec![1.0], vec![3.0]], &p).unwrap();
        assert!((m[0] - 4.0 / 2.25).abs() < 1e-12);
        assert_eq!(infer_seq_mean(&vec![vec![0.0; 4]; 3], &p).unwrap(), vec![0.0; 4]);
        assert!(infer_seq_mean::<Vec<f64>>(&[], &p).is_err());
        let many = vec![vec![0.7]; 10_000];
        assert!((infer_seq_mean(&many, &p).unwrap()[0] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn discriminator_bias_is_monotone() {
        let cfg = tiny();
        let mut d = Discriminator::new(&cfg, 5);
        let z = [0.4, -0.9];
        let mut last = d.discriminate(&z);
        for _ in 0..5 {
            d.output_bias()[[0, 0]] += 0.5;
            let p = d.discriminate(&z);
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn params_round_trip_through_from_params() {
        let cfg = tiny();
        let m = Fhvae::new(cfg.clone(), 9).unwrap();
        let again = Fhvae::from_params(cfg.clone(), m.params.clone()).unwrap();
        assert_eq!(again.params, m.params);
        let other = Fhvae::new(ModelConfig { hidden: 5, ..cfg.clone() }, 9).unwrap();
        assert!(Fhvae::from_params(cfg, other.params).is_err());
    }

    /// Standard normal CDF via the Abramowitz-Stegun erf approximation
    /// (absolute error below 1.5e-7).
    fn phi(x: f64) -> f64 {
        let z = x.abs() / std::f64::consts::SQRT_2;
        let t = 1.0 / (1.0 + 0.327_591_1 * z);
        let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
        let erf = 1.0 - poly * (-z * z).exp();
        0.5 * (1.0 + erf.copysign(x))
    }

    #[test]
    fn reparam_draws_follow_the_posterior() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let q = GaussianPosterior::new(vec![0.8, -1.2], vec![0.6, -1.4]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 4000;
        for d in 0..2 {
            let sd = (0.5 * q.logvar[d]).exp();
            let mut z: Vec<f64> = (0..n)
                .map(|_| {
                    let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                    (reparam_sample(&q, &e).unwrap()[d] - q.mean[d]) / sd
                })
                .collect();
            z.sort_by(f64::total_cmp);
            let ks = z
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let f = phi(v);
                    (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
                })
                .fold(0.0, f64::max);
            // 1% critical value.
            assert!(ks < 1.63 / (n as f64).sqrt(), "dimension {d}: KS statistic {ks}");
        }
    }

    proptest::proptest! {
        #[test]
        fn seq_mean_ignores_segment_order(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..30),
            rot in 0usize..30,
            var_z2 in 0.01f64..2.0,
            var_mu2 in 0.1f64..4.0,
        ) {
            let p = PriorConfig { var_z1: 1.0, var_z2, var_mu2 };
            let a = infer_seq_mean(&rows, &p).unwrap();
            let mut shuffled = rows.clone();
            shuffled.rotate_left(rot % rows.len());
            shuffled.reverse();
            let b = infer_seq_mean(&shuffled, &p).unwrap();
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

//! Loss terms of the FHVAE objective and its adversarial extensions.
//!
//! Each term exists twice: a scalar function over plain values (used for
//! reporting and as the reference in tests) and a `*_rows` function that
//! builds the per-segment term on a [`Graph`] as a `B×1` column. Batch
//! reduction is always the arithmetic mean over segments.
//!
//! Binary cross-entropies take the discriminator output as P(dysarthric)
//! and clamp probabilities to `[1e-7, 1 - 1e-7]` (on the tape: logits to
//! `±ln((1 - 1e-7) / 1e-7)`). Clamp events are counted.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{DomainLabel, SegmentRecord};
use crate::error::{Error, Result};
use crate::model::{Fhvae, GaussVars, GaussianPosterior, PriorConfig, SequenceCache};

pub const PROB_EPS: f64 = 1e-7;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Probability clamps performed by the scalar cross-entropy functions.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

fn logit_limit() -> f64 {
    ((1.0 - PROB_EPS) / PROB_EPS).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_z2_disc: f64,
    pub w_gen: f64,
    pub w_ref: f64,
    pub w_dstg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_z2_disc: 10.0,
            w_gen: 500.0,
            w_ref: 0.1,
            w_dstg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_z2_disc, self.w_gen, self.w_ref, self.w_dstg];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

/// Which optional terms are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermFlags {
    pub adversarial: bool,
    pub reference: bool,
    pub gen_dys_only: bool,
    pub disentangle: bool,
}

impl TermFlags {
    pub fn gen_mode(&self) -> GenMode {
        if self.gen_dys_only {
            GenMode::DysOnly
        } else {
            GenMode::Both
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    Both,
    DysOnly,
}

/// Argument order of the reference KL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(q_reference ‖ q_current)`.
    #[default]
    ReferenceFirst,
    /// `KL(q_current ‖ q_reference)`.
    CurrentFirst,
}

/// Unweighted loss terms for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub lb: f64,
    pub z2_disc: f64,
    pub gen: f64,
    pub reference: f64,
    pub dstg: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub lb_loss: f64,
    pub z2_disc_loss: f64,
    pub gen_loss: f64,
    pub ref_loss: f64,
    pub dstg_loss: f64,
    pub total: f64,
    pub disc_loss: f64,
    pub clamp_events: u64,
}

impl LossReport {
    /// Recompute the weighted sum from the stored components.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.lb_loss
            + w.w_z2_disc * self.z2_disc_loss
            + w.w_gen * self.gen_loss
            + w.w_ref * self.ref_loss
            + w.w_dstg * self.dstg_loss
    }
}

/// Weighted FHVAE objective. Terms disabled by `flags` are reported as 0.
pub fn total_fhvae_loss(c: &LossComponents, w: &LossWeights, flags: &TermFlags) -> Result<LossReport> {
    w.validate()?;
    let mut r = LossReport {
        lb_loss: c.lb,
        z2_disc_loss: c.z2_disc,
        gen_loss: if flags.adversarial { c.gen } else { 0.0 },
        ref_loss: if flags.reference { c.reference } else { 0.0 },
        dstg_loss: if flags.disentangle { c.dstg } else { 0.0 },
        ..LossReport::default()
    };
    r.total = r.weighted_sum(w);
    Ok(r)
}

// ---------------------------------------------------------------------------
// Scalar versions

/// `KL(q ‖ N(p_mean, diag(p_var)))`.
pub fn kl_diag_gauss(q: &GaussianPosterior, p_mean: &[f64], p_var: &[f64]) -> Result<f64> {
    if p_mean.len() != q.dim() || p_var.len() != q.dim() {
        return Err(Error::Contract("KL operands differ in dimension".into()));
    }
    if p_var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Contract("KL prior variance must be positive".into()));
    }
    Ok(0.5
        * q.mean
            .iter()
            .zip(&q.logvar)
            .zip(p_mean.iter().zip(p_var))
            .map(|((m, lv), (pm, pv))| pv.ln() - lv + (lv.exp() + (m - pm).powi(2)) / pv - 1.0)
            .sum::<f64>())
}

fn gauss_log_density(x: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * x
        .iter()
        .zip(mean)
        .zip(logvar)
        .map(|((x, m), lv)| (2.0 * PI).ln() + lv + (x - m).powi(2) / lv.exp())
        .sum::<f64>()
}

/// Negative segment lower bound given the decoder output `recon` for the
/// sampled latents: `-(log p(x|z1,z2) − KL(q_z1‖p(z1)) − KL(q_z2‖p(z2|μ̃2)) + log p(μ̃2) / N_i)`.
#[allow(clippy::too_many_arguments)]
pub fn lower_bound_from_recon(
    x: &[f64],
    recon: &GaussianPosterior,
    q_z1: &GaussianPosterior,
    q_z2: &GaussianPosterior,
    mu2: &[f64],
    priors: &PriorConfig,
    n_i: usize,
) -> Result<f64> {
    if x.len() != recon.dim() {
        return Err(Error::Contract("observation and reconstruction differ in size".into()));
    }
    if n_i == 0 {
        return Err(Error::Contract("sequence segment count must be positive".into()));
    }
    let loglik = gauss_log_density(x, &recon.mean, &recon.logvar);
    let kl1 = kl_diag_gauss(q_z1, &vec![0.0; q_z1.dim()], &vec![priors.var_z1; q_z1.dim()])?;
    let kl2 = kl_diag_gauss(q_z2, mu2, &vec![priors.var_z2; q_z2.dim()])?;
    let log_p_mu2 = gauss_log_density(mu2, &vec![0.0; mu2.len()], &vec![priors.var_mu2.ln(); mu2.len()]);
    Ok(-(loglik - kl1 - kl2 + log_p_mu2 / n_i as f64))
}

/// [`lower_bound_from_recon`] with the decoder evaluated at the samples.
#[allow(clippy::too_many_arguments)]
pub fn lower_bound_loss(
    model: &Fhvae,
    x: &SegmentRecord,
    q_z1: &GaussianPosterior,
    q_z2: &GaussianPosterior,
    z1_sample: &[f64],
    z2_sample: &[f64],
    mu2: &[f64],
    priors: &PriorConfig,
    n_i: usize,
) -> Result<f64> {
    let recon = model.decode(z1_sample, z2_sample)?;
    let flat: Vec<f64> = x.x.iter().map(|&v| v as f64).collect();
    lower_bound_from_recon(&flat, &recon, q_z1, q_z2, mu2, priors, n_i)
}

/// Sequence-discriminative loss: negative log-softmax, over the cached
/// sequences, of `−‖z2 − μ̃2_j‖² / (2·var_z2)` at the segment's own sequence.
pub fn z2_disc_loss(z2: &[f64], own_seq_id: usize, cache: &SequenceCache, priors: &PriorConfig) -> Result<f64> {
    let own = cache
        .position(own_seq_id)
        .ok_or_else(|| Error::Contract(format!("sequence {own_seq_id} is not cached")))?;
    if cache.len() < 2 {
        log::warn!("z2 discriminative loss needs at least two cached sequences; returning 0");
        return Ok(0.0);
    }
    let logits: Vec<f64> = cache
        .mu2
        .axis_iter(Axis(0))
        .map(|m| -m.iter().zip(z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * priors.var_z2))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[own])
}

fn clamp_prob(p: f64) -> f64 {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if c != p {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
    }
    c
}

fn bce(p: f64, target: f64) -> f64 {
    let p = clamp_prob(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Discriminator cross-entropy for one segment with true label `label`.
pub fn disc_loss(p_d: f64, label: DomainLabel) -> f64 {
    bce(p_d, label.as_f64())
}

/// Generator cross-entropy against the flipped label. In `DysOnly` mode
/// control segments contribute nothing.
pub fn gen_loss(p_d: f64, label: DomainLabel, mode: GenMode) -> f64 {
    match (mode, label) {
        (GenMode::DysOnly, DomainLabel::Control) => 0.0,
        _ => bce(p_d, 1.0 - label.as_f64()),
    }
}

/// KL between the frozen reference posterior and the current one, on
/// control segments only.
pub fn reference_loss(
    q_now: &GaussianPosterior,
    q_frozen: &GaussianPosterior,
    label: DomainLabel,
    direction: KlDirection,
) -> Result<f64> {
    if label == DomainLabel::Dysarthric {
        return Ok(0.0);
    }
    match direction {
        KlDirection::ReferenceFirst => kl_diag_gauss(q_frozen, &q_now.mean, &q_now.variance()),
        KlDirection::CurrentFirst => kl_diag_gauss(q_now, &q_frozen.mean, &q_frozen.variance()),
    }
}

fn column_valid(x: &Array2<f64>) -> Vec<bool> {
    let n = x.nrows() as f64;
    x.axis_iter(Axis(1))
        .enumerate()
        .map(|(j, col)| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let ok = var > 1e-12 * (1.0 + mean * mean);
            if !ok {
                log::warn!("disentanglement loss: column {j} has zero variance; excluded");
            }
            ok
        })
        .collect()
}

/// Sum of squared Pearson correlations between every column of `mu_z1` and
/// every column of `mu_z2` over the batch.
pub fn disentangle_loss(mu_z1: &Array2<f64>, mu_z2: &Array2<f64>) -> Result<f64> {
    if mu_z1.nrows() != mu_z2.nrows() {
        return Err(Error::Contract("disentanglement inputs differ in batch size".into()));
    }
    if mu_z1.nrows() < 3 {
        return Err(Error::Contract(format!(
            "disentanglement loss needs a batch of at least 3, got {}",
            mu_z1.nrows()
        )));
    }
    let standardize = |x: &Array2<f64>| {
        let valid = column_valid(x);
        let mean = x.mean_axis(Axis(0)).unwrap();
        let mut c = x - &mean;
        for (j, mut col) in c.axis_iter_mut(Axis(1)).enumerate() {
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if valid[j] {
                col.mapv_inplace(|v| v / norm);
            } else {
                col.fill(0.0);
            }
        }
        c
    };
    let a = standardize(mu_z1);
    let b = standardize(mu_z2);
    let corr = a.t().dot(&b);
    Ok(corr.iter().map(|c| c * c).sum())
}

// ---------------------------------------------------------------------------
// Tape versions

/// Per-row `KL(q ‖ p)` between diagonal Gaussians; `p` may broadcast (`1×L`).
pub fn kl_rows(g: &mut Graph, q: GaussVars, p: GaussVars) -> Var {
    let var_q = g.exp(q.logvar);
    let diff = g.sub(q.mean, p.mean);
    let diff2 = g.square(diff);
    let num = g.add(var_q, diff2);
    let neg_lv_p = g.neg(p.logvar);
    let inv_var_p = g.exp(neg_lv_p);
    let ratio = g.mul(num, inv_var_p);
    let lv_diff = g.sub(p.logvar, q.logvar);
    let s = g.add(ratio, lv_diff);
    let s = g.add_scalar(s, -1.0);
    let s = g.sum_cols(s);
    g.scale(s, 0.5)
}

/// Constant isotropic Gaussian `N(mean, var·I)` as tape values.
pub fn constant_gauss(g: &mut Graph, mean: Array2<f64>, var: f64) -> GaussVars {
    let dim = mean.ncols();
    GaussVars {
        mean: g.constant(mean),
        logvar: g.constant(Array2::from_elem((1, dim), var.ln())),
    }
}

/// Per-row Gaussian log density of `x` summed over columns.
pub fn gauss_loglik_rows(g: &mut Graph, x: Var, p: GaussVars) -> Var {
    let diff = g.sub(x, p.mean);
    let diff2 = g.square(diff);
    let neg_lv = g.neg(p.logvar);
    let inv_var = g.exp(neg_lv);
    let quad = g.mul(diff2, inv_var);
    let s = g.add(quad, p.logvar);
    let s = g.add_scalar(s, (2.0 * PI).ln());
    let s = g.sum_cols(s);
    g.scale(s, -0.5)
}

/// Inputs of the per-segment lower bound on a tape.
pub struct LowerBoundInputs<'a> {
    pub frames: &'a [Var],
    pub recon: &'a [GaussVars],
    pub q_z1: GaussVars,
    pub q_z2: GaussVars,
    /// `B×z2_dim` constant: `μ̃2` of each segment's sequence.
    pub mu2: Array2<f64>,
    /// Segments in each row's sequence.
    pub counts: Vec<usize>,
}

pub fn lower_bound_rows(g: &mut Graph, inp: LowerBoundInputs<'_>, priors: &PriorConfig) -> Var {
    let mut loglik = None;
    for (&x, &p) in inp.frames.iter().zip(inp.recon) {
        let ll = gauss_loglik_rows(g, x, p);
        loglik = Some(match loglik {
            None => ll,
            Some(acc) => g.add(acc, ll),
        });
    }
    let loglik = loglik.expect("at least one frame");
    let z1_dim = g.shape(inp.q_z1.mean).1;
    let p_z1 = constant_gauss(g, Array2::zeros((1, z1_dim)), priors.var_z1);
    let kl1 = kl_rows(g, inp.q_z1, p_z1);
    let log_p_mu2: Array2<f64> = Array2::from_shape_fn((inp.mu2.nrows(), 1), |(b, _)| {
        let row = inp.mu2.row(b);
        let lp = -0.5
            * row
                .iter()
                .map(|m| (2.0 * PI * priors.var_mu2).ln() + m * m / priors.var_mu2)
                .sum::<f64>();
        lp / inp.counts[b] as f64
    });
    let p_z2 = constant_gauss(g, inp.mu2, priors.var_z2);
    let kl2 = kl_rows(g, inp.q_z2, p_z2);
    let lp = g.constant(log_p_mu2);
    let bound = g.sub(loglik, kl1);
    let bound = g.sub(bound, kl2);
    let bound = g.add(bound, lp);
    g.neg(bound)
}

/// Per-row sequence-discriminative loss against every cached `μ̃2`.
pub fn z2_disc_rows(g: &mut Graph, z2: Var, cache: &SequenceCache, own: &[usize], priors: &PriorConfig) -> Var {
    let batch = g.shape(z2).0;
    if cache.len() < 2 {
        log::warn!("z2 discriminative loss needs at least two cached sequences; returning 0");
        return g.constant(Array2::zeros((batch, 1)));
    }
    // ‖z2‖² is constant across a row, so it drops out of the softmax.
    let mt = g.constant(cache.mu2.t().to_owned());
    let half_sq = cache
        .mu2
        .map_axis(Axis(1), |m| 0.5 * m.dot(&m))
        .insert_axis(Axis(0));
    let half_sq = g.constant(half_sq);
    let cross = g.matmul(z2, mt);
    let logits = g.sub(cross, half_sq);
    let logits = g.scale(logits, 1.0 / priors.var_z2);
    let logp = g.log_softmax_rows(logits);
    let mut mask = Array2::zeros((batch, cache.len()));
    for (b, &k) in own.iter().enumerate() {
        mask[[b, k]] = 1.0;
    }
    let mask = g.constant(mask);
    let picked = g.mul(logp, mask);
    let picked = g.sum_cols(picked);
    g.neg(picked)
}

/// Per-row binary cross-entropy from logits with per-row `targets` and
/// `weights`. Returns the column and the number of clamped logits.
pub fn bce_logit_rows(g: &mut Graph, logits: Var, targets: &[f64], weights: &[f64]) -> (Var, u64) {
    let lim = logit_limit();
    let clamped = g.value(logits).iter().filter(|z| z.abs() > lim).count() as u64;
    let z = g.clamp(logits, -lim, lim);
    let sp = g.softplus(z);
    let n = targets.len();
    let t = g.constant(Array2::from_shape_vec((n, 1), targets.to_vec()).expect("targets"));
    let tz = g.mul(t, z);
    let l = g.sub(sp, tz);
    let w = g.constant(Array2::from_shape_vec((n, 1), weights.to_vec()).expect("weights"));
    (g.mul(l, w), clamped)
}

/// Reference KL per row, zeroed on dysarthric rows.
pub fn reference_rows(
    g: &mut Graph,
    q_now: GaussVars,
    q_frozen: GaussVars,
    labels: &[DomainLabel],
    direction: KlDirection,
) -> Var {
    let kl = match direction {
        KlDirection::ReferenceFirst => kl_rows(g, q_frozen, q_now),
        KlDirection::CurrentFirst => kl_rows(g, q_now, q_frozen),
    };
    let mask: Vec<f64> = labels
        .iter()
        .map(|l| if *l == DomainLabel::Control { 1.0 } else { 0.0 })
        .collect();
    let mask = g.constant(Array2::from_shape_vec((labels.len(), 1), mask).expect("mask"));
    g.mul(kl, mask)
}

fn standardize_cols(g: &mut Graph, x: Var) -> Var {
    let valid = column_valid(g.value(x));
    let m: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let n = m.len();
    let mask = g.constant(Array2::from_shape_vec((1, n), m.clone()).expect("mask"));
    let pad = g.constant(Array2::from_shape_vec((1, n), m.iter().map(|v| 1.0 - v).collect()).expect("pad"));
    let mean = g.mean_rows(x);
    let centred = g.sub(x, mean);
    let sq = g.square(centred);
    let ss = g.sum_rows(sq);
    let ss = g.add(ss, pad);
    let norm = g.sqrt(ss);
    let z = g.div(centred, norm);
    g.mul(z, mask)
}

/// Sum of squared cross-correlations as a `1×1` tape value.
pub fn disentangle_graph(g: &mut Graph, mu_z1: Var, mu_z2: Var) -> Var {
    let a = standardize_cols(g, mu_z1);
    let b = standardize_cols(g, mu_z2);
    let at = g.transpose(a);
    let corr = g.matmul(at, b);
    let sq = g.square(corr);
    g.sum_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn q(mean: &[f64], var: &[f64]) -> GaussianPosterior {
        GaussianPosterior::new(mean.to_vec(), var.iter().map(|v| v.ln()).collect()).unwrap()
    }

    #[test]
    fn kl_hand_values() {
        assert!(kl_diag_gauss(&q(&[0.3, -1.0], &[0.5, 2.0]), &[0.3, -1.0], &[0.5, 2.0]).unwrap().abs() < 1e-12);
        assert!((kl_diag_gauss(&q(&[1.0], &[1.0]), &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        let expect = 0.5 * (4f64.ln() + 0.25 - 1.0);
        assert!((kl_diag_gauss(&q(&[0.0], &[0.25]), &[0.0], &[1.0]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3181).abs() < 1e-4);
        assert!(kl_diag_gauss(&q(&[0.0], &[1.0]), &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn cross_entropy_hand_values() {
        let ln2 = 2f64.ln();
        assert!((disc_loss(0.5, DomainLabel::Control) - ln2).abs() < 1e-12);
        assert!((disc_loss(0.5, DomainLabel::Dysarthric) - ln2).abs() < 1e-12);
        assert!((disc_loss(0.9, DomainLabel::Dysarthric) - 0.1054).abs() < 1e-4);
        assert!((disc_loss(0.9, DomainLabel::Control) - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((gen_loss(0.5, DomainLabel::Dysarthric, GenMode::DysOnly) - ln2).abs() < 1e-12);
        assert!((gen_loss(0.5, DomainLabel::Control, GenMode::Both) - ln2).abs() < 1e-12);
        assert_eq!(gen_loss(0.5, DomainLabel::Control, GenMode::DysOnly), 0.0);
        assert!((gen_loss(0.1, DomainLabel::Dysarthric, GenMode::DysOnly) - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn probabilities_are_clamped_and_counted() {
        let before = clamp_events();
        let l = disc_loss(1.0, DomainLabel::Control);
        assert!(l.is_finite());
        assert!((l + PROB_EPS.ln()).abs() < 1e-9);
        assert!(clamp_events() > before);
    }

    #[test]
    fn reference_cases() {
        let a = q(&[0.2, 0.4], &[1.3, 0.7]);
        assert_eq!(reference_loss(&a, &a, DomainLabel::Control, KlDirection::ReferenceFirst).unwrap(), 0.0);
        let now = q(&[1.0], &[1.0]);
        let frozen = q(&[0.0], &[1.0]);
        assert_eq!(reference_loss(&now, &frozen, DomainLabel::Dysarthric, KlDirection::ReferenceFirst).unwrap(), 0.0);
        let l = reference_loss(&now, &frozen, DomainLabel::Control, KlDirection::ReferenceFirst).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        // Direction matters when variances differ.
        let now = q(&[0.0], &[0.25]);
        let f = reference_loss(&now, &frozen, DomainLabel::Control, KlDirection::ReferenceFirst).unwrap();
        let r = reference_loss(&now, &frozen, DomainLabel::Control, KlDirection::CurrentFirst).unwrap();
        assert!((f - r).abs() > 1e-3);
    }

    #[test]
    fn disentangle_hand_values() {
        let x = array![[1.0], [2.0], [3.0]];
        assert!(disentangle_loss(&x, &array![[1.0], [-2.0], [1.0]]).unwrap().abs() < 1e-12);
        assert!((disentangle_loss(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((disentangle_loss(&x, &array![[3.0], [2.0], [1.0]]).unwrap() - 1.0).abs() < 1e-12);
        assert!(disentangle_loss(&array![[1.0], [2.0]], &array![[1.0], [2.0]]).is_err());
        // Constant columns are excluded rather than producing NaN.
        let with_const = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        assert!((disentangle_loss(&with_const, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let c = LossComponents {
            lb: 1.0,
            z2_disc: 0.1,
            gen: 0.002,
            reference: 0.3,
            dstg: 0.5,
        };
        let all = TermFlags {
            adversarial: true,
            reference: true,
            gen_dys_only: true,
            disentangle: true,
        };
        let r = total_fhvae_loss(&c, &w, &all).unwrap();
        assert!((r.total - 3.53).abs() < 1e-9);
        let adv_only = TermFlags {
            adversarial: true,
            ..TermFlags::default()
        };
        let r = total_fhvae_loss(&c, &w, &adv_only).unwrap();
        assert!((r.total - (1.0 + 10.0 * 0.1 + 500.0 * 0.002)).abs() < 1e-12);
        assert_eq!(r.ref_loss, 0.0);
        assert_eq!(total_fhvae_loss(&LossComponents::default(), &w, &all).unwrap().total, 0.0);
        let neg = LossWeights { w_gen: -1.0, ..w };
        assert!(matches!(total_fhvae_loss(&c, &neg, &all), Err(Error::Config(_))));
    }

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Array2<f64>) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let out = build(&mut g, x);
        g.backward(out);
        let grad: Vec<f64> = g.grad(x).unwrap().iter().copied().collect();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut v = x0.clone();
                v.as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let x = g.constant(v);
                let out = build(&mut g, x);
                g.scalar_value(out)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let ana = grad[idx];
            assert!((num - ana).abs() < 1e-5 * (1.0 + num.abs()), "element {idx}: {num} vs {ana}");
        }
    }

    fn sample_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        use rand::Rng as _;
        let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Synth, 99);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.5..1.5))
    }

    fn cache(priors: &PriorConfig) -> SequenceCache {
        let blocks = vec![sample_matrix(3, 2, 1), sample_matrix(5, 2, 2), sample_matrix(2, 2, 3)];
        SequenceCache::from_encoder_means(vec![7, 3, 11], &blocks, priors).unwrap()
    }

    #[test]
    fn z2_disc_tape_matches_scalar_and_gradients() {
        let priors = PriorConfig::default();
        let c = cache(&priors);
        let z = sample_matrix(4, 2, 5);
        let own_ids = [7, 3, 11, 3];
        let own: Vec<usize> = own_ids.iter().map(|s| c.position(*s).unwrap()).collect();
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let rows = z2_disc_rows(&mut g, zv, &c, &own, &priors);
        for (b, id) in own_ids.iter().enumerate() {
            let expect = z2_disc_loss(&z.row(b).to_vec(), *id, &c, &priors).unwrap();
            assert!((g.value(rows)[[b, 0]] - expect).abs() < 1e-10);
        }
        fd_check(
            |g, x| {
                let r = z2_disc_rows(g, x, &c, &own, &priors);
                g.mean_all(r)
            },
            z,
        );
        assert!(z2_disc_loss(&[0.0, 0.0], 99, &c, &priors).is_err());
    }

    #[test]
    fn z2_disc_at_own_mean_is_small() {
        let priors = PriorConfig::default();
        let far = vec![
            Array2::from_elem((4, 2), 3.0),
            Array2::from_elem((4, 2), -3.0),
        ];
        let c = SequenceCache::from_encoder_means(vec![0, 1], &far, &priors).unwrap();
        let own = c.mu2_of(0).unwrap();
        assert!(z2_disc_loss(&own, 0, &c, &priors).unwrap() < 1e-6);
        assert!(z2_disc_loss(&own, 1, &c, &priors).unwrap() > 10.0);
    }

    #[test]
    fn bce_tape_matches_scalar() {
        let logits = array![[-2.0], [0.0], [1.3], [40.0]];
        let targets = [1.0, 0.0, 1.0, 0.0];
        let weights = [1.0, 1.0, 0.0, 1.0];
        let mut g = Graph::new();
        let z = g.constant(logits.clone());
        let (rows, clamped) = bce_logit_rows(&mut g, z, &targets, &weights);
        assert_eq!(clamped, 1);
        for b in 0..4 {
            let p = crate::autodiff::sigmoid(logits[[b, 0]]);
            let label = DomainLabel::from_index(targets[b] as usize).unwrap();
            let expect = weights[b] * disc_loss(p, label);
            assert!((g.value(rows)[[b, 0]] - expect).abs() < 1e-6, "row {b}");
        }
        fd_check(
            |g, x| {
                let (r, _) = bce_logit_rows(g, x, &targets[..3], &weights[..3]);
                g.sum_all(r)
            },
            array![[-2.0], [0.0], [1.3]],
        );
    }

    #[test]
    fn reference_and_kl_tape_match_scalar() {
        let m_now = sample_matrix(3, 2, 7);
        let lv_now = sample_matrix(3, 2, 8);
        let m_fro = sample_matrix(3, 2, 9);
        let lv_fro = sample_matrix(3, 2, 10);
        let labels = [DomainLabel::Control, DomainLabel::Dysarthric, DomainLabel::Control];
        for dir in [KlDirection::ReferenceFirst, KlDirection::CurrentFirst] {
            let mut g = Graph::new();
            let now = GaussVars {
                mean: g.constant(m_now.clone()),
                logvar: g.constant(lv_now.clone()),
            };
            let fro = GaussVars {
                mean: g.constant(m_fro.clone()),
                logvar: g.constant(lv_fro.clone()),
            };
            let rows = reference_rows(&mut g, now, fro, &labels, dir);
            for b in 0..3 {
                let qn = GaussianPosterior::new(m_now.row(b).to_vec(), lv_now.row(b).to_vec()).unwrap();
                let qf = GaussianPosterior::new(m_fro.row(b).to_vec(), lv_fro.row(b).to_vec()).unwrap();
                let expect = reference_loss(&qn, &qf, labels[b], dir).unwrap();
                assert!((g.value(rows)[[b, 0]] - expect).abs() < 1e-10);
            }
        }
        fd_check(
            |g, x| {
                let lv = g.constant(lv_now.clone());
                let fro = GaussVars {
                    mean: g.constant(m_fro.clone()),
                    logvar: g.constant(lv_fro.clone()),
                };
                let r = reference_rows(g, GaussVars { mean: x, logvar: lv }, fro, &labels, KlDirection::ReferenceFirst);
                g.sum_all(r)
            },
            m_now.clone(),
        );
    }

    #[test]
    fn disentangle_tape_matches_scalar_and_gradients() {
        let a = sample_matrix(6, 3, 21);
        let b = sample_matrix(6, 2, 22);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = disentangle_graph(&mut g, av, bv);
        assert!((g.scalar_value(l) - disentangle_loss(&a, &b).unwrap()).abs() < 1e-10);
        fd_check(
            |g, x| {
                let bv = g.constant(b.clone());
                disentangle_graph(g, x, bv)
            },
            a.clone(),
        );
        // A constant column stays finite on the tape too.
        let mut c = a.clone();
        c.column_mut(1).fill(2.0);
        let mut g = Graph::new();
        let cv = g.param(c.clone());
        let bv = g.constant(b.clone());
        let l = disentangle_graph(&mut g, cv, bv);
        g.backward(l);
        assert!((g.scalar_value(l) - disentangle_loss(&c, &b).unwrap()).abs() < 1e-10);
        assert!(g.grad(cv).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lower_bound_tape_matches_scalar() {
        use crate::model::ModelConfig;
        let cfg = ModelConfig {
            feat_dim: 3,
            seg_len: 4,
            hidden: 5,
            layers: 1,
            z1_dim: 2,
            z2_dim: 2,
            disc_hidden: 3,
            ..ModelConfig::default()
        };
        let model = Fhvae::new(cfg.clone(), 3).unwrap();
        let priors = PriorConfig::default();
        let segs: Vec<SegmentRecord> = (0..2)
            .map(|k| SegmentRecord {
                x: sample_matrix(4, 3, 30 + k).mapv(|v| v as f32),
                sequence_id: k as usize,
                domain_label: DomainLabel::Control,
                frame_offset: 0,
            })
            .collect();
        let refs: Vec<&SegmentRecord> = segs.iter().collect();
        let n2 = sample_matrix(2, 2, 40);
        let n1 = sample_matrix(2, 2, 41);
        let mu2 = sample_matrix(2, 2, 42);
        let counts = vec![3, 8];

        let batch = crate::model::SegmentBatch::from_records(&refs).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let frames = batch.place(&mut g);
        let q2 = model.encode_z2_graph(&mut g, &p, &frames);
        let z2 = q2.sample(&mut g, n2.clone());
        let q1 = model.encode_z1_graph(&mut g, &p, &frames, z2);
        let z1 = q1.sample(&mut g, n1.clone());
        let recon = model.decode_graph(&mut g, &p, z1, z2);
        let rows = lower_bound_rows(
            &mut g,
            LowerBoundInputs {
                frames: &frames,
                recon: &recon,
                q_z1: q1,
                q_z2: q2,
                mu2: mu2.clone(),
                counts: counts.clone(),
            },
            &priors,
        );
        for b in 0..2 {
            let qz2 = model.encode_z2(&segs[b]).unwrap();
            let z2s = crate::model::reparam_sample(&qz2, &n2.row(b).to_vec()).unwrap();
            let qz1 = model.encode_z1(&segs[b], &z2s).unwrap();
            let z1s = crate::model::reparam_sample(&qz1, &n1.row(b).to_vec()).unwrap();
            let expect = lower_bound_loss(
                &model,
                &segs[b],
                &qz1,
                &qz2,
                &z1s,
                &z2s,
                &mu2.row(b).to_vec(),
                &priors,
                counts[b],
            )
            .unwrap();
            assert!((g.value(rows)[[b, 0]] - expect).abs() < 1e-9, "row {b}");
        }
    }

    #[test]
    fn lower_bound_hand_value() {
        // Perfect unit-variance reconstruction with prior-matching posteriors.
        let priors = PriorConfig::default();
        let x = vec![0.0; 2];
        let recon = GaussianPosterior::standard(2);
        let q1 = GaussianPosterior::standard(1);
        let q2 = GaussianPosterior::new(vec![0.0], vec![priors.var_z2.ln()]).unwrap();
        let l = lower_bound_from_recon(&x, &recon, &q1, &q2, &[0.0], &priors, 4).unwrap();
        let expect = (2.0 * PI).ln() + 0.5 * (2.0 * PI).ln() / 4.0;
        assert!((l - expect).abs() < 1e-12);
        assert!(lower_bound_from_recon(&x, &recon, &q1, &q2, &[0.0], &priors, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_is_non_negative(m in prop::collection::vec(-5.0..5.0f64, 3),
                                  lv in prop::collection::vec(-4.0..4.0f64, 3),
                                  pm in prop::collection::vec(-5.0..5.0f64, 3),
                                  pv in prop::collection::vec(0.05..5.0f64, 3)) {
                let q = GaussianPosterior::new(m, lv).unwrap();
                prop_assert!(kl_diag_gauss(&q, &pm, &pv).unwrap() >= -1e-12);
            }

            #[test]
            fn cross_entropies_are_finite_and_non_negative(p in 0.0..=1.0f64, l in 0usize..2) {
                let label = DomainLabel::from_index(l).unwrap();
                let d = disc_loss(p, label);
                prop_assert!(d.is_finite() && d >= 0.0);
                for mode in [GenMode::Both, GenMode::DysOnly] {
                    let gl = gen_loss(p, label, mode);
                    prop_assert!(gl.is_finite() && gl >= 0.0);
                }
            }

            #[test]
            fn disentangle_is_bounded(seed in 0u64..1000, rows in 3usize..12) {
                let a = sample_matrix(rows, 3, seed);
                let b = sample_matrix(rows, 2, seed + 5000);
                let l = disentangle_loss(&a, &b).unwrap();
                prop_assert!((-1e-12..=6.0 + 1e-9).contains(&l));
            }

            #[test]
            fn z2_disc_is_non_negative(seed in 0u64..1000, own in 0usize..3) {
                let priors = PriorConfig::default();
                let c = cache(&priors);
                let z = sample_matrix(1, 2, seed);
                let l = z2_disc_loss(&z.row(0).to_vec(), c.seq_ids[own], &c, &priors).unwrap();
                prop_assert!(l >= 0.0);
            }
        }
    }
}

//! Downstream classifiers: the utterance-level probe and the recurrent
//! multi-label intent model, plus micro-F1.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, LstmCell, ParamStore};
use crate::optim::Adam;
use crate::rng::{stream, Purpose};

/// Per-dimension standardization fitted on training rows.
#[derive(Clone, Debug)]
struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    fn fit(rows: &Array2<f64>) -> Self {
        let mean = rows.mean_axis(Axis(0)).expect("rows");
        let scale = rows
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-9 { s } else { 1.0 });
        Self { mean, scale }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }
}

fn check_rows(x: &Array2<f64>, n: usize, what: &str) -> Result<()> {
    if x.nrows() != n {
        return Err(Error::Contract(format!("{what}: {} rows for {n} labels", x.nrows())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} features")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            batch_size: 128,
            epochs: 60,
            lr: 1e-3,
        }
    }
}

/// `input → hidden (ReLU) → classes (softmax)`.
#[derive(Clone, Debug)]
pub struct Probe {
    params: ParamStore,
    l1: Linear,
    l2: Linear,
    norm: Standardizer,
    pub n_classes: usize,
}

impl Probe {
    fn logits(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.l1.forward(g, p, x);
        let h = g.relu(h);
        self.l2.forward(g, p, h)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(self.norm.apply(x));
        let z = self.logits(&mut g, &p, xv);
        g.value(z)
            .outer_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Array2<f64>, y: &[usize]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let hits = self.predict(x).iter().zip(y).filter(|(a, b)| a == b).count();
        hits as f64 / y.len() as f64
    }
}

/// Train with softmax cross-entropy. With `val`, the epoch with the best
/// validation accuracy is kept.
pub fn train_probe(
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
    val: Option<(&Array2<f64>, &[usize])>,
    seed: u64,
) -> Result<Probe> {
    check_rows(x, y.len(), "probe")?;
    let classes: BTreeSet<usize> = y.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Contract("probe training data has fewer than two classes".into()));
    }
    if classes.iter().any(|&c| c >= n_classes) {
        return Err(Error::Contract(format!("probe label outside 0..{n_classes}")));
    }
    let mut rng = stream(seed, Purpose::Probe, 0);
    let mut params = ParamStore::new();
    let l1 = Linear::new(&mut params, "probe.l1", x.ncols(), cfg.hidden, &mut rng);
    let l2 = Linear::new(&mut params, "probe.l2", cfg.hidden, n_classes, &mut rng);
    let mut probe = Probe {
        params,
        l1,
        l2,
        norm: Standardizer::fit(x),
        n_classes,
    };
    let xs = probe.norm.apply(x);
    let mut opt = Adam::new(cfg.lr, &probe.params);
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = Array2::from_shape_fn((chunk.len(), xs.ncols()), |(r, c)| xs[[chunk[r], c]]);
            let onehot = Array2::from_shape_fn((chunk.len(), n_classes), |(r, c)| f64::from(y[chunk[r]] == c));
            let mut g = Graph::new();
            let p = probe.params.bind(&mut g, true);
            let xv = g.constant(xb);
            let z = probe.logits(&mut g, &p, xv);
            let lp = g.log_softmax_rows(z);
            let t = g.constant(onehot);
            let picked = g.mul(lp, t);
            let s = g.sum_all(picked);
            let loss = g.scale(s, -1.0 / chunk.len() as f64);
            g.backward(loss);
            let grads = p.grads(&g);
            opt.update(&mut probe.params, &grads);
        }
        if let Some((vx, vy)) = val {
            let acc = probe.accuracy(vx, vy);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, probe.params.clone()));
            }
        }
    }
    if let Some((_, p)) = best {
        probe.params = p;
    }
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntentConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// A label is detected when its probability exceeds this.
    pub threshold: f64,
    /// Longer inputs are averaged down to this many steps.
    pub max_steps: usize,
}

impl Default for IntentConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            batch_size: 16,
            epochs: 40,
            lr: 3e-3,
            threshold: 0.5,
            max_steps: 32,
        }
    }
}

/// Average contiguous runs so that at most `max_steps` rows remain.
pub fn compress_steps(seq: &Array2<f64>, max_steps: usize) -> Array2<f64> {
    let n = seq.nrows();
    if n <= max_steps || max_steps == 0 {
        return seq.clone();
    }
    let mut out = Array2::zeros((max_steps, seq.ncols()));
    for k in 0..max_steps {
        let (a, b) = (k * n / max_steps, (k + 1) * n / max_steps);
        out.row_mut(k)
            .assign(&seq.slice(ndarray::s![a..b, ..]).mean_axis(Axis(0)).expect("non-empty run"));
    }
    out
}

const LOGIT_CAP: f64 = 30.0;

/// Unidirectional LSTM over a feature sequence with one logistic output per
/// label. Per-step label logits are pooled by log-mean-exp, so a label fires
/// when any stretch of the sequence supports it.
#[derive(Clone, Debug)]
pub struct IntentModel {
    params: ParamStore,
    cell: LstmCell,
    out: Linear,
    norm: Standardizer,
    cfg: IntentConfig,
    pub n_labels: usize,
}

impl IntentModel {
    fn logits(&self, g: &mut Graph, p: &Bound, steps: &[Var]) -> Var {
        let (hs, _) = self.cell.run(g, p, steps, false);
        // Smooth maximum over time of per-step label logits.
        let mut acc: Option<Var> = None;
        for &h in &hs {
            let z = self.out.forward(g, p, h);
            let z = g.clamp(z, -LOGIT_CAP, LOGIT_CAP);
            let e = g.exp(z);
            acc = Some(match acc {
                Some(a) => g.add(a, e),
                None => e,
            });
        }
        let mean = g.scale(acc.expect("at least one step"), 1.0 / hs.len() as f64);
        g.log(mean)
    }

    /// Place equal-length sequences on the tape step by step.
    fn place(&self, g: &mut Graph, seqs: &[&Array2<f64>]) -> Vec<Var> {
        let t = seqs[0].nrows();
        (0..t)
            .map(|s| {
                let rows = Array2::from_shape_fn((seqs.len(), seqs[0].ncols()), |(b, c)| seqs[b][[s, c]]);
                g.constant(self.norm.apply(&rows))
            })
            .collect()
    }

    pub fn predict_proba(&self, seqs: &[Array2<f64>]) -> Vec<Vec<f64>> {
        let prepared: Vec<Array2<f64>> = seqs.iter().map(|s| compress_steps(s, self.cfg.max_steps)).collect();
        let mut out = vec![Vec::new(); seqs.len()];
        for bucket in length_buckets(&prepared, usize::MAX) {
            let refs: Vec<&Array2<f64>> = bucket.iter().map(|&i| &prepared[i]).collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let steps = self.place(&mut g, &refs);
            let z = self.logits(&mut g, &p, &steps);
            for (r, &i) in bucket.iter().enumerate() {
                out[i] = g.value(z).row(r).iter().map(|&v| sigmoid(v)).collect();
            }
        }
        out
    }

    pub fn predict(&self, seqs: &[Array2<f64>]) -> Vec<BTreeSet<usize>> {
        self.predict_proba(seqs)
            .into_iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .filter(|(_, &v)| v > self.cfg.threshold)
                    .map(|(k, _)| k)
                    .collect()
            })
            .collect()
    }
}

/// Group indices by sequence length, each group cut into chunks of `size`.
fn length_buckets(seqs: &[Array2<f64>], size: usize) -> Vec<Vec<usize>> {
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in seqs.iter().enumerate() {
        by_len.entry(s.nrows()).or_default().push(i);
    }
    by_len
        .into_values()
        .flat_map(|v| v.chunks(size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

pub fn train_intent_model(
    seqs: &[Array2<f64>],
    labels: &[BTreeSet<usize>],
    n_labels: usize,
    cfg: &IntentConfig,
    seed: u64,
) -> Result<IntentModel> {
    if n_labels == 0 {
        return Err(Error::Contract("intent label universe is empty".into()));
    }
    if seqs.len() != labels.len() || seqs.is_empty() {
        return Err(Error::Contract(format!(
            "intent training needs one label set per sequence ({} vs {})",
            seqs.len(),
            labels.len()
        )));
    }
    if labels.iter().flatten().any(|&l| l >= n_labels) {
        return Err(Error::Contract(format!("intent label outside 0..{n_labels}")));
    }
    let dim = seqs[0].ncols();
    if seqs.iter().any(|s| s.ncols() != dim || s.nrows() == 0) {
        return Err(Error::Contract("intent sequences differ in width or are empty".into()));
    }
    let prepared: Vec<Array2<f64>> = seqs.iter().map(|s| compress_steps(s, cfg.max_steps)).collect();
    let views: Vec<_> = prepared.iter().map(|s| s.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let mut rng = stream(seed, Purpose::Intent, 0);
    let mut params = ParamStore::new();
    let cell = LstmCell::new(&mut params, "intent.lstm", dim, cfg.hidden, &mut rng);
    let out = Linear::new(&mut params, "intent.out", cfg.hidden, n_labels, &mut rng);
    let mut model = IntentModel {
        params,
        cell,
        out,
        norm: Standardizer::fit(&stacked),
        cfg: cfg.clone(),
        n_labels,
    };
    let mut opt = Adam::new(cfg.lr, &model.params);
    let mut buckets = length_buckets(&prepared, cfg.batch_size.max(1));
    for _ in 0..cfg.epochs {
        for b in &mut buckets {
            b.shuffle(&mut rng);
        }
        buckets.shuffle(&mut rng);
        for bucket in &buckets {
            let refs: Vec<&Array2<f64>> = bucket.iter().map(|&i| &prepared[i]).collect();
            let targets = Array2::from_shape_fn((bucket.len(), n_labels), |(r, k)| f64::from(labels[bucket[r]].contains(&k)));
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let steps = model.place(&mut g, &refs);
            let z = model.logits(&mut g, &p, &steps);
            let sp = g.softplus(z);
            let t = g.constant(targets);
            let tz = g.mul(t, z);
            let l = g.sub(sp, tz);
            let s = g.sum_all(l);
            let loss = g.scale(s, 1.0 / bucket.len() as f64);
            g.backward(loss);
            let grads = p.grads(&g);
            opt.update(&mut model.params, &grads);
        }
    }
    Ok(model)
}

/// Micro-averaged F1 over all utterances and labels: `2TP / (2TP + FP + FN)`.
/// When nothing is predicted and nothing is true the score is 1.
pub fn micro_f1(pred: &[BTreeSet<usize>], truth: &[BTreeSet<usize>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "micro-F1 needs aligned lists ({} predictions, {} references)",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        tp += p.intersection(t).count();
        fp += p.difference(t).count();
        fn_ += t.difference(p).count();
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn micro_f1_examples() {
        let truth = [set(&[3]), set(&[5, 7])];
        assert!((micro_f1(&[set(&[3]), set(&[5])], &truth).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(micro_f1(&truth, &truth).unwrap(), 1.0);
        assert_eq!(micro_f1(&[set(&[1]), set(&[2])], &truth).unwrap(), 0.0);
        assert_eq!(micro_f1(&[set(&[]), set(&[])], &truth).unwrap(), 0.0);
        assert!(micro_f1(&[set(&[3])], &truth).is_err());
    }

    fn blobs(n: usize, shift: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = stream(seed, Purpose::Synth, 1);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 5), |(i, j)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e + if j == 0 { shift * y[i] as f64 } else { 0.0 }
        });
        (x, y)
    }

    #[test]
    fn probe_separable_and_null() {
        let (x, y) = blobs(200, 6.0, 1);
        let (tx, ty) = blobs(200, 6.0, 2);
        let p = train_probe(&x, &y, 2, &ProbeConfig::default(), None, 0).unwrap();
        assert!(p.accuracy(&tx, &ty) >= 0.95);

        let mut rng = stream(3, Purpose::Synth, 2);
        let mut shuffled = ty.clone();
        shuffled.shuffle(&mut rng);
        let p = train_probe(&tx, &shuffled, 2, &ProbeConfig::default(), None, 0).unwrap();
        let (x3, _) = blobs(400, 6.0, 4);
        let y3: Vec<usize> = (0..400).map(|_| rng.random_range(0..2)).collect();
        assert!((p.accuracy(&x3, &y3) - 0.5).abs() <= 0.1);

        let flat = Array2::from_elem((50, 3), 1.0);
        let y_flat: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let p = train_probe(&flat, &y_flat, 2, &ProbeConfig::default(), None, 0).unwrap();
        assert!((p.accuracy(&flat, &y_flat) - 0.5).abs() <= 0.1);

        assert!(train_probe(&x, &vec![0; 200], 2, &ProbeConfig::default(), None, 0).is_err());
    }

    #[test]
    fn intent_learns_separable_single_labels() {
        let mut rng = stream(5, Purpose::Synth, 3);
        let make = |rng: &mut crate::rng::Rng, n: usize| {
            let mut seqs = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let l = i % 3;
                seqs.push(Array2::from_shape_fn((12, 4), |(_, j)| {
                    let e: f64 = StandardNormal.sample(&mut *rng);
                    0.5 * e + if j == l { 2.0 } else { 0.0 }
                }));
                labels.push(set(&[l]));
            }
            (seqs, labels)
        };
        let (xs, ys) = make(&mut rng, 90);
        let (tx, ty) = make(&mut rng, 60);
        let m = train_intent_model(&xs, &ys, 3, &IntentConfig::default(), 0).unwrap();
        assert!(micro_f1(&m.predict(&tx), &ty).unwrap() >= 0.9);
        assert!(train_intent_model(&xs, &ys, 0, &IntentConfig::default(), 0).is_err());
    }

    #[test]
    fn compression_averages_runs() {
        let s = Array2::from_shape_fn((6, 1), |(i, _)| i as f64);
        let c = compress_steps(&s, 3);
        assert_eq!(c.column(0).to_vec(), vec![0.5, 2.5, 4.5]);
        assert_eq!(compress_steps(&s, 10), s);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn micro_f1_is_permutation_invariant(
                pairs in prop::collection::vec((prop::collection::btree_set(0usize..6, 0..4),
                                                prop::collection::btree_set(0usize..6, 0..4)), 1..12),
                seed in 0u64..100,
                relabel in Just((0usize..6).rev().collect::<Vec<_>>()),
            ) {
                let pred: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
                let truth: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
                let base = micro_f1(&pred, &truth).unwrap();
                prop_assert!((0.0..=1.0).contains(&base));
                let mut idx: Vec<usize> = (0..pairs.len()).collect();
                idx.shuffle(&mut stream(seed, Purpose::Synth, 4));
                let p2: Vec<_> = idx.iter().map(|&i| pred[i].clone()).collect();
                let t2: Vec<_> = idx.iter().map(|&i| truth[i].clone()).collect();
                prop_assert_eq!(micro_f1(&p2, &t2).unwrap(), base);
                let map = |s: &BTreeSet<usize>| s.iter().map(|&l| relabel[l]).collect::<BTreeSet<_>>();
                let p3: Vec<_> = pred.iter().map(map).collect();
                let t3: Vec<_> = truth.iter().map(map).collect();
                prop_assert_eq!(micro_f1(&p3, &t3).unwrap(), base);
            }
        }
    }
}

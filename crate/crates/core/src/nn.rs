//! Parameter storage and the layers the networks are built from.

use std::hash::{Hash, Hasher};

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Hash over the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, v) in self.iter() {
            name.hash(&mut h);
            v.dim().hash(&mut h);
            for x in v.iter() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Place every parameter on the tape. With `trainable = false` the leaves
    /// are constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&mut Array2<f64>)) {
        self.values.iter_mut().for_each(&mut f);
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters the loss does not reach get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Array2<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(g.shape(v)))
            })
            .collect()
    }
}

fn uniform(rng: &mut Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

/// Affine map `x W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut Rng) -> Self {
        let k = 1.0 / (inp as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, (inp, out), k));
        let b = store.add(format!("{name}.b"), uniform(rng, (1, out), k));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let xw = g.matmul(x, p.var(self.w));
        g.add(xw, p.var(self.b))
    }
}

/// LSTM cell with fused gate weights `[x, h] W + b`, gate order i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, rng: &mut Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, (inp + hidden, 4 * hidden), k));
        let b = store.add(format!("{name}.b"), uniform(rng, (1, 4 * hidden), k));
        Self { w, b, hidden }
    }

    /// Run over `inputs` (each `B×in`), in reverse order when `reverse`.
    /// Returns per-step hidden states in input order and the final state.
    pub fn run(&self, g: &mut Graph, p: &Bound, inputs: &[Var], reverse: bool) -> (Vec<Var>, Var) {
        let batch = g.shape(inputs[0]).0;
        let h_dim = self.hidden;
        let mut h = g.constant(Array2::zeros((batch, h_dim)));
        let mut c = g.constant(Array2::zeros((batch, h_dim)));
        let mut out = vec![h; inputs.len()];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..inputs.len()).rev())
        } else {
            Box::new(0..inputs.len())
        };
        let (w, b) = (p.var(self.w), p.var(self.b));
        for t in order {
            let xh = g.concat_cols(&[inputs[t], h]);
            let pre = g.matmul(xh, w);
            let pre = g.add(pre, b);
            let i = g.slice_cols(pre, 0, h_dim);
            let f = g.slice_cols(pre, h_dim, 2 * h_dim);
            let cand = g.slice_cols(pre, 2 * h_dim, 3 * h_dim);
            let o = g.slice_cols(pre, 3 * h_dim, 4 * h_dim);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cand = g.tanh(cand);
            let o = g.sigmoid(o);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            out[t] = h;
        }
        (out, h)
    }
}

/// Stack of (optionally bidirectional) LSTM layers.
#[derive(Clone, Debug)]
pub struct RecurrentStack {
    layers: Vec<(LstmCell, Option<LstmCell>)>,
}

pub struct StackOutput {
    /// Top-layer output per step (`B×H`, or `B×2H` when bidirectional).
    pub steps: Vec<Var>,
    /// Final states of the top layer, both directions concatenated.
    pub summary: Var,
}

impl RecurrentStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        hidden: usize,
        layers: usize,
        bidirectional: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut out = Vec::with_capacity(layers);
        let mut width = inp;
        for l in 0..layers {
            let fwd = LstmCell::new(store, &format!("{name}.l{l}.fwd"), width, hidden, rng);
            let bwd = bidirectional
                .then(|| LstmCell::new(store, &format!("{name}.l{l}.bwd"), width, hidden, rng));
            out.push((fwd, bwd));
            width = if bidirectional { 2 * hidden } else { hidden };
        }
        Self { layers: out }
    }

    pub fn output_width(&self) -> usize {
        let (fwd, bwd) = &self.layers[self.layers.len() - 1];
        fwd.hidden * if bwd.is_some() { 2 } else { 1 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: &[Var]) -> StackOutput {
        let mut xs = inputs.to_vec();
        let mut summary = None;
        for (fwd, bwd) in &self.layers {
            let (hf, last_f) = fwd.run(g, p, &xs, false);
            match bwd {
                Some(bwd) => {
                    let (hb, last_b) = bwd.run(g, p, &xs, true);
                    xs = hf
                        .iter()
                        .zip(&hb)
                        .map(|(&a, &b)| g.concat_cols(&[a, b]))
                        .collect();
                    summary = Some((last_f, Some(last_b)));
                }
                None => {
                    xs = hf;
                    summary = Some((last_f, None));
                }
            }
        }
        let summary = match summary.expect("stack has at least one layer") {
            (f, Some(b)) => g.concat_cols(&[f, b]),
            (f, None) => f,
        };
        StackOutput { steps: xs, summary }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn lstm_stack_shapes() {
        let mut rng = stream(0, Purpose::ModelInit, 0);
        let mut store = ParamStore::new();
        let stack = RecurrentStack::new(&mut store, "enc", 3, 4, 2, true, &mut rng);
        assert_eq!(store.len(), 8);
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let xs: Vec<Var> = (0..5).map(|_| g.constant(Array2::ones((2, 3)))).collect();
        let out = stack.forward(&mut g, &p, &xs);
        assert_eq!(out.steps.len(), 5);
        assert_eq!(g.shape(out.steps[0]), (2, 8));
        assert_eq!(g.shape(out.summary), (2, 8));
        assert_eq!(stack.output_width(), 8);
    }

    #[test]
    fn fingerprint_tracks_bits() {
        let mut store = ParamStore::new();
        let id = store.add("a", Array2::zeros((2, 2)));
        let before = store.fingerprint();
        store.get_mut(id)[[0, 0]] = -0.0;
        assert_ne!(before, store.fingerprint());
    }
}

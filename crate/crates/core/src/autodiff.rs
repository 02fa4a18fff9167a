//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the operation that produced it. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that depends on a leaf
//! created with `requires_grad = true`. Values are always 2-D; vectors are
//! `1×n` or `n×1` and scalars are `1×1`.
//!
//! Elementwise binary operations broadcast `1×m`, `n×1` and `1×1` operands
//! against an `n×m` operand; the backward pass sums the gradient back down to
//! the operand's shape.

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    LogSoftmaxRows(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn check_broadcast(&self, a: Var, b: Var, what: &str) {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let ok_r = ar == br || ar == 1 || br == 1;
        let ok_c = ac == bc || ac == 1 || bc == 1;
        assert!(
            ok_r && ok_c,
            "{what}: incompatible shapes {ar}x{ac} and {br}x{bc}"
        );
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, ak) = self.shape(a);
        let (bk, _) = self.shape(b);
        assert_eq!(ak, bk, "matmul: inner dimensions differ");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b, "add");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b, "sub");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b, "mul");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b, "div");
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.nrows(), rows, "concat_cols: row counts differ");
            value.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: `n×m -> 1×m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over columns: `n×m -> n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    fn accumulate(&mut self, v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let target = self.nodes[v.0].value.dim();
        let g = reduce_to(g, target);
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagate from a `1×1` node. Gradients from earlier calls are
    /// discarded.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be 1x1");
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return;
        }
        self.grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn propagate(&mut self, i: usize, g: &Array2<f64>) {
        // Split borrows: read inputs' values while accumulating into grads.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = self.nodes[a.0].value.t().dot(g);
                    self.accumulate(*b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g * &self.nodes[b.0].value;
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = g * &self.nodes[a.0].value;
                    self.accumulate(*b, gb);
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let ga = g / &self.nodes[b.0].value;
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = -(g * &self.nodes[i].value) / &self.nodes[b.0].value;
                    self.accumulate(*b, gb);
                }
            }
            Op::Scale(a, k) => self.accumulate(*a, g * *k),
            Op::AddScalar(a) => self.accumulate(*a, g.clone()),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let ga = elementwise(g, y, |g, y| g * y * (1.0 - y));
                self.accumulate(*a, ga);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let ga = elementwise(g, y, |g, y| g * (1.0 - y * y));
                self.accumulate(*a, ga);
            }
            Op::Exp(a) => {
                let ga = g * &self.nodes[i].value;
                self.accumulate(*a, ga);
            }
            Op::Log(a) => {
                let ga = g / &self.nodes[a.0].value;
                self.accumulate(*a, ga);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let ga = elementwise(g, y, |g, y| 0.5 * g / y);
                self.accumulate(*a, ga);
            }
            Op::Square(a) => {
                let x = &self.nodes[a.0].value;
                let ga = elementwise(g, x, |g, x| 2.0 * g * x);
                self.accumulate(*a, ga);
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                let ga = elementwise(g, x, |g, x| g * sigmoid(x));
                self.accumulate(*a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.nodes[a.0].value;
                let slope = *slope;
                let ga = elementwise(g, x, |g, x| if x > 0.0 { g } else { slope * g });
                self.accumulate(*a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value;
                let (lo, hi) = (*lo, *hi);
                let ga = elementwise(g, x, |g, x| if x >= lo && x <= hi { g } else { 0.0 });
                self.accumulate(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        let gp = g.slice(s![.., at..at + w]).to_owned();
                        self.accumulate(p, gp);
                    }
                    at += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.accumulate(*a, ga);
                }
            }
            Op::Transpose(a) => self.accumulate(*a, g.t().to_owned()),
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(*a, ga);
            }
            Op::SumRows(a) => {
                let ga = g.broadcast(self.shape(*a)).expect("sum_rows grad").to_owned();
                self.accumulate(*a, ga);
            }
            Op::SumCols(a) => {
                let ga = g.broadcast(self.shape(*a)).expect("sum_cols grad").to_owned();
                self.accumulate(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(y)
                    .and_broadcast(&gsum)
                    .for_each(|ga, &y, &gs| *ga -= y.exp() * gs);
                self.accumulate(*a, ga);
            }
        }
        self.nodes[i].op = op;
    }
}

fn elementwise(g: &Array2<f64>, x: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let mut out = g.clone();
    Zip::from(&mut out).and(x).for_each(|o, &x| *o = f(*o, x));
    out
}

/// Sum a broadcast gradient back down to `target` shape.
fn reduce_to(g: Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if g.nrows() != target.0 {
        debug_assert_eq!(target.0, 1);
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if g.ncols() != target.1 {
        debug_assert_eq!(target.1, 1);
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

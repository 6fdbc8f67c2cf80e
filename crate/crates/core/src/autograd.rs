//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles during
//! a forward pass. [`Graph::backward`] then walks the tape in reverse and
//! accumulates gradients for every node that depends on a parameter leaf.
//!
//! Every value is a rank-2 matrix (`rows × cols`); scalars are `1 × 1`.
//! Shape errors inside the graph are programming errors and panic, the way
//! indexing does. Model code validates user-facing shapes before building a
//! graph.
//!
//! ```
//! use gridhealth::autograd::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
//! let y = g.sum(g.mul(x, x));
//! g.backward(y);
//! assert_eq!(g.grad(x).unwrap().values, vec![2.0, 4.0]);
//! ```

use std::cell::{Ref, RefCell};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutogradError {
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),
    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// Dense row-major tensor. Rank 0, 1 and 2 are supported; rank-1 tensors
/// behave as a single row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            expected,
            values.len(),
            "tensor of shape {shape:?} needs {expected} values"
        );
        assert!(shape.len() <= 2, "only rank <= 2 tensors are supported");
        Self {
            shape,
            values,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::matrix(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::matrix(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[n - 1],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct AttentionShape {
    batch: usize,
    q_len: usize,
    k_len: usize,
    heads: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    TileRows(Var, usize),
    Reshape(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on shape {:?}", t.shape);
        t.values[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = {
            let t = self.value(a);
            Tensor::matrix(t.rows(), t.cols(), t.values.iter().map(|&x| f(x)).collect())
        };
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    fn zip(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(
            (ta.rows(), ta.cols()),
            (tb.rows(), tb.cols()),
            "{name}: shape mismatch"
        );
        Tensor::matrix(
            ta.rows(),
            ta.cols(),
            ta.values
                .iter()
                .zip(&tb.values)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "add", |x, y| x + y);
        let needs = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "sub", |x, y| x - y);
        let needs = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), needs)
    }

    /// Element-wise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, "mul", |x, y| x * y);
        let needs = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), needs)
    }

    fn broadcast_row(&self, a: Var, row: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tr = self.value(row);
        assert_eq!(tr.len(), ta.cols(), "{name}: row width mismatch");
        let c = ta.cols();
        let values = ta
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tr.values[i % c]))
            .collect();
        Tensor::matrix(ta.rows(), c, values)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = self.broadcast_row(a, row, "add_row", |x, y| x + y);
        let needs = self.needs(&[a, row]);
        self.push(value, Op::AddRow(a, row), needs)
    }

    /// Multiplies every row of `a` element-wise by a `1 × cols` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = self.broadcast_row(a, row, "mul_row", |x, y| x * y);
        let needs = self.needs(&[a, row]);
        self.push(value, Op::MulRow(a, row), needs)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let ta = self.value(a);
            let tb = self.value(b);
            assert_eq!(ta.cols(), tb.rows(), "matmul: inner dimension mismatch");
            Tensor::matrix(
                ta.rows(),
                tb.cols(),
                matmul(&ta.values, &tb.values, ta.rows(), ta.cols(), tb.cols()),
            )
        };
        let needs = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu(x).0)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Normalized exponential applied independently to every row.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let t = self.value(a);
            let c = t.cols();
            let mut out = t.values.clone();
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
            Tensor::matrix(t.rows(), c, out)
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::SoftmaxRows(a), needs)
    }

    /// Row-wise layer normalization with learnable `1 × cols` gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let (value, xhat, inv_std) = {
            let tx = self.value(x);
            let tg = self.value(gamma);
            let tb = self.value(beta);
            let c = tx.cols();
            assert_eq!(tg.len(), c, "layer_norm: gamma width");
            assert_eq!(tb.len(), c, "layer_norm: beta width");
            let mut xhat = vec![0.0; tx.len()];
            let mut inv_std = vec![0.0; tx.rows()];
            let mut out = vec![0.0; tx.len()];
            for r in 0..tx.rows() {
                let row = tx.row(r);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * tg.values[j] + tb.values[j];
                }
            }
            (Tensor::matrix(tx.rows(), c, out), xhat, inv_std)
        };
        let needs = self.needs(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `(batch·q_len) × d`, `k` and `v` are `(batch·k_len) × d`, rows
    /// grouped by batch element. The model dimension `d` is split evenly
    /// across `heads`. Output has the shape of `q`.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        heads: usize,
    ) -> Var {
        let shape = AttentionShape {
            batch,
            q_len,
            k_len,
            heads,
        };
        let (value, probs) = {
            let tq = self.value(q);
            let tk = self.value(k);
            let tv = self.value(v);
            let d = tq.cols();
            assert_eq!(tq.rows(), batch * q_len, "attention: query rows");
            assert_eq!(tk.rows(), batch * k_len, "attention: key rows");
            assert_eq!(tv.rows(), batch * k_len, "attention: value rows");
            assert!(tk.cols() == d && tv.cols() == d, "attention: widths");
            assert!(heads > 0 && d % heads == 0, "attention: heads must divide width");
            attention_forward(&tq.values, &tk.values, &tv.values, d, shape)
        };
        let needs = self.needs(&[q, k, v]);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            needs,
        )
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&self, a: Var, times: usize) -> Var {
        let value = {
            let t = self.value(a);
            let mut out = Vec::with_capacity(t.len() * times);
            for _ in 0..times {
                out.extend_from_slice(&t.values);
            }
            Tensor::matrix(t.rows() * times, t.cols(), out)
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::TileRows(a, times), needs)
    }

    /// Reinterprets the row-major buffer with a new `rows × cols` shape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = {
            let t = self.value(a);
            assert_eq!(rows * cols, t.len(), "reshape: element count");
            Tensor::matrix(rows, cols, t.values.clone())
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::Reshape(a), needs)
    }

    /// Sum of all entries, as a `1 × 1` scalar.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).values.iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&self, a: Var) -> Var {
        self.sum(self.mul(a, a))
    }

    /// Reverse pass from a scalar output. Gradients of earlier backward calls
    /// are discarded.
    pub fn backward(&self, output: Var) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].value.len(),
            1,
            "backward() needs a scalar output"
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            backprop_node(&nodes, node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        *self.grads.borrow_mut() = grads;
    }

    /// Gradient accumulated for `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let t = self.value(v);
        Some(Tensor::matrix(t.rows(), t.cols(), g.clone()))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], target: Var, delta: Vec<f64>) {
    if !nodes[target.0].needs_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, gout.to_vec());
            accumulate(grads, nodes, *b, gout.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, gout.to_vec());
            accumulate(grads, nodes, *b, gout.iter().map(|g| -g).collect());
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if wants(*a) {
                let d = gout.iter().zip(&tb.values).map(|(g, y)| g * y).collect();
                accumulate(grads, nodes, *a, d);
            }
            if wants(*b) {
                let d = gout.iter().zip(&ta.values).map(|(g, x)| g * x).collect();
                accumulate(grads, nodes, *b, d);
            }
        }
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, gout.to_vec());
            if wants(*row) {
                let c = val(*row).len();
                let mut d = vec![0.0; c];
                for (i, g) in gout.iter().enumerate() {
                    d[i % c] += g;
                }
                accumulate(grads, nodes, *row, d);
            }
        }
        Op::MulRow(a, row) => {
            let (ta, tr) = (val(*a), val(*row));
            let c = tr.len();
            if wants(*a) {
                let d = gout
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * tr.values[i % c])
                    .collect();
                accumulate(grads, nodes, *a, d);
            }
            if wants(*row) {
                let mut d = vec![0.0; c];
                for (i, g) in gout.iter().enumerate() {
                    d[i % c] += g * ta.values[i];
                }
                accumulate(grads, nodes, *row, d);
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if wants(*a) {
                // dA = dC · Bᵀ
                accumulate(grads, nodes, *a, matmul_bt(gout, &tb.values, m, n, k));
            }
            if wants(*b) {
                // dB = Aᵀ · dC
                accumulate(grads, nodes, *b, matmul_at(&ta.values, gout, m, k, n));
            }
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, gout.iter().map(|g| g * s).collect());
        }
        Op::Tanh(a) => {
            let d = gout
                .iter()
                .zip(&node.value.values)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Gelu(a) => {
            let d = gout
                .iter()
                .zip(&val(*a).values)
                .map(|(g, &x)| g * gelu(x).1)
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Softplus(a) => {
            let d = gout
                .iter()
                .zip(&val(*a).values)
                .map(|(g, &x)| g * sigmoid(x))
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut d = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = &gout[r * c..(r + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                for j in 0..c {
                    d[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let tg = val(*gamma);
            let c = tg.len();
            let rows = inv_std.len();
            if wants(*x) {
                let mut d = vec![0.0; rows * c];
                for r in 0..rows {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gout[r * c + j] * tg.values[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[r * c + j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let dh = gout[r * c + j] * tg.values[j];
                        d[r * c + j] =
                            inv_std[r] / n * (n * dh - sum_dh - xhat[r * c + j] * sum_dh_h);
                    }
                }
                accumulate(grads, nodes, *x, d);
            }
            if wants(*gamma) {
                let mut d = vec![0.0; c];
                for (i, g) in gout.iter().enumerate() {
                    d[i % c] += g * xhat[i];
                }
                accumulate(grads, nodes, *gamma, d);
            }
            if wants(*beta) {
                let mut d = vec![0.0; c];
                for (i, g) in gout.iter().enumerate() {
                    d[i % c] += g;
                }
                accumulate(grads, nodes, *beta, d);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            shape,
            probs,
        } => {
            let (tq, tk, tv) = (val(*q), val(*k), val(*v));
            let (dq, dk, dv) =
                attention_backward(&tq.values, &tk.values, &tv.values, probs, gout, tq.cols(), *shape);
            accumulate(grads, nodes, *q, dq);
            accumulate(grads, nodes, *k, dk);
            accumulate(grads, nodes, *v, dv);
        }
        Op::TileRows(a, times) => {
            let n = val(*a).len();
            let mut d = vec![0.0; n];
            for chunk in gout.chunks(n).take(*times) {
                for (acc, g) in d.iter_mut().zip(chunk) {
                    *acc += g;
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, gout.to_vec()),
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![gout[0]; n]);
        }
    }
}

/// `C = A · B` with `A: m × k`, `B: k × n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `A · Bᵀ` with `A: m × n`, `B: k × n`, result `m × k`.
fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `Aᵀ · B` with `A: m × k`, `B: m × n`, result `k × n`.
fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for (p, &arp) in a[r * k..(r + 1) * k].iter().enumerate() {
            if arp == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += arp * bv;
            }
        }
    }
    c
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    s: AttentionShape,
) -> (Tensor, Vec<f64>) {
    let dh = d / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; s.batch * s.q_len * d];
    let mut probs = vec![0.0; s.batch * s.heads * s.q_len * s.k_len];
    let mut scores = vec![0.0; s.k_len];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.q_len {
                let qrow = &q[(b * s.q_len + i) * d + off..][..dh];
                for (j, score) in scores.iter_mut().enumerate() {
                    let krow = &k[(b * s.k_len + j) * d + off..][..dh];
                    *score = scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                }
                softmax_in_place(&mut scores);
                let p_off = ((b * s.heads + h) * s.q_len + i) * s.k_len;
                probs[p_off..p_off + s.k_len].copy_from_slice(&scores);
                let orow = &mut out[(b * s.q_len + i) * d + off..][..dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vrow = &v[(b * s.k_len + j) * d + off..][..dh];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (Tensor::matrix(s.batch * s.q_len, d, out), probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    gout: &[f64],
    d: usize,
    s: AttentionShape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; s.k_len];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.q_len {
                let p_off = ((b * s.heads + h) * s.q_len + i) * s.k_len;
                let p = &probs[p_off..p_off + s.k_len];
                let g = &gout[(b * s.q_len + i) * d + off..][..dh];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let vrow = &v[(b * s.k_len + j) * d + off..][..dh];
                    *dpj = g.iter().zip(vrow).map(|(x, y)| x * y).sum();
                    let dvrow = &mut dv[(b * s.k_len + j) * d + off..][..dh];
                    for (acc, x) in dvrow.iter_mut().zip(g) {
                        *acc += p[j] * x;
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qrow = &q[(b * s.q_len + i) * d + off..][..dh];
                for j in 0..s.k_len {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &k[(b * s.k_len + j) * d + off..][..dh];
                    let dqrow = &mut dq[(b * s.q_len + i) * d + off..][..dh];
                    for (acc, x) in dqrow.iter_mut().zip(krow) {
                        *acc += ds * x;
                    }
                    let dkrow = &mut dk[(b * s.k_len + j) * d + off..][..dh];
                    for (acc, x) in dkrow.iter_mut().zip(qrow) {
                        *acc += ds * x;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Value and derivative of the tanh-approximated GELU.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

/// Compares reverse-mode gradients of `f` at `x` against central differences.
///
/// Returns the largest per-coordinate relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, AutogradError>
where
    F: Fn(&Graph, Var) -> Var,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// [`grad_check`] restricted to a subset of flat coordinates.
pub fn grad_check_coords<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<f64, AutogradError>
where
    F: Fn(&Graph, Var) -> Var,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&g, xv);
    let shape = g.value(out).shape.clone();
    if g.value(out).len() != 1 {
        return Err(AutogradError::NotScalar(shape));
    }
    let base = g.scalar(out);
    if !base.is_finite() {
        return Err(AutogradError::NonFiniteValue("function value".into()));
    }
    g.backward(out);
    let analytic = g
        .grad(xv)
        .map(|t| t.values)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64, AutogradError> {
        let g = Graph::new();
        let v = g.param(t);
        let y = g.scalar(f(&g, v));
        if y.is_finite() {
            Ok(y)
        } else {
            Err(AutogradError::NonFiniteValue("perturbed function value".into()))
        }
    };

    let mut worst = 0.0_f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.values[i] += eps;
        let mut minus = x.clone();
        minus.values[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(AutogradError::NonFiniteValue(format!("gradient[{i}]")));
        }
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! parameter or a differentiable input.
//!
//! Sequence data is stored as stacked token rows: a batch of `N` samples with
//! `L` tokens each is an `(N*L) x C` matrix where sample `n` occupies rows
//! `n*L .. (n+1)*L`. The grouped operations (`group_mean`, `group_last`,
//! `attention`, `recurrent`) take the group length `L` explicitly.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    GroupMean { x: Var, group: usize },
    GroupLast { x: Var, group: usize },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention(Box<AttentionRecord>),
    Recurrent { x: Var, w: Var, group: usize },
}

#[derive(Debug)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_group: usize,
    kv_group: usize,
    scale: f64,
    // probs[n * heads + h] is the (q_group x kv_group) attention matrix.
    probs: Vec<Matrix>,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of a single forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<ParamId>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, if the parameter took part in the graph and
    /// received a gradient path.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// All parameters that received a gradient, in first-use order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params
            .iter()
            .filter_map(move |(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for input-sensitivity checks).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so shared weights accumulate one gradient. A tape
    /// must only ever be used with a single store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        self.param_order.push(id);
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product of equally shaped matrices.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + row` with a `1 x C` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a * row` with a `1 x C` row broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// `a * col` with an `R x 1` column broadcast over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        let rg = self.rg(&[a, col]);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Array2::from_elem((1, 1), m.sum() / m.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Per-row sum: `R x C -> R x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSum(a), rg)
    }

    /// Mean over each consecutive block of `group` rows: `(N*G) x C -> N x C`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        assert!(group > 0 && rows % group == 0, "group_mean: {rows} rows not divisible by {group}");
        let n = rows / group;
        let mut value = Array2::zeros((n, cols));
        for i in 0..n {
            let block = x.slice(s![i * group..(i + 1) * group, ..]);
            value.row_mut(i).assign(&(block.sum_axis(Axis(0)) / group as f64));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::GroupMean { x: a, group }, rg)
    }

    /// Last row of each consecutive block of `group` rows.
    pub fn group_last(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        assert!(group > 0 && rows % group == 0, "group_last: {rows} rows not divisible by {group}");
        let n = rows / group;
        let mut value = Array2::zeros((n, cols));
        for i in 0..n {
            value.row_mut(i).assign(&x.row((i + 1) * group - 1));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::GroupLast { x: a, group }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(xhat.clone(), Op::LayerNorm { x: a, xhat, inv_std }, rg)
    }

    /// Multi-head scaled dot-product attention over grouped rows.
    ///
    /// `q` is `(N*Lq) x (H*dh)`, `k` and `v` are `(N*Lk) x (H*dh)`. Sample `n`
    /// attends only within its own block. Columns `h*dh..(h+1)*dh` form head
    /// `h`. Returns the concatenated head outputs `(N*Lq) x (H*dh)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_group: usize,
        kv_group: usize,
        scale: f64,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.ncols();
        assert!(heads > 0 && width % heads == 0, "attention: width {width} not divisible by {heads} heads");
        assert_eq!(kv.ncols(), width, "attention: key width");
        assert_eq!(vv.ncols(), width, "attention: value width");
        let n = qv.nrows() / q_group;
        assert_eq!(n * q_group, qv.nrows(), "attention: query rows");
        assert_eq!(n * kv_group, kv.nrows(), "attention: key rows");
        assert_eq!(kv.nrows(), vv.nrows(), "attention: value rows");
        let dh = width / heads;
        let mut out = Array2::zeros((qv.nrows(), width));
        let mut probs = Vec::with_capacity(n * heads);
        for i in 0..n {
            let qr = i * q_group..(i + 1) * q_group;
            let kr = i * kv_group..(i + 1) * kv_group;
            for h in 0..heads {
                let hc = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qr.clone(), hc.clone()]);
                let kh = kv.slice(s![kr.clone(), hc.clone()]);
                let vh = vv.slice(s![kr.clone(), hc.clone()]);
                let scores = qh.dot(&kh.t()) * scale;
                let p = softmax_rows(&scores);
                out.slice_mut(s![qr.clone(), hc]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        let record = AttentionRecord { q, k, v, heads, q_group, kv_group, scale, probs };
        self.push(out, Op::Attention(Box::new(record)), rg)
    }

    /// Attention probabilities recorded by an attention node, indexed
    /// `[sample * heads + head]`.
    pub fn attention_probs(&self, node: Var) -> Option<&[Matrix]> {
        match &self.nodes[node.0].op {
            Op::Attention(rec) => Some(&rec.probs),
            _ => None,
        }
    }

    /// Elman recurrence `h_t = tanh(x_t + h_{t-1} W)` with `h_0 = 0`, run
    /// independently within each block of `group` rows.
    pub fn recurrent(&mut self, x: Var, w: Var, group: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (rows, cols) = xv.dim();
        assert_eq!(wv.dim(), (cols, cols), "recurrent: weight must be square");
        assert!(group > 0 && rows % group == 0, "recurrent: rows not divisible by group");
        let mut h = Array2::zeros((rows, cols));
        for i in 0..rows / group {
            for t in 0..group {
                let r = i * group + t;
                let mut pre = xv.row(r).to_owned();
                if t > 0 {
                    pre += &h.row(r - 1).dot(wv);
                }
                h.row_mut(r).assign(&pre.mapv(f64::tanh));
            }
        }
        let rg = self.rg(&[x, w]);
        self.push(h, Op::Recurrent { x, w, group }, rg)
    }

    /// Reverse pass from a 1x1 root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self.param_order.iter().map(|p| (*p, self.params[p])).collect();
        Gradients { grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let send = |grads: &mut [Option<Matrix>], v: Var, m: Matrix| {
            if self.wants(v) {
                accumulate(&mut grads[v.0], m);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    send(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    send(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, g.clone());
                send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.clone());
                send(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    send(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                send(grads, *a, g.clone());
                if self.wants(*r) {
                    send(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.wants(*a) {
                    send(grads, *a, g * self.value(*r));
                }
                if self.wants(*r) {
                    let ga = g * self.value(*a);
                    send(grads, *r, ga.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, c) => {
                if self.wants(*a) {
                    send(grads, *a, g * self.value(*c));
                }
                if self.wants(*c) {
                    let ga = g * self.value(*a);
                    send(grads, *c, ga.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, k) => send(grads, *a, g * *k),
            Op::AddScalar(a) => send(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                send(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                send(grads, *a, d);
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= sigmoid(x));
                send(grads, *a, d);
            }
            Op::Exp(a) => send(grads, *a, g * y),
            Op::Ln(a) => send(grads, *a, g / self.value(*a)),
            Op::Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    *d *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                send(grads, *a, d);
            }
            Op::Square(a) => send(grads, *a, g * self.value(*a) * 2.0),
            Op::Sqrt(a) => send(grads, *a, g / &(y * 2.0)),
            Op::Sum(a) => {
                let shape = self.value(*a).dim();
                send(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::Mean(a) => {
                let shape = self.value(*a).dim();
                let n = (shape.0 * shape.1) as f64;
                send(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
            }
            Op::RowSum(a) => {
                let shape = self.value(*a).dim();
                let d = Array2::from_shape_fn(shape, |(i, _)| g[[i, 0]]);
                send(grads, *a, d);
            }
            Op::GroupMean { x, group } => {
                let shape = self.value(*x).dim();
                let k = *group as f64;
                let d = Array2::from_shape_fn(shape, |(i, j)| g[[i / group, j]] / k);
                send(grads, *x, d);
            }
            Op::GroupLast { x, group } => {
                let shape = self.value(*x).dim();
                let mut d = Array2::zeros(shape);
                for i in 0..g.nrows() {
                    d.row_mut((i + 1) * group - 1).assign(&g.row(i));
                }
                send(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.wants(*p) {
                        send(grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::Softmax(a) => {
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1));
                Zip::indexed(&mut d).for_each(|(i, j), v| *v -= y[[i, j]] * dots[i]);
                send(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let sums = g.sum_axis(Axis(1));
                let d = Array2::from_shape_fn(g.dim(), |(i, j)| g[[i, j]] - y[[i, j]].exp() * sums[i]);
                send(grads, *a, d);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let cols = xhat.ncols() as f64;
                let mut d = Array2::zeros(xhat.dim());
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let sum_g = gr.sum();
                    let sum_gx = gr.dot(&xr);
                    for j in 0..row.len() {
                        row[j] = inv_std[i] / cols * (cols * gr[j] - sum_g - xr[j] * sum_gx);
                    }
                }
                send(grads, *x, d);
            }
            Op::Attention(rec) => self.attention_backward(rec, g, grads),
            Op::Recurrent { x, w, group } => {
                let wv = self.value(*w);
                let (rows, cols) = y.dim();
                let mut dx = Array2::zeros((rows, cols));
                let mut dw = Array2::zeros((cols, cols));
                for i in 0..rows / group {
                    let mut carry = ndarray::Array1::<f64>::zeros(cols);
                    for t in (0..*group).rev() {
                        let r = i * group + t;
                        let dh = &g.row(r) + &carry;
                        let da = Zip::from(&dh).and(y.row(r)).map_collect(|d, h| d * (1.0 - h * h));
                        dx.row_mut(r).assign(&da);
                        if t > 0 {
                            let hp = y.row(r - 1);
                            for a in 0..cols {
                                for b in 0..cols {
                                    dw[[a, b]] += hp[a] * da[b];
                                }
                            }
                            carry = wv.dot(&da);
                        }
                    }
                }
                send(grads, *x, dx);
                send(grads, *w, dw);
            }
        }
    }

    fn attention_backward(&self, rec: &AttentionRecord, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (qv, kv, vv) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let width = qv.ncols();
        let dh = width / rec.heads;
        let n = qv.nrows() / rec.q_group;
        let mut dq = Array2::zeros(qv.dim());
        let mut dk = Array2::zeros(kv.dim());
        let mut dv = Array2::zeros(vv.dim());
        for i in 0..n {
            let qr = i * rec.q_group..(i + 1) * rec.q_group;
            let kr = i * rec.kv_group..(i + 1) * rec.kv_group;
            for h in 0..rec.heads {
                let hc = h * dh..(h + 1) * dh;
                let p = &rec.probs[i * rec.heads + h];
                let go = g.slice(s![qr.clone(), hc.clone()]);
                let qh = qv.slice(s![qr.clone(), hc.clone()]);
                let kh = kv.slice(s![kr.clone(), hc.clone()]);
                let vh = vv.slice(s![kr.clone(), hc.clone()]);
                let dvh = p.t().dot(&go);
                let dp = go.dot(&vh.t());
                let dots = (&dp * p).sum_axis(Axis(1));
                let ds = Array2::from_shape_fn(p.dim(), |(a, b)| p[[a, b]] * (dp[[a, b]] - dots[a])) * rec.scale;
                let dqh = ds.dot(&kh);
                let dkh = ds.t().dot(&qh);
                dq.slice_mut(s![qr.clone(), hc.clone()]).assign(&dqh);
                let mut dk_slice = dk.slice_mut(s![kr.clone(), hc.clone()]);
                dk_slice += &dkh;
                let mut dv_slice = dv.slice_mut(s![kr.clone(), hc]);
                dv_slice += &dvh;
            }
        }
        if self.wants(rec.q) {
            accumulate(&mut grads[rec.q.0], dq);
        }
        if self.wants(rec.k) {
            accumulate(&mut grads[rec.k.0], dk);
        }
        if self.wants(rec.v) {
            accumulate(&mut grads[rec.v.0], dv);
        }
    }
}

//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its
//! forward value and enough saved state to run its vector-Jacobian product.
//! Vectors are `1 × n` matrices and scalars are `1 × 1`.
//!
//! Parameters of a [`ParamStore`](crate::nn::ParamStore) are bound as the
//! first nodes of the tape so a [`ParamId`](crate::nn::ParamId) maps to the
//! [`Var`] with the same index.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::scalar::Scalar;

pub type Mat<T> = Array2<T>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Gelu(Var),
    Square(Var),
    SumAll(Var),
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
        probs: Vec<Mat<T>>,
    },
    SmoothedCrossEntropy {
        logits: Var,
        grad: Mat<T>,
    },
    MultiPositiveNce {
        sims: Var,
        grad: Mat<T>,
    },
    BatchHardTriplet {
        x: Var,
        grad: Mat<T>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat<T> {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    n_params: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            n_params: 0,
        }
    }

    /// Binds parameter values as the first nodes of the tape. `trainable[i]`
    /// controls whether gradients are tracked for parameter `i`.
    pub(crate) fn with_param_values<'a>(values: impl Iterator<Item = (&'a Mat<T>, bool)>) -> Self {
        let mut g = Self::new();
        for (value, trainable) in values {
            g.leaf(value.clone(), trainable);
        }
        g.n_params = g.nodes.len();
        g
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Mat<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Mat<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn row_constant(&mut self, row: &[T]) -> Var {
        self.constant(Mat::from_shape_vec((1, row.len()), row.to_vec()).expect("row shape"))
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulBt(a, b), &[a, b])
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Mat<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let bb = bv
            .broadcast(av.dim())
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", bv.dim(), av.dim()));
        let mut out = av.clone();
        Zip::from(&mut out).and(&bb).for_each(|o, &y| *o = f(*o, y));
        out
    }

    /// Elementwise `a + b`; `b` may be a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.broadcast_binary(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.broadcast_binary(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.broadcast_binary(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).mapv(f);
        self.push(value, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), total), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_count(n))
    }

    /// Output row `i` is the mean of the rows of `x` listed in `groups[i]`.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols();
        let mut out = Mat::zeros((groups.len(), cols));
        for (i, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "empty group");
            let inv = T::one() / T::from_count(rows.len());
            let mut dst = out.row_mut(i);
            for &r in rows {
                dst.scaled_add(inv, &xv.row(r));
            }
        }
        self.push(out, Op::GroupMean { x, groups }, &[x])
    }

    /// Mean of consecutive blocks of `block` rows.
    pub fn block_mean(&mut self, x: Var, block: usize) -> Var {
        let rows = self.value(x).nrows();
        assert!(block > 0 && rows.is_multiple_of(block), "rows not divisible by block");
        let groups = (0..rows / block)
            .map(|b| (b * block..(b + 1) * block).collect())
            .collect();
        self.group_mean(x, groups)
    }

    /// Output row `j` is row `index[j]` of `x`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let value = xv.select(Axis(0), &index);
        self.push(value, Op::Gather { x, index }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n = T::from_count(cols);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut value = xhat.clone();
        Zip::from(value.rows_mut()).for_each(|mut row| {
            Zip::from(&mut row)
                .and(gv.row(0))
                .and(bv.row(0))
                .for_each(|o, &g, &b| *o = *o * g + b);
        });
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Divides every row by its L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(T::lit(1e-12));
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// consecutive blocks of `block` rows. `q`, `k`, `v` are `rows × d` with
    /// `d` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, block: usize, heads: usize) -> Var {
        let (out, probs) = attention_forward(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            block,
            heads,
        );
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                block,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean label-smoothed cross-entropy over rows of `logits`.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, labels: &[usize], eps: T) -> Var {
        let (loss, grad) = smoothed_cross_entropy_forward(self.value(logits).view(), labels, eps);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::SmoothedCrossEntropy { logits, grad },
            &[logits],
        )
    }

    /// Mean over rows of `lse(sims_i) − lse(sims_i[positives_i])`.
    pub fn multi_positive_nce(&mut self, sims: Var, positives: &[Vec<usize>]) -> Var {
        let (loss, grad) = multi_positive_nce_forward(self.value(sims).view(), positives);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::MultiPositiveNce { sims, grad },
            &[sims],
        )
    }

    /// Batch-hard triplet loss; see [`crate::losses::triplet_loss`].
    pub fn batch_hard_triplet(&mut self, x: Var, labels: &[usize], margin: T) -> crate::Result<Var> {
        let (loss, grad) = batch_hard_triplet_forward(self.value(x).view(), labels, margin)?;
        Ok(self.push(Mat::from_elem((1, 1), loss), Op::BatchHardTriplet { x, grad }, &[x]))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Mat<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        grads[root.0] = Some(Mat::from_elem((1, 1), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.node_backward(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_broadcast(&self, grads: &mut [Option<Mat<T>>], b: Var, g: Mat<T>) {
        let target = self.value(b).dim();
        let reduced = reduce_to_shape(g, target);
        self.acc(grads, b, reduced);
    }

    fn node_backward(&self, idx: usize, dy: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let y = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    self.acc(grads, *a, dy.dot(&self.value(*b).t()));
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(dy));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs_grad(*a) {
                    self.acc(grads, *a, dy.dot(self.value(*b)));
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, dy.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                if self.needs_grad(*b) {
                    self.acc_broadcast(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                if self.needs_grad(*b) {
                    self.acc_broadcast(grads, *b, dy.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs_grad(*a) {
                    let bb = bv.broadcast(av.dim()).expect("broadcast");
                    self.acc(grads, *a, dy * &bb);
                }
                if self.needs_grad(*b) {
                    self.acc_broadcast(grads, *b, dy * av);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, dy * *c),
            Op::Sigmoid(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(y).for_each(|g, &s| *g *= s * (T::one() - s));
                self.acc(grads, *a, g);
            }
            Op::Tanh(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(y).for_each(|g, &t| *g *= T::one() - t * t);
                self.acc(grads, *a, g);
            }
            Op::Softplus(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| *g *= sigmoid(x));
                self.acc(grads, *a, g);
            }
            Op::Relu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                    if x <= T::zero() {
                        *g = T::zero();
                    }
                });
                self.acc(grads, *a, g);
            }
            Op::Gelu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| *g *= gelu_grad(x));
                self.acc(grads, *a, g);
            }
            Op::Square(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| *g *= x + x);
                self.acc(grads, *a, g);
            }
            Op::SumAll(a) => {
                let d = dy[[0, 0]];
                self.acc(grads, *a, Mat::from_elem(self.value(*a).dim(), d));
            }
            Op::GroupMean { x, groups } => {
                let mut g = Mat::zeros(self.value(*x).dim());
                for (i, rows) in groups.iter().enumerate() {
                    let inv = T::one() / T::from_count(rows.len());
                    for &r in rows {
                        g.row_mut(r).scaled_add(inv, &dy.row(i));
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::Gather { x, index } => {
                let mut g = Mat::zeros(self.value(*x).dim());
                for (j, &r) in index.iter().enumerate() {
                    let mut dst = g.row_mut(r);
                    dst += &dy.row(j);
                }
                self.acc(grads, *x, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.needs_grad(p) {
                        self.acc(grads, p, dy.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    if self.needs_grad(p) {
                        self.acc(grads, p, dy.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceCols { x, start } => {
                let mut g = Mat::zeros(self.value(*x).dim());
                let n = dy.ncols();
                g.slice_mut(s![.., *start..*start + n]).assign(dy);
                self.acc(grads, *x, g);
            }
            Op::SoftmaxRows(x) => {
                let mut g = dy.clone();
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let dot = grow.dot(&yrow);
                    Zip::from(&mut grow).and(&yrow).for_each(|g, &p| *g = p * (*g - dot));
                }
                self.acc(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                if self.needs_grad(*gamma) {
                    let dg = (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gamma, dg);
                }
                if self.needs_grad(*beta) {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *beta, db);
                }
                if self.needs_grad(*x) {
                    let cols = dy.ncols();
                    let n = T::from_count(cols);
                    let mut dx = Mat::zeros(dy.dim());
                    for r in 0..dy.nrows() {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            let d = dy[[r, c]] * gv[[0, c]];
                            sum_d += d;
                            sum_dx += d * xhat[[r, c]];
                        }
                        for c in 0..cols {
                            let d = dy[[r, c]] * gv[[0, c]];
                            dx[[r, c]] = inv_std[r] / n * (n * d - sum_d - xhat[[r, c]] * sum_dx);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::L2Normalize { x, norms } => {
                let mut g = dy.clone();
                for ((mut grow, yrow), &n) in g.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    let dot = grow.dot(&yrow);
                    Zip::from(&mut grow)
                        .and(&yrow)
                        .for_each(|g, &u| *g = (*g - u * dot) / n);
                }
                self.acc(grads, *x, g);
            }
            Op::Attention {
                q,
                k,
                v,
                block,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).view(),
                    self.value(*k).view(),
                    self.value(*v).view(),
                    dy.view(),
                    *block,
                    *heads,
                    probs,
                );
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::SmoothedCrossEntropy { logits, grad } => {
                self.acc(grads, *logits, grad * dy[[0, 0]]);
            }
            Op::MultiPositiveNce { sims, grad } => {
                self.acc(grads, *sims, grad * dy[[0, 0]]);
            }
            Op::BatchHardTriplet { x, grad } => {
                self.acc(grads, *x, grad * dy[[0, 0]]);
            }
        }
    }
}

fn reduce_to_shape<T: Scalar>(g: Mat<T>, target: (usize, usize)) -> Mat<T> {
    let mut g = g;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    assert_eq!(g.dim(), target, "broadcast gradient reduction");
    g
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(x_i)` via max subtraction.
pub fn log_sum_exp<T: Scalar>(xs: impl IntoIterator<Item = T> + Clone) -> T {
    let max = xs.clone().into_iter().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn attention_forward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    block: usize,
    heads: usize,
) -> (Mat<T>, Vec<Mat<T>>) {
    let (rows, d) = q.dim();
    assert!(block > 0 && rows % block == 0, "rows not divisible by attention block");
    assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
    let dh = d / heads;
    let scale = T::one() / T::from_count(dh).sqrt();
    let mut out = Mat::zeros((rows, d));
    let mut probs = Vec::with_capacity(rows / block * heads);
    for b in 0..rows / block {
        let r = b * block..(b + 1) * block;
        for h in 0..heads {
            let c = h * dh..(h + 1) * dh;
            let qs = q.slice(s![r.clone(), c.clone()]);
            let ks = k.slice(s![r.clone(), c.clone()]);
            let vs = v.slice(s![r.clone(), c.clone()]);
            let mut p = qs.dot(&ks.t()) * scale;
            for mut row in p.rows_mut() {
                softmax_in_place(row.as_slice_mut().expect("contiguous"));
            }
            out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vs));
            probs.push(p);
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    dy: ArrayView2<T>,
    block: usize,
    heads: usize,
    probs: &[Mat<T>],
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let (rows, d) = q.dim();
    let dh = d / heads;
    let scale = T::one() / T::from_count(dh).sqrt();
    let mut dq = Mat::zeros((rows, d));
    let mut dk = Mat::zeros((rows, d));
    let mut dv = Mat::zeros((rows, d));
    for b in 0..rows / block {
        let r = b * block..(b + 1) * block;
        for h in 0..heads {
            let c = h * dh..(h + 1) * dh;
            let p = &probs[b * heads + h];
            let dys = dy.slice(s![r.clone(), c.clone()]);
            let qs = q.slice(s![r.clone(), c.clone()]);
            let ks = k.slice(s![r.clone(), c.clone()]);
            let vs = v.slice(s![r.clone(), c.clone()]);
            dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&dys));
            let dp = dys.dot(&vs.t());
            let mut ds = dp;
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = drow.dot(&prow);
                Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|g, &pv| *g = pv * (*g - dot) * scale);
            }
            dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}

pub(crate) fn smoothed_cross_entropy_forward<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &[usize],
    eps: T,
) -> (T, Mat<T>) {
    let (rows, classes) = logits.dim();
    assert_eq!(rows, labels.len(), "one label per row");
    assert!(classes >= 2, "at least two classes");
    let off = eps / T::from_count(classes - 1);
    let on = T::one() - eps;
    let inv_rows = T::one() / T::from_count(rows);
    let mut grad = Mat::zeros((rows, classes));
    let mut loss = T::zero();
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        let mut target_dot = T::zero();
        for (j, &z) in row.iter().enumerate() {
            let t = if j == y { on } else { off };
            target_dot += t * z;
            grad[[i, j]] = ((z - lse).exp() - t) * inv_rows;
        }
        loss += lse - target_dot;
    }
    (loss * inv_rows, grad)
}

pub(crate) fn multi_positive_nce_forward<T: Scalar>(sims: ArrayView2<T>, positives: &[Vec<usize>]) -> (T, Mat<T>) {
    let rows = sims.nrows();
    assert_eq!(rows, positives.len(), "one positive set per row");
    let inv_rows = T::one() / T::from_count(rows);
    let mut grad = Mat::zeros(sims.dim());
    let mut loss = T::zero();
    for (i, (row, pos)) in sims.rows().into_iter().zip(positives).enumerate() {
        assert!(!pos.is_empty(), "row without positives");
        let lse_all = log_sum_exp(row.iter().copied());
        let lse_pos = log_sum_exp(pos.iter().map(|&j| row[j]));
        loss += lse_all - lse_pos;
        for (j, &s) in row.iter().enumerate() {
            grad[[i, j]] = (s - lse_all).exp() * inv_rows;
        }
        for &j in pos {
            grad[[i, j]] -= (row[j] - lse_pos).exp() * inv_rows;
        }
    }
    (loss * inv_rows, grad)
}

/// Hardest positive / negative choice for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinedTriplet<T> {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub term: T,
}

pub(crate) fn mine_batch_hard<T: Scalar>(
    x: ArrayView2<T>,
    labels: &[usize],
    margin: T,
) -> crate::Result<(Mat<T>, Vec<MinedTriplet<T>>)> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(crate::Error::DimensionMismatch(format!(
            "{} embeddings but {} labels",
            n,
            labels.len()
        )));
    }
    let mut dist = Mat::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let mut mined = Vec::new();
    let mut any_negative = false;
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dist[[a, j]] > dist[[a, p]]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|m| dist[[a, j]] < dist[[a, m]]) {
                neg = Some(j);
            }
        }
        any_negative |= neg.is_some();
        if let (Some(p), Some(m)) = (pos, neg) {
            let term = (margin + dist[[a, p]] - dist[[a, m]]).max(T::zero());
            mined.push(MinedTriplet {
                anchor: a,
                positive: p,
                negative: m,
                term,
            });
        }
    }
    if !any_negative {
        return Err(crate::Error::InvalidArgument(
            "triplet batch contains a single identity (no negatives)".into(),
        ));
    }
    if mined.is_empty() {
        return Err(crate::Error::InvalidArgument(
            "triplet batch has no identity with two or more samples".into(),
        ));
    }
    Ok((dist, mined))
}

pub(crate) fn batch_hard_triplet_forward<T: Scalar>(
    x: ArrayView2<T>,
    labels: &[usize],
    margin: T,
) -> crate::Result<(T, Mat<T>)> {
    let (dist, mined) = mine_batch_hard(x, labels, margin)?;
    let inv = T::one() / T::from_count(mined.len());
    let mut grad = Mat::zeros(x.dim());
    let mut loss = T::zero();
    for t in &mined {
        loss += t.term;
        if t.term <= T::zero() {
            continue;
        }
        let (a, p, m) = (t.anchor, t.positive, t.negative);
        let dap = dist[[a, p]];
        if dap > T::zero() {
            for c in 0..x.ncols() {
                let u = (x[[a, c]] - x[[p, c]]) / dap * inv;
                grad[[a, c]] += u;
                grad[[p, c]] -= u;
            }
        }
        let dan = dist[[a, m]];
        if dan > T::zero() {
            for c in 0..x.ncols() {
                let u = (x[[a, c]] - x[[m, c]]) / dan * inv;
                grad[[a, c]] -= u;
                grad[[m, c]] += u;
            }
        }
    }
    Ok((loss * inv, grad))
}

//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the indices of its inputs. [`Tape::backward`] walks the nodes in
//! reverse creation order and accumulates exact gradients. Nodes created from
//! [`Tape::constant`] (and everything computed only from constants) are
//! skipped during the backward sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Relu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    LogSoftmaxRows(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Im2Col(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<S>,
        inv_std: Vec<S>,
    },
    WeightedSum(Vec<(Var, S)>),
    LogGatherSum(Var, Vec<(usize, usize)>, S),
    LogClamp(Var, S),
    Tmse {
        x: Var,
        clamp: S,
        detach_prev: bool,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar root with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Matrix<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<S>> {
        self.grads[v.0].take()
    }
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shapes");
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds the `1×n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width");
        let mut value = self.value(a).clone();
        let brow = b.row(0).to_vec();
        for r in 0..value.rows() {
            for (x, &bv) in value.row_mut(r).iter_mut().zip(&brow) {
                *x = *x + bv;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).map(|v| v * k);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(S::zero()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Row-wise `x − logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<S>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let inv = S::one() / S::of_usize(x.rows());
        let mut value = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in value.row_mut(0).iter_mut().zip(x.row(r)) {
                *o = *o + v;
            }
        }
        value.scale_assign(inv);
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols rows");
            for r in 0..rows {
                value.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols range");
        let value = Matrix::from_fn(x.rows(), len, |r, c| x[(r, start + c)]);
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Temporal im2col for a kernel-3 dilated convolution with zero padding:
    /// row `t` holds `[x[t-d], x[t], x[t+d]]`.
    pub fn im2col(&mut self, a: Var, dilation: usize) -> Var {
        let x = self.value(a);
        let (t, d) = x.shape();
        let mut value = Matrix::zeros(t, 3 * d);
        for r in 0..t {
            let out = value.row_mut(r);
            if r >= dilation {
                out[..d].copy_from_slice(x.row(r - dilation));
            }
            out[d..2 * d].copy_from_slice(x.row(r));
            if r + dilation < t {
                out[2 * d..].copy_from_slice(x.row(r + dilation));
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::Im2Col(a, dilation), rg)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = S::of_usize(cols);
        let eps = S::lit(LN_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut value = xhat.clone();
        for r in 0..rows {
            for (c, o) in value.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Var {
        let shape = self.value(terms[0].0).shape();
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &(v, w) in terms {
            let m = self.value(v);
            assert_eq!(m.shape(), shape, "weighted_sum shapes");
            for (o, &x) in value.data_mut().iter_mut().zip(m.data()) {
                *o = *o + w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(value, Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn mean_of(&mut self, vars: &[Var]) -> Var {
        let w = S::one() / S::of_usize(vars.len());
        let terms: Vec<(Var, S)> = vars.iter().map(|&v| (v, w)).collect();
        self.weighted_sum(&terms)
    }

    /// `Σ ln(max(x[r,c], floor))` over the listed entries, as a `1×1` node.
    pub fn log_gather_sum(&mut self, a: Var, idx: Vec<(usize, usize)>, floor: S) -> Var {
        let x = self.value(a);
        let s: S = idx.iter().map(|&(r, c)| x[(r, c)].max(floor).ln()).sum();
        let rg = self.rg(&[a]);
        self.push(Matrix::scalar(s), Op::LogGatherSum(a, idx, floor), rg)
    }

    /// Element-wise `ln(max(x, floor))`.
    pub fn log_clamp(&mut self, a: Var, floor: S) -> Var {
        let value = self.value(a).map(|v| v.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(value, Op::LogClamp(a, floor), rg)
    }

    /// `Σ_t Σ_c min(|x[t,c] − x[t−1,c]|, clamp)²` as a `1×1` node.
    ///
    /// With `detach_prev` the previous row is treated as a constant target.
    pub fn tmse(&mut self, a: Var, clamp: S, detach_prev: bool) -> Var {
        let x = self.value(a);
        let mut s = S::zero();
        for t in 1..x.rows() {
            for (&cur, &prev) in x.row(t).iter().zip(x.row(t - 1)) {
                let d = (cur - prev).abs().min(clamp);
                s = s + d * d;
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Matrix::scalar(s),
            Op::Tmse {
                x: a,
                clamp,
                detach_prev,
            },
            rg,
        )
    }

    /// Which side of each non-differentiable point every recorded element
    /// lies on: ReLU inputs, probability floors and the `tmse` clamp.
    /// Two tapes of the same graph with equal patterns lie in the same
    /// smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                &Op::Relu(a) => out.extend(self.value(a).data().iter().map(|&v| v > S::zero())),
                &Op::LogClamp(a, floor) => out.extend(self.value(a).data().iter().map(|&v| v > floor)),
                Op::LogGatherSum(a, idx, floor) => {
                    let x = self.value(*a);
                    out.extend(idx.iter().map(|&(r, c)| x[(r, c)] > *floor));
                }
                &Op::Tmse { x, clamp, .. } => {
                    let x = self.value(x);
                    for t in 1..x.rows() {
                        for c in 0..x.cols() {
                            out.push((x[(t, c)] - x[(t - 1, c)]).abs() < clamp);
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be 1x1, got {:?}",
                rv.shape()
            )));
        }
        if !rv.data()[0].is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut grads: Vec<Option<Matrix<S>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(S::one()));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<S>, dy: &Matrix<S>, grads: &mut [Option<Matrix<S>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    let g = slot(grads, a, self.value(a).shape());
                    matmul_bt_acc(dy, self.value(b), g);
                }
                if self.wants(b) {
                    let g = slot(grads, b, self.value(b).shape());
                    matmul_at_acc(self.value(a), dy, g);
                }
            }
            &Op::MatMulBt(a, b) => {
                if self.wants(a) {
                    let g = slot(grads, a, self.value(a).shape());
                    matmul_acc(dy, self.value(b), g);
                }
                if self.wants(b) {
                    let g = slot(grads, b, self.value(b).shape());
                    matmul_at_acc(dy, self.value(a), g);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        slot(grads, v, dy.shape()).add_assign(dy);
                    }
                }
            }
            &Op::AddRow(a, bias) => {
                if self.wants(a) {
                    slot(grads, a, dy.shape()).add_assign(dy);
                }
                if self.wants(bias) {
                    let g = slot(grads, bias, (1, dy.cols()));
                    for r in 0..dy.rows() {
                        for (o, &d) in g.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *o = *o + d;
                        }
                    }
                }
            }
            &Op::Scale(a, k) => {
                if self.wants(a) {
                    let g = slot(grads, a, dy.shape());
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o = *o + k * d;
                    }
                }
            }
            &Op::Relu(a) => {
                if self.wants(a) {
                    let x = self.value(a);
                    let g = slot(grads, a, dy.shape());
                    for ((o, &d), &xv) in g.data_mut().iter_mut().zip(dy.data()).zip(x.data()) {
                        if xv > S::zero() {
                            *o = *o + d;
                        }
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                if self.wants(a) {
                    let g = slot(grads, a, dy.shape());
                    for r in 0..dy.rows() {
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let s: S = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for ((o, &p), &d) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *o = *o + p * (d - s);
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                if self.wants(a) {
                    let dt = dy.transpose();
                    slot(grads, a, dt.shape()).add_assign(&dt);
                }
            }
            &Op::LogSoftmaxRows(a) => {
                if self.wants(a) {
                    let g = slot(grads, a, dy.shape());
                    for r in 0..dy.rows() {
                        let dr = dy.row(r);
                        let s: S = dr.iter().copied().sum();
                        for ((o, &l), &d) in g.row_mut(r).iter_mut().zip(y.row(r)).zip(dr) {
                            *o = *o + d - l.exp() * s;
                        }
                    }
                }
            }
            &Op::MeanRows(a) => {
                if self.wants(a) {
                    let shape = self.value(a).shape();
                    let inv = S::one() / S::of_usize(shape.0);
                    let g = slot(grads, a, shape);
                    for r in 0..shape.0 {
                        for (o, &d) in g.row_mut(r).iter_mut().zip(dy.row(0)) {
                            *o = *o + d * inv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    if self.wants(p) {
                        let g = slot(grads, p, shape);
                        for r in 0..shape.0 {
                            for (o, &d) in g
                                .row_mut(r)
                                .iter_mut()
                                .zip(&dy.row(r)[off..off + shape.1])
                            {
                                *o = *o + d;
                            }
                        }
                    }
                    off += shape.1;
                }
            }
            &Op::SliceCols(a, start) => {
                if self.wants(a) {
                    let shape = self.value(a).shape();
                    let g = slot(grads, a, shape);
                    for r in 0..dy.rows() {
                        for (o, &d) in g.row_mut(r)[start..start + dy.cols()]
                            .iter_mut()
                            .zip(dy.row(r))
                        {
                            *o = *o + d;
                        }
                    }
                }
            }
            &Op::Im2Col(a, dilation) => {
                if self.wants(a) {
                    let (t, d) = self.value(a).shape();
                    let g = slot(grads, a, (t, d));
                    for r in 0..t {
                        let dr = dy.row(r);
                        if r >= dilation {
                            add_into(g.row_mut(r - dilation), &dr[..d]);
                        }
                        add_into(g.row_mut(r), &dr[d..2 * d]);
                        if r + dilation < t {
                            add_into(g.row_mut(r + dilation), &dr[2 * d..]);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                if self.wants(*gamma) {
                    let g = slot(grads, *gamma, (1, cols));
                    for r in 0..rows {
                        for ((o, &d), &h) in g.row_mut(0).iter_mut().zip(dy.row(r)).zip(xhat.row(r))
                        {
                            *o = *o + d * h;
                        }
                    }
                }
                if self.wants(*beta) {
                    let g = slot(grads, *beta, (1, cols));
                    for r in 0..rows {
                        add_into(g.row_mut(0), dy.row(r));
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).row(0).to_vec();
                    let n = S::of_usize(cols);
                    let g = slot(grads, *x, (rows, cols));
                    let mut dxhat = vec![S::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dxhat[c] = dy[(r, c)] * gam[c];
                        }
                        let sum_d: S = dxhat.iter().copied().sum();
                        let sum_dh: S = dxhat.iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / n;
                        for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                            *o = *o + k * (n * dxhat[c] - sum_d - xhat[(r, c)] * sum_dh);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        let g = slot(grads, v, dy.shape());
                        for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                            *o = *o + w * d;
                        }
                    }
                }
            }
            Op::LogGatherSum(a, idx, floor) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let d = dy.data()[0];
                    let g = slot(grads, *a, x.shape());
                    for &(r, c) in idx {
                        let v = x[(r, c)];
                        if v > *floor {
                            g[(r, c)] = g[(r, c)] + d / v;
                        }
                    }
                }
            }
            &Op::LogClamp(a, floor) => {
                if self.wants(a) {
                    let x = self.value(a);
                    let g = slot(grads, a, x.shape());
                    for ((o, &d), &v) in g.data_mut().iter_mut().zip(dy.data()).zip(x.data()) {
                        if v > floor {
                            *o = *o + d / v;
                        }
                    }
                }
            }
            &Op::Tmse {
                x: a,
                clamp,
                detach_prev,
            } => {
                if self.wants(a) {
                    let x = self.value(a);
                    let d = dy.data()[0];
                    let two = S::lit(2.0);
                    let g = slot(grads, a, x.shape());
                    for t in 1..x.rows() {
                        for c in 0..x.cols() {
                            let diff = x[(t, c)] - x[(t - 1, c)];
                            if diff.abs() < clamp {
                                let k = two * diff * d;
                                g[(t, c)] = g[(t, c)] + k;
                                if !detach_prev {
                                    g[(t - 1, c)] = g[(t - 1, c)] - k;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot<S: Scalar>(
    grads: &mut [Option<Matrix<S>>],
    v: Var,
    shape: (usize, usize),
) -> &mut Matrix<S> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

#[inline]
fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + s;
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

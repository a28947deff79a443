use std::collections::BTreeMap;

use super::tensor::axis_split;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Swish(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    DepthwiseConv1d(Var, Var),
    Reshape(Var),
    ExpandRows(Var),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            MatMul(a, b) | Add(a, b) | Mul(a, b) | DepthwiseConv1d(a, b) => vec![*a, *b],
            Scale(x, _) | Exp(x) | Log(x) | Sigmoid(x) | Swish(x) | Sum(x) | SumAxis(x, _)
            | MeanAxis(x, _) | Softmax(x, _) | LogSoftmax(x, _) | GatherRows(x, _)
            | Transpose(x) | Reshape(x) | ExpandRows(x) => vec![*x],
            Slice { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Computation tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so replaying indices from the root
/// downwards visits every node after all of its consumers. Shapes are never
/// broadcast; use [`Graph::expand_rows`] and [`Graph::reshape`] explicitly.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every named leaf that requires
/// a gradient. Leaves sharing a name accumulate additively.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }

    pub fn from_map(by_name: BTreeMap<String, Tensor<T>>) -> Self {
        Gradients { by_name }
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        )),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        // Saved activations for layer norm are only needed on the backward path.
        let op = match op {
            Op::LayerNorm {
                x, gamma, beta, ..
            } if !requires_grad => Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Vec::new(),
                rstd: Vec::new(),
            },
            op => op,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            name: Some(name.into()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[ta.shape(), tb.shape()]));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::ln);
        self.push(value, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Swish(x))
    }

    /// Sum of all elements, as a scalar of shape `[]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<T>, usize)> {
        let t = self.value(x);
        check_axis(op, t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let data = t.data();
        for o in 0..outer {
            for a in 0..n {
                let src = &data[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok((shape, out, n))
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data, _) = self.reduce_axis("sum_axis", x, axis)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SumAxis(x, axis)))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut data, n) = self.reduce_axis("mean_axis", x, axis)?;
        if n == 0 {
            return Err(Error::invalid("mean_axis", "empty axis"));
        }
        let inv = T::one() / T::lit(n as f64);
        data.iter_mut().for_each(|v| *v = *v * inv);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MeanAxis(x, axis)))
    }

    fn softmax_lanes(&self, op: &'static str, x: Var, axis: usize, log: bool) -> Result<Tensor<T>> {
        let t = self.value(x);
        check_axis(op, t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| src[idx(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..n {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total = total + e;
                }
                if log {
                    let lse = total.ln();
                    for a in 0..n {
                        out[idx(a)] = src[idx(a)] - max - lse;
                    }
                } else {
                    for a in 0..n {
                        out[idx(a)] = out[idx(a)] / total;
                    }
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.softmax_lanes("softmax", x, axis, false)?;
        Ok(self.push(value, Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.softmax_lanes("log_softmax", x, axis, true)?;
        Ok(self.push(value, Op::LogSoftmax(x, axis)))
    }

    /// Normalizes each row of an `R×C` matrix over its `C` columns, then
    /// applies the affine `gamma`, `beta` (both of shape `[C]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = matrix_dims("layer_norm", tx)?;
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Error::shape("layer_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let n = T::lit(cols as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new([rows, cols], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Rows `indices[i]` of an `R×C` matrix, in order; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.gather_value("gather_rows", x, indices)?;
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec())))
    }

    /// Rows of an `R×C` matrix whose `mask` entry is true.
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let rows = self.value(x).rows();
        if mask.len() != rows {
            return Err(Error::shape("masked_select", &[self.shape(x), &[mask.len()]]));
        }
        let indices: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
        let value = self.gather_value("masked_select", x, &indices)?;
        Ok(self.push(value, Op::GatherRows(x, indices)))
    }

    fn gather_value(&self, op: &'static str, x: Var, indices: &[usize]) -> Result<Tensor<T>> {
        let t = self.value(x);
        let (rows, cols) = matrix_dims(op, t)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(op, format!("row {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        Tensor::new([indices.len(), cols], data)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = matrix_dims("transpose", t)?;
        let src = t.data();
        let data = (0..rows * cols)
            .map(|i| {
                let (c, r) = (i / rows, i % rows);
                src[r * cols + c]
            })
            .collect();
        let value = Tensor::new([cols, rows], data)?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("slice", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        if start > end || end > n {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} out of bounds for axis {axis} of {:?}", t.shape()),
            ));
        }
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis)))
    }

    /// Per-channel convolution over time of a `U×C` input with a `K×C`
    /// kernel (`K` odd), zero-padded so the output is also `U×C`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (steps, channels) = matrix_dims("depthwise_conv1d", tx)?;
        let (k, kc) = matrix_dims("depthwise_conv1d", tk)?;
        if kc != channels || k % 2 == 0 {
            return Err(Error::shape("depthwise_conv1d", &[tx.shape(), tk.shape()]));
        }
        let pad = k / 2;
        let mut out = vec![T::zero(); steps * channels];
        for u in 0..steps {
            let dst = &mut out[u * channels..(u + 1) * channels];
            for j in 0..k {
                let Some(src_t) = (u + j).checked_sub(pad).filter(|&s| s < steps) else {
                    continue;
                };
                let src = tx.row(src_t);
                let w = tk.row(j);
                for c in 0..channels {
                    dst[c] = dst[c] + w[c] * src[c];
                }
            }
        }
        let value = Tensor::new([steps, channels], out)?;
        Ok(self.push(value, Op::DepthwiseConv1d(x, kernel)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Repeats a `[C]` vector into a `rows×C` matrix.
    pub fn expand_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 {
            return Err(Error::invalid(
                "expand_rows",
                format!("expected a vector, got shape {:?}", t.shape()),
            ));
        }
        let cols = t.len();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new([rows, cols], data)?;
        Ok(self.push(value, Op::ExpandRows(x)))
    }

    /// `x·w + b` for `x: R×I`, `w: I×O`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let rows = self.shape(y)[0];
        let bias = self.expand_rows(b, rows)?;
        self.add(y, bias)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut result = Gradients::default();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut result)?;
        }
        Ok(result)
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        result: &mut Gradients<T>,
    ) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {
                if let Some(name) = &node.name {
                    let grad = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                    match result.by_name.get_mut(name) {
                        Some(existing) => existing
                            .data_mut()
                            .iter_mut()
                            .zip(grad.data())
                            .for_each(|(a, &b)| *a = *a + b),
                        None => {
                            result.by_name.insert(name.clone(), grad);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = self.grad_buf(grads, *a) {
                    T::gemm(m, n, k, g, (n, 1), tb.data(), (1, n), ga, true);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    T::gemm(k, m, n, ta.data(), (1, k), g, (n, 1), gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_buf(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let od = self.value(other).data();
                    if let Some(gv) = self.grad_buf(grads, v) {
                        for ((d, &s), &o) in gv.iter_mut().zip(g).zip(od) {
                            *d = *d + s * o;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * *c);
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, &s), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + s * yv;
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, &s), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *d = *d + s / xv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, &s), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + s * yv * (T::one() - yv);
                    }
                }
            }
            Op::Swish(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, &s), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        let sg = sigmoid(xv);
                        *d = *d + s * (sg + xv * sg * (T::one() - sg));
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let factor = match node.op {
                    Op::MeanAxis(..) => T::one() / T::lit(n as f64),
                    _ => T::one(),
                };
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..n {
                            let dst = &mut gx[(o * n + a) * inner..(o * n + a + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s * factor;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * n + a) * inner + i;
                            if log {
                                let total: T = (0..n).map(|a| g[idx(a)]).sum();
                                for a in 0..n {
                                    let p = y[idx(a)].exp();
                                    gx[idx(a)] = gx[idx(a)] + g[idx(a)] - p * total;
                                }
                            } else {
                                let dot: T = (0..n).map(|a| g[idx(a)] * y[idx(a)]).sum();
                                for a in 0..n {
                                    gx[idx(a)] = gx[idx(a)] + y[idx(a)] * (g[idx(a)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.shape(*x)[1];
                let rows = rstd.len();
                let gam = self.value(*gamma).data();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let n = T::lit(cols as f64);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gam[c];
                            m1 = m1 + dxhat[c];
                            m2 = m2 + dxhat[c] * hr[c];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] = dst[c] + rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                }
                if let Some(gg) = self.grad_buf(grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] = gg[c] + g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *beta) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] = gb[c] + g[r * cols + c];
                        }
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                let cols = self.value(*x).cols();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, &src) in indices.iter().enumerate() {
                        let dst = &mut gx[src * cols..(src + 1) * cols];
                        for (d, &s) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] = gx[r * cols + c] + g[c * rows + r];
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if let Some(gv) = self.grad_buf(grads, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut gv[o * n * inner..(o + 1) * n * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::DepthwiseConv1d(x, kernel) => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (steps, channels) = (tx.shape()[0], tx.shape()[1]);
                let k = tk.shape()[0];
                let pad = k / 2;
                let taps = |u: usize, j: usize| (u + j).checked_sub(pad).filter(|&s| s < steps);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for u in 0..steps {
                        for j in 0..k {
                            let Some(s) = taps(u, j) else { continue };
                            for c in 0..channels {
                                gx[s * channels + c] =
                                    gx[s * channels + c] + g[u * channels + c] * tk.data()[j * channels + c];
                            }
                        }
                    }
                }
                if let Some(gk) = self.grad_buf(grads, *kernel) {
                    for u in 0..steps {
                        for j in 0..k {
                            let Some(s) = taps(u, j) else { continue };
                            for c in 0..channels {
                                gk[j * channels + c] =
                                    gk[j * channels + c] + g[u * channels + c] * tx.data()[s * channels + c];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::ExpandRows(x) => {
                let cols = self.value(*x).len();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for row in g.chunks(cols) {
                        gx.iter_mut().zip(row).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulation buffer for `v`, allocated on first use; `None` when `v`
    /// does not need a gradient.
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }
}

use std::rc::Rc;

use super::{matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_rows, Real, Tensor};
use crate::error::{shape, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Square(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Softmax(Var),
    Tanh(Var),
    Silu(Var),
    RmsNorm(Var, Vec<T>),
    Rotary { x: Var, angles: Var, heads: usize },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Tape of tensor operations. Built fresh for every forward pass; gradients
/// are replayed in exact reverse order of recording.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf whose gradient is always zero.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let tracked = self.tracked(&[a, b]);
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let cols = self.value(a).cols();
        if self.value(b).len() != cols {
            return Err(shape(format!(
                "{what}: row vector of {} for {cols} columns",
                self.value(b).len()
            )));
        }
        Ok(cols)
    }

    /// `a[r, c] + b[c]` for every row `r`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = self.row_broadcast(a, b, "add_row")?;
        let vb = self.value(b).data().to_vec();
        let value = self.value(a).clone();
        let mut value = value;
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x = *x + vb[i % cols];
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), tracked))
    }

    /// `a[r, c] * b[c]` for every row `r`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = self.row_broadcast(a, b, "mul_row")?;
        let vb = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x = *x * vb[i % cols];
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MulRow(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(a).map(|x| x * c);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Scale(a, c), tracked)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Square(a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Tanh(a), tracked)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Silu(a), tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_matrix()?;
        let (n, k2) = self.value(b).as_matrix()?;
        if k != k2 {
            return Err(shape(format!(
                "matmul_nt inner extents differ: {:?} x {:?}^T",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), tracked))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let value = softmax_rows(self.value(x), mask.as_ref().map(|m| m.as_slice()))?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Softmax(x), tracked))
    }

    /// Root-mean-square normalisation of each row, without a gain.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let cols = v.cols();
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let mut inv = Vec::with_capacity(v.rows());
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let ms = row.iter().fold(T::zero(), |acc, &a| acc + a * a) / n;
            let r = T::one() / (ms + eps).sqrt();
            for a in row.iter_mut() {
                *a = *a * r;
            }
            inv.push(r);
        }
        let tracked = self.tracked(&[x]);
        self.push(out, Op::RmsNorm(x, inv), tracked)
    }

    /// Rotates consecutive feature pairs of every head by per-row band angles.
    /// `x` is `[n, heads * 2 * bands]`, `angles` is `[n, bands]`.
    pub fn rotary(&mut self, x: Var, angles: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let va = self.value(angles);
        let (n, width) = vx.as_matrix()?;
        let (na, bands) = va.as_matrix()?;
        if na != n || heads == 0 || width != heads * 2 * bands {
            return Err(shape(format!(
                "rotary: x {:?}, angles {:?}, heads {heads}",
                vx.shape(),
                va.shape()
            )));
        }
        let mut out = vx.clone();
        let d = out.data_mut();
        for r in 0..n {
            for b in 0..bands {
                let (s, c) = va.data()[r * bands + b].sin_cos();
                for h in 0..heads {
                    let i = r * width + h * 2 * bands + 2 * b;
                    let (x0, x1) = (d[i], d[i + 1]);
                    d[i] = x0 * c - x1 * s;
                    d[i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let tracked = self.tracked(&[x, angles]);
        Ok(self.push(out, Op::Rotary { x, angles, heads }, tracked))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rows = v.rows();
        let cols = v.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(shape(format!("gather index {i} out of {rows} rows")));
            }
            data.extend_from_slice(v.row(i));
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::GatherRows(x, index.to_vec()), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape("concat_cols of zero tensors"));
        };
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape(format!(
                    "concat_cols row mismatch {rows} vs {}",
                    self.value(p).rows()
                )));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        if start + len > cols {
            return Err(shape(format!(
                "column slice {start}..{} of {cols}",
                start + len
            )));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, tracked))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Mean(x), tracked)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.adjoint(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` with respect to each of `params`, in order.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        let grads = self.backward(loss)?;
        Ok(params.iter().map(|&p| grads.get(self, p)).collect())
    }

    fn adjoint(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = &mut grads[v.0];
            let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(t.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, gd));
                acc(*b, &|d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, gd));
                acc(*b, &|d| {
                    for (x, &y) in d.iter_mut().zip(gd) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * vb[i];
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * va[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                let cols = self.value(*b).len();
                acc(*a, &|d| add_into(d, gd));
                acc(*b, &|d| {
                    for (i, &y) in gd.iter().enumerate() {
                        d[i % cols] = d[i % cols] + y;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let cols = vb.len();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * vb[i % cols];
                    }
                });
                acc(*b, &|d| {
                    for (i, &y) in gd.iter().enumerate() {
                        d[i % cols] = d[i % cols] + y * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|d| {
                for (x, &y) in d.iter_mut().zip(gd) {
                    *x = *x + y * *c;
                }
            }),
            Op::Square(a) => {
                let va = self.value(*a).data();
                let two = T::of(2.0);
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + two * va[i] * gd[i];
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        let s = T::one() / (T::one() + (-x[i]).exp());
                        d[i] = d[i] + gd[i] * s * (T::one() + x[i] * (T::one() - s));
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix()?;
                let n = self.value(*b).cols();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| matmul_nt_acc(gd, vb, d, m, n, k));
                acc(*b, &|d| matmul_tn_acc(va, gd, d, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).as_matrix()?;
                let n = self.value(*b).rows();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // C = A B^T: dA = dC B, dB = dC^T A
                acc(*a, &|d| matmul_acc(gd, vb, d, m, n, k));
                acc(*b, &|d| matmul_tn_acc(gd, va, d, m, n, k));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                acc(*x, &|d| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for c in 0..cols {
                            d[r * cols + c] = d[r * cols + c] + yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::RmsNorm(x, inv) => {
                let y = &node.value;
                let cols = y.cols();
                let n = T::of(cols as f64);
                acc(*x, &|d| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b) / n;
                        for c in 0..cols {
                            d[r * cols + c] = d[r * cols + c] + inv[r] * (gr[c] - yr[c] * dot);
                        }
                    }
                });
            }
            Op::Rotary { x, angles, heads } => {
                let va = self.value(*angles);
                let bands = va.cols();
                let width = heads * 2 * bands;
                let y = node.value.data();
                acc(*x, &|d| {
                    for r in 0..va.rows() {
                        for b in 0..bands {
                            let (s, c) = va.data()[r * bands + b].sin_cos();
                            for h in 0..*heads {
                                let i = r * width + h * 2 * bands + 2 * b;
                                d[i] = d[i] + gd[i] * c + gd[i + 1] * s;
                                d[i + 1] = d[i + 1] - gd[i] * s + gd[i + 1] * c;
                            }
                        }
                    }
                });
                acc(*angles, &|d| {
                    for r in 0..va.rows() {
                        for b in 0..bands {
                            let mut s = T::zero();
                            for h in 0..*heads {
                                let i = r * width + h * 2 * bands + 2 * b;
                                s = s - gd[i] * y[i + 1] + gd[i + 1] * y[i];
                            }
                            d[r * bands + b] = d[r * bands + b] + s;
                        }
                    }
                });
            }
            Op::GatherRows(x, index) => {
                let cols = node.value.cols();
                acc(*x, &|d| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(
                            &mut d[i * cols..(i + 1) * cols],
                            &gd[k * cols..(k + 1) * cols],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &|d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &gd[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &|d| add_into(d, &gd[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let cols = self.value(*x).cols();
                acc(*x, &|d| {
                    for r in 0..node.value.rows() {
                        add_into(
                            &mut d[r * cols + start..r * cols + start + w],
                            &gd[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                let n = node.value.len();
                acc(*x, &|d| {
                    add_into(&mut d[start * cols..start * cols + n], gd)
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                acc(*x, &|d| {
                    for v in d.iter_mut() {
                        *v = *v + s;
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = gd[0] / T::of(n as f64);
                acc(*x, &|d| {
                    for v in d.iter_mut() {
                        *v = *v + s;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x = *x + y;
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros when `v` is a constant or unreachable.
    pub fn get(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(graph.shape(v)),
        }
    }

    pub fn take(&mut self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}

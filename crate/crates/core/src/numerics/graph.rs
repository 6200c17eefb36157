//! Tape-style reverse-mode autodiff.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends one node
//! holding its output value and whatever it needs for the backward rule, so
//! operand ids always precede the nodes that consume them. [`Graph::backward`]
//! consumes the tape and walks it once in reverse.

use std::collections::HashMap;

use super::kernels::{axpy, dot, gemm, MatRef};
use super::{NumericsError, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand repeats over the leading dims of the left operand.
    Trailing,
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var, bcast: Bcast },
    Sub { a: Var, b: Var, bcast: Bcast },
    Mul { a: Var, b: Var, bcast: Bcast },
    Scale { a: Var, c: T },
    Relu { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Log { a: Var },
    SumAxis { a: Var, outer: usize, len: usize, inner: usize },
    MeanAxis { a: Var, outer: usize, len: usize, inner: usize },
    SumAll { a: Var },
    L2Normalize { a: Var, norms: Vec<T> },
    LayerNorm { a: Var, inv_std: Vec<T> },
    Concat { parts: Vec<Var> },
    Reshape { a: Var },
    GatherRows { table: Var, idx: Vec<usize> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Attention { qkv: Var, heads: usize, lengths: Option<Vec<usize>>, probs: Vec<T> },
    MaskedMeanPool { a: Var, lengths: Vec<usize> },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only operation tape.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    degenerate_rows: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`] for every leaf that requires one.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    loss: T,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn loss(&self) -> T {
        self.loss
    }

    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v).map(|t| t.data())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn classify_bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast, NumericsError> {
    if a == b {
        Ok(Bcast::Same)
    } else if b.iter().product::<usize>() == 1 {
        Ok(Bcast::Scalar)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Bcast::Trailing)
    } else {
        Err(mismatch(op, a, b))
    }
}

/// Value of the right operand at flat position `i` of the left operand.
#[inline]
fn bval<T: Copy>(b: &[T], bcast: Bcast, i: usize) -> T {
    match bcast {
        Bcast::Same => b[i],
        Bcast::Scalar => b[0],
        Bcast::Trailing => b[i % b.len()],
    }
}

/// Folds a gradient shaped like the left operand onto the right operand's shape.
fn reduce_to_b<T: Real>(g: &[T], bcast: Bcast, blen: usize, dst: &mut [T]) {
    match bcast {
        Bcast::Same => axpy(T::one(), g, dst),
        Bcast::Scalar => dst[0] += g.iter().copied().sum::<T>(),
        Bcast::Trailing => {
            for chunk in g.chunks_exact(blen) {
                axpy(T::one(), chunk, dst);
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), degenerate_rows: 0 }
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

    /// Rows that hit the zero-vector branch of [`Graph::l2_normalize`].
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Result<Var, NumericsError> {
        if !tensor.all_finite() {
            return Err(NumericsError::NonFinite { op: "leaf" });
        }
        let requires_grad = tensor.requires_grad;
        tensor.grad = None;
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Result<Var, NumericsError> {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Result<Var, NumericsError> {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// `a @ b` where `a` is `[.., k]` and `b` is `[k, n]`; leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || tb.rank() != 2 || ta.cols() != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(ta.data(), m, k), MatRef::new(tb.data(), k, n), &mut out, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(mismatch("transpose", ta.shape(), &[]));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        self.push("transpose", value, Op::Transpose { a }, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Bcast), NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = classify_bcast(name, ta.shape(), tb.shape())?;
        let bd = tb.data();
        let out: Vec<T> = ta.data().iter().enumerate().map(|(i, &x)| f(x, bval(bd, bcast, i))).collect();
        Ok((Tensor::new(ta.shape(), out)?, bcast))
    }

    /// Elementwise sum. `b` may equal `a`'s shape, match its trailing dims, or be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (value, bcast) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b, bcast }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (value, bcast) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub { a, b, bcast }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (value, bcast) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b, bcast }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect())?;
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>, NumericsError> {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.unary(a, |x| if x > T::zero() { x } else { T::zero() })?;
        self.push("relu", value, Op::Relu { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.unary(a, T::tanh)?;
        self.push("tanh", value, Op::Tanh { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.unary(a, T::exp)?;
        self.push("exp", value, Op::Exp { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.unary(a, T::ln)?;
        self.push("log", value, Op::Log { a }, &[a])
    }

    fn reduce_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize, Vec<T>), NumericsError> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(mismatch(name, ta.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let src = ta.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                axpy(T::one(), &src[base..base + inner], &mut out[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape: Vec<usize> = ta.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((shape, outer, len, inner, out))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let (shape, outer, len, inner, out) = self.reduce_axis("sum_axis", a, axis)?;
        let value = Tensor::new(&shape, out)?;
        self.push("sum_axis", value, Op::SumAxis { a, outer, len, inner }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let (shape, outer, len, inner, mut out) = self.reduce_axis("mean_axis", a, axis)?;
        let inv = T::one() / T::of(len as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&shape, out)?;
        self.push("mean_axis", value, Op::MeanAxis { a, outer, len, inner }, &[a])
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let total = self.value(a).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(total), Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Rows scaled to unit L2 norm over the last axis.
    ///
    /// An exactly-zero row maps to the zero row, gets a zero gradient and is counted in
    /// [`Graph::degenerate_rows`].
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let src = ta.data();
        let mut out = vec![T::zero(); src.len()];
        let mut norms = Vec::with_capacity(rows);
        let mut degenerate = 0;
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = dot(row, row).sqrt();
            norms.push(norm);
            if norm == T::zero() {
                degenerate += 1;
                continue;
            }
            let inv = T::one() / norm;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x * inv;
            }
        }
        let value = Tensor::new(ta.shape(), out)?;
        if degenerate > 0 {
            log::warn!("l2_normalize: {degenerate} zero row(s) left as zero vectors");
            self.degenerate_rows += degenerate;
        }
        self.push("l2_normalize", value, Op::L2Normalize { a, norms }, &[a])
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, NumericsError> {
        let eps = T::of(1e-5);
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let src = ta.data();
        let nf = T::of(cols as f64);
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
        }
        let value = Tensor::new(ta.shape(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { a, inv_std }, &[a])
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::EmptyInput { op: "concat" })?;
        let tail: Vec<usize> = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.shape()[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(*first), tp.shape()));
            }
            lead += tp.shape()[0];
            data.extend_from_slice(tp.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Rows of a `[V, d]` table selected by `idx`, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(mismatch("gather_rows", tt.shape(), &[idx.len()]));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(NumericsError::IndexOutOfRange { op: "gather_rows", index: bad, bound: v });
        }
        if idx.is_empty() {
            return Err(NumericsError::EmptyInput { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(&[idx.len(), d], out)?;
        self.push("gather_rows", value, Op::GatherRows { table, idx: idx.to_vec() }, &[table])
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed with max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(mismatch("softmax_cross_entropy", tl.shape(), &[targets.len()]));
        }
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(NumericsError::IndexOutOfRange { op: "softmax_cross_entropy", index: bad, bound: k });
        }
        let src = tl.data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for r in 0..n {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (x - mx).exp();
                z += *p;
            }
            let inv = T::one() / z;
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p *= inv);
            total += z.ln() + mx - row[targets[r]];
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxXent { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Multi-head self-attention over a fused `[N, L, 3d]` projection laid out as `[q | k | v]`.
    ///
    /// With `lengths`, example `n` attends only to keys `0..lengths[n]`; outputs at those
    /// positions are then independent of anything stored past the length.
    pub fn attention(&mut self, qkv: Var, heads: usize, lengths: Option<&[usize]>) -> Result<Var, NumericsError> {
        let tq = self.value(qkv);
        let shape = tq.shape().to_vec();
        if shape.len() != 3 || !shape[2].is_multiple_of(3) || !(shape[2] / 3).is_multiple_of(heads) {
            return Err(mismatch("attention", &shape, &[heads]));
        }
        let (n, l, d3) = (shape[0], shape[1], shape[2]);
        let d = d3 / 3;
        let dh = d / heads;
        if let Some(lens) = lengths {
            if lens.len() != n || lens.iter().any(|&x| x == 0 || x > l) {
                return Err(mismatch("attention", &shape, lens));
            }
        }
        let scale = T::one() / T::of(dh as f64).sqrt();
        let src = tq.data();
        let mut out = vec![T::zero(); n * l * d];
        let mut probs = vec![T::zero(); n * heads * l * l];
        let mut scores = vec![T::zero(); l];
        for b in 0..n {
            let lv = lengths.map_or(l, |lens| lens[b]);
            for h in 0..heads {
                let pbase = (b * heads + h) * l * l;
                for i in 0..l {
                    let q = &src[(b * l + i) * d3 + h * dh..][..dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..lv {
                        let kv = &src[(b * l + j) * d3 + d + h * dh..][..dh];
                        scores[j] = dot(q, kv) * scale;
                        mx = mx.max(scores[j]);
                    }
                    let mut z = T::zero();
                    for s in scores[..lv].iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let inv = T::one() / z;
                    let orow = &mut out[(b * l + i) * d + h * dh..][..dh];
                    for j in 0..lv {
                        let p = scores[j] * inv;
                        probs[pbase + i * l + j] = p;
                        let vv = &src[(b * l + j) * d3 + 2 * d + h * dh..][..dh];
                        axpy(p, vv, orow);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, l, d], out)?;
        self.push(
            "attention",
            value,
            Op::Attention { qkv, heads, lengths: lengths.map(<[usize]>::to_vec), probs },
            &[qkv],
        )
    }

    /// Mean over the first `lengths[n]` positions of a `[N, L, d]` tensor, giving `[N, d]`.
    pub fn masked_mean_pool(&mut self, a: Var, lengths: &[usize]) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let shape = ta.shape();
        if shape.len() != 3 || lengths.len() != shape[0] || lengths.iter().any(|&x| x == 0 || x > shape[1]) {
            return Err(mismatch("masked_mean_pool", shape, lengths));
        }
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        let src = ta.data();
        let mut out = vec![T::zero(); n * d];
        for b in 0..n {
            let orow = &mut out[b * d..(b + 1) * d];
            for p in 0..lengths[b] {
                axpy(T::one(), &src[(b * l + p) * d..][..d], orow);
            }
            let inv = T::one() / T::of(lengths[b] as f64);
            orow.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(&[n, d], out)?;
        self.push("masked_mean_pool", value, Op::MaskedMeanPool { a, lengths: lengths.to_vec() }, &[a])
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let loss_value = lt.item();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }

        let mut leaves = HashMap::new();
        for (id, node) in self.nodes.into_iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[id].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                leaves.insert(Var(id), Tensor::new(node.value.shape(), g)?);
            }
        }
        Ok(Gradients { loss: loss_value, leaves })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Lazily materialized accumulator for operand `v`.
        fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if wants(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(MatRef::new(g, m, n), MatRef::new(tb.data(), k, n).t(), da, true);
                }
                if wants(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(MatRef::new(ta.data(), m, k).t(), MatRef::new(g, m, n), db, true);
                }
            }
            Op::Transpose { a } => {
                if wants(*a) {
                    let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let da = slot(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add { a, b, bcast } | Op::Sub { a, b, bcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if wants(*a) {
                    axpy(T::one(), g, slot(grads, *a, g.len()));
                }
                if wants(*b) {
                    let blen = val(*b).numel();
                    let db = slot(grads, *b, blen);
                    if sign == T::one() {
                        reduce_to_b(g, *bcast, blen, db);
                    } else {
                        let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                        reduce_to_b(&neg, *bcast, blen, db);
                    }
                }
            }
            Op::Mul { a, b, bcast } => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bval(tb.data(), *bcast, i);
                    }
                }
                if wants(*b) {
                    let prod: Vec<T> = g.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    let blen = tb.numel();
                    reduce_to_b(&prod, *bcast, blen, slot(grads, *b, blen));
                }
            }
            Op::Scale { a, c } => {
                if wants(*a) {
                    axpy(*c, g, slot(grads, *a, g.len()));
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, &x), &gv) in da.iter_mut().zip(val(*a).data()).zip(g) {
                        if x > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                if wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, &y), &gv) in da.iter_mut().zip(out.data()).zip(g) {
                        *d += gv * (T::one() - y * y);
                    }
                }
            }
            Op::Exp { a } => {
                if wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, &y), &gv) in da.iter_mut().zip(out.data()).zip(g) {
                        *d += gv * y;
                    }
                }
            }
            Op::Log { a } => {
                if wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, &x), &gv) in da.iter_mut().zip(val(*a).data()).zip(g) {
                        *d += gv / x;
                    }
                }
            }
            Op::SumAxis { a, outer, len, inner } | Op::MeanAxis { a, outer, len, inner } => {
                if wants(*a) {
                    let c = if matches!(node.op, Op::MeanAxis { .. }) {
                        T::one() / T::of(*len as f64)
                    } else {
                        T::one()
                    };
                    let da = slot(grads, *a, outer * len * inner);
                    for o in 0..*outer {
                        let gs = &g[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            axpy(c, gs, &mut da[base..base + inner]);
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if wants(*a) {
                    let n = val(*a).numel();
                    slot(grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::L2Normalize { a, norms } => {
                if wants(*a) {
                    let cols = out.cols();
                    let da = slot(grads, *a, out.numel());
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm == T::zero() {
                            continue;
                        }
                        let y = &out.data()[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let proj = dot(y, gy);
                        let inv = T::one() / norm;
                        for ((d, &yv), &gv) in da[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gy) {
                            *d += (gv - yv * proj) * inv;
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                if wants(*a) {
                    let cols = out.cols();
                    let nf = T::of(cols as f64);
                    let da = slot(grads, *a, out.numel());
                    for (r, &is) in inv_std.iter().enumerate() {
                        let y = &out.data()[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let mean_g = gy.iter().copied().sum::<T>() / nf;
                        let mean_gy = dot(y, gy) / nf;
                        for ((d, &yv), &gv) in da[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gy) {
                            *d += is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        axpy(T::one(), &g[off..off + n], slot(grads, p, n));
                    }
                    off += n;
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    axpy(T::one(), g, slot(grads, *a, g.len()));
                }
            }
            Op::GatherRows { table, idx } => {
                if wants(*table) {
                    let tt = val(*table);
                    let d = tt.cols();
                    let dt = slot(grads, *table, tt.numel());
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut dt[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                if wants(*logits) {
                    let n = targets.len();
                    let k = probs.len() / n;
                    let c = g[0] / T::of(n as f64);
                    let dl = slot(grads, *logits, n * k);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * k + j] += c * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, lengths, probs } => {
                if wants(*qkv) {
                    let src = val(*qkv).data();
                    let shape = val(*qkv).shape();
                    let (n, l, d3) = (shape[0], shape[1], shape[2]);
                    let d = d3 / 3;
                    let dh = d / heads;
                    let scale = T::one() / T::of(dh as f64).sqrt();
                    let dq = slot(grads, *qkv, n * l * d3);
                    let mut dp = vec![T::zero(); l];
                    for b in 0..n {
                        let lv = lengths.as_ref().map_or(l, |lens| lens[b]);
                        for h in 0..*heads {
                            let pbase = (b * heads + h) * l * l;
                            for i in 0..l {
                                let go = &g[(b * l + i) * d + h * dh..][..dh];
                                let prow = &probs[pbase + i * l..][..l];
                                let mut wsum = T::zero();
                                for j in 0..lv {
                                    let vv = &src[(b * l + j) * d3 + 2 * d + h * dh..][..dh];
                                    dp[j] = dot(go, vv);
                                    wsum += dp[j] * prow[j];
                                }
                                for j in 0..lv {
                                    let p = prow[j];
                                    // dV_j += p_ij * dO_i
                                    let dv_off = (b * l + j) * d3 + 2 * d + h * dh;
                                    axpy(p, go, &mut dq[dv_off..dv_off + dh]);
                                    let ds = p * (dp[j] - wsum) * scale;
                                    if ds == T::zero() {
                                        continue;
                                    }
                                    let q_off = (b * l + i) * d3 + h * dh;
                                    let k_off = (b * l + j) * d3 + d + h * dh;
                                    for t in 0..dh {
                                        let (qv, kv) = (src[q_off + t], src[k_off + t]);
                                        dq[q_off + t] += ds * kv;
                                        dq[k_off + t] += ds * qv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskedMeanPool { a, lengths } => {
                if wants(*a) {
                    let shape = val(*a).shape();
                    let (l, d) = (shape[1], shape[2]);
                    let da = slot(grads, *a, val(*a).numel());
                    for (b, &len) in lengths.iter().enumerate() {
                        let c = T::one() / T::of(len as f64);
                        let gb = &g[b * d..(b + 1) * d];
                        for p in 0..len {
                            axpy(c, gb, &mut da[(b * l + p) * d..][..d]);
                        }
                    }
                }
            }
        }
    }
}

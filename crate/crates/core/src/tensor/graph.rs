use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Square-kernel convolution geometry for [`Graph::im2col`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sin(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Expand(Var),
    Im2Col {
        x: Var,
        geom: Conv2dGeometry,
    },
    Upsample2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are stored in creation order, so the
/// reverse of that order visits every node after all of its consumers.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        s[ax] = s[ax + 1] * shape[ax + 1];
    }
    s
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// offset computed with `src_strides`.
fn for_each_offset(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for flat in 0..numel {
        f(flat, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            src -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, x: Var) -> Option<&[T]> {
        self.grads[x.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Row-wise argmax of the last axis. Not differentiable: callers that
    /// feed the result back into the graph get no gradient through it.
    pub fn argmax_rows(&self, x: Var) -> Vec<usize> {
        self.value(x).argmax_rows()
    }

    // ---- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[bi * m * k..(bi + 1) * m * k],
                false,
                &db[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn check_trailing(&self, name: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(name, sa, sb));
        }
        Ok(sb.iter().product())
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (bias addition, additive masks).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let block = self.check_trailing("add_trailing", a, b)?;
        let bias = self.value(b).data();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(block) {
            add_into(chunk, bias);
        }
        Ok(self.push(value, Op::AddTrailing(a, b), &[a, b]))
    }

    /// `a * b` with the same trailing broadcast rule as [`Graph::add_trailing`].
    pub fn mul_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let block = self.check_trailing("mul_trailing", a, b)?;
        let gain = self.value(b).data();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(block) {
            chunk.iter_mut().zip(gain).for_each(|(v, &g)| *v *= g);
        }
        Ok(self.push(value, Op::MulTrailing(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = scale * *v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(value, op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.map(x, |v| v.sin(), Op::Sin(x))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let d = value.last_dim();
        for row in value.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits_r)[targets_r]`, with the
    /// log-softmax fused in. Every row counts, padding included.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let value = self.value(logits);
        let k = value.last_dim();
        let rows = value.numel() / k.max(1);
        if rows != targets.len() {
            return Err(shape_err("cross_entropy_mean", value.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: bad,
                bound: k,
            });
        }
        let mut probs = value.data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let log_z = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += log_z - row[t];
            row.iter_mut().for_each(|v| *v = (*v - log_z).exp());
        }
        let loss = total / T::lit(rows as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        let d = value.last_dim();
        let inv_d = T::lit(1.0 / d as f64);
        let eps = T::lit(eps);
        let mut rstd = Vec::with_capacity(value.numel() / d.max(1));
        for row in value.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        self.push(value, Op::LayerNorm { x, rstd }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(total), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", shape, perm));
        }
        let value = permute_tensor(self.value(x), perm);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(shape_err("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(value, op, parts))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Row lookup into a `[K, d]` table, giving `[indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(shape_err("gather", t.shape(), &[indices.len()]));
        }
        let (k, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(Error::Index {
                    what: "embedding row",
                    index: i,
                    bound: k,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    /// Broadcasts extent-1 axes of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let valid = src_shape.len() == shape.len() && src_shape.iter().zip(shape).all(|(&s, &t)| s == t || s == 1);
        if !valid {
            return Err(shape_err("expand", &src_shape, shape));
        }
        let src_strides = broadcast_strides(&src_shape);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); shape.iter().product()];
        for_each_offset(shape, &src_strides, |flat, off| data[flat] = src[off]);
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Expand(x), &[x]))
    }

    /// Unfolds `[B,H,W,C]` patches into rows of a `[B*Ho*Wo, k*k*C]` matrix,
    /// ordered (ky, kx, c) within each row. Out-of-image taps read zero.
    pub fn im2col(&mut self, x: Var, geom: Conv2dGeometry) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || geom.kernel == 0 || geom.stride == 0 {
            return Err(shape_err("im2col", &s, &[geom.kernel, geom.stride]));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h + 2 * geom.padding < geom.kernel || w + 2 * geom.padding < geom.kernel {
            return Err(shape_err("im2col", &s, &[geom.kernel, geom.stride]));
        }
        let (ho, wo) = (geom.output_extent(h), geom.output_extent(w));
        let k = geom.kernel;
        let cols = k * k * c;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); b * ho * wo * cols];
        im2col_visit(b, h, w, c, geom, |row_off, src_off| {
            data[row_off..row_off + c].copy_from_slice(&src[src_off..src_off + c]);
        });
        let value = Tensor::new(vec![b * ho * wo, cols], data)?;
        Ok(self.push(value, Op::Im2Col { x, geom }, &[x]))
    }

    /// Nearest-neighbour 2x upsampling of `[B,H,W,C]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2", &s, &[]));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * 4 * h * w * c);
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let off = ((bi * h + y / 2) * w + xx / 2) * c;
                    data.extend_from_slice(&src[off..off + c]);
                }
            }
        }
        let value = Tensor::new(vec![b, 2 * h, 2 * w, c], data)?;
        Ok(self.push(value, Op::Upsample2(x), &[x]))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Populates leaf gradients of `loss` by the chain rule. Repeated calls
    /// accumulate into the stored gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
            } else {
                self.propagate(i, &g, &mut pending);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], pending: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Gradient buffer of a parent, or None when it needs no gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(pending[v.0].get_or_insert_with(|| vec![T::zero(); n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if let Some(ga) = slot!(*a) {
                    T::gemm(m, n, k, g, false, vb.data(), true, ga, true);
                }
                if let Some(gb) = slot!(*b) {
                    T::gemm(k, m, n, va.data(), true, g, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = out.shape()[2];
                let (da, db) = (va.data(), vb.data());
                if let Some(ga) = slot!(*a) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &db[bi * k * n..(bi + 1) * k * n];
                        // dA = dC * op(B)^T
                        T::gemm(
                            m,
                            n,
                            k,
                            gs,
                            false,
                            bs,
                            !trans_b,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &da[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // B is [n,k]: dB = dC^T * A
                            T::gemm(n, m, k, gs, true, as_, false, dst, true);
                        } else {
                            T::gemm(k, m, n, as_, true, gs, false, dst, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = slot!(*a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::AddTrailing(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    let block = gb.len();
                    for chunk in g.chunks(block) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::MulTrailing(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let block = vb.len();
                if let Some(ga) = slot!(*a) {
                    for (gchunk, dchunk) in g.chunks(block).zip(ga.chunks_mut(block)) {
                        for ((d, &s), &y) in dchunk.iter_mut().zip(gchunk).zip(vb) {
                            *d += s * y;
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (gchunk, achunk) in g.chunks(block).zip(va.chunks(block)) {
                        for ((d, &s), &x) in gb.iter_mut().zip(gchunk).zip(achunk) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *scale);
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * y * (T::one() - y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        if y > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sin(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = slot!(*x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *d += s * v.cos();
                    }
                }
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                if let Some(gx) = slot!(*x) {
                    for ((dst, gs), ys) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)) {
                        let dot = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>();
                        for ((o, &gv), &y) in dst.iter_mut().zip(gs).zip(ys) {
                            *o += y * (gv - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(gl) = slot!(*logits) {
                    let k = probs.len() / targets.len().max(1);
                    let scale = g[0] / T::lit(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * k..(r + 1) * k];
                        for (j, d) in row.iter_mut().enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *d += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let d = out.last_dim();
                let inv_d = T::lit(1.0 / d as f64);
                if let Some(gx) = slot!(*x) {
                    for (((dst, gs), ys), &r) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)).zip(rstd) {
                        let mean_g = gs.iter().copied().sum::<T>() * inv_d;
                        let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for ((o, &gv), &y) in dst.iter_mut().zip(gs).zip(ys) {
                            *o += r * (gv - mean_g - y * mean_gy);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot!(*x) {
                    let s = g[0] / T::lit(gx.len() as f64);
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = slot!(*x) {
                    // Scatter each output element back to its source offset.
                    let in_strides = strides(self.shape(*x));
                    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    for_each_offset(out.shape(), &src_strides, |flat, off| gx[off] += g[flat]);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if let Some(gp) = slot!(p) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + len];
                            add_into(&mut gp[o * len..(o + 1) * len], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.shape(*x);
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len = out.shape()[*axis] * inner;
                let full = src_shape[*axis];
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut gx[base..base + len], &g[o * len..(o + 1) * len]);
                    }
                }
            }
            Op::Gather { table, indices } => {
                let d = out.last_dim();
                if let Some(gt) = slot!(*table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(&mut gt[idx * d..(idx + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Expand(x) => {
                let src_strides = broadcast_strides(self.shape(*x));
                if let Some(gx) = slot!(*x) {
                    for_each_offset(out.shape(), &src_strides, |flat, off| gx[off] += g[flat]);
                }
            }
            Op::Im2Col { x, geom } => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                if let Some(gx) = slot!(*x) {
                    im2col_visit(b, h, w, c, *geom, |row_off, src_off| {
                        add_into(&mut gx[src_off..src_off + c], &g[row_off..row_off + c]);
                    });
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                if let Some(gx) = slot!(*x) {
                    let mut src = 0;
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let off = ((bi * h + y / 2) * w + xx / 2) * c;
                                add_into(&mut gx[off..off + c], &g[src..src + c]);
                                src += c;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape)
        .map(|(s, &e)| if e == 1 { 0 } else { s })
        .collect()
}

fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut data = Vec::with_capacity(src.len());
    for_each_offset(&out_shape, &src_strides, |_, off| data.push(src[off]));
    Tensor::new(out_shape, data).expect("permutation preserves element count")
}

/// Calls `f(dst_offset, src_offset)` for every in-bounds tap, where both
/// offsets address a run of `c` contiguous channels.
fn im2col_visit(b: usize, h: usize, w: usize, c: usize, geom: Conv2dGeometry, mut f: impl FnMut(usize, usize)) {
    let (ho, wo) = (geom.output_extent(h), geom.output_extent(w));
    let k = geom.kernel;
    let cols = k * k * c;
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * cols;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        f(row + (ky * k + kx) * c, src);
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[1, 1], &[2.0]));
        let b = g.constant(t(&[1, 1], &[3.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (random(&mut rng, &[4, 5]), random(&mut rng, &[5, 3]));
        let mut expected = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                for l in 0..5 {
                    expected[i * 3 + j] += a.get(&[i, l]) * b.get(&[l, j]);
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[4.2, 4.2, 4.2]));
        let y = g.softmax(x);
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[0.0, 2f64.ln()]));
        let y = g.softmax(x);
        let d = g.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[3, 6]);
        let shifted = Tensor::from_fn(&[3, 6], |i| x.data()[i] + 100.0);
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(shifted));
        let (sa, sb) = (g.softmax(a), g.softmax(b));
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[4, 37]));
        let l = g.cross_entropy_mean(logits, &[0, 5, 36, 36]).unwrap();
        assert!((g.value(l).item() - 37f64.ln()).abs() < 1e-12);
        assert!((37f64.ln() - 3.6109).abs() < 1e-4);

        let mut sat = vec![0.0; 5];
        sat[2] = 1000.0;
        let logits = g.constant(t(&[1, 5], &sat));
        let l = g.cross_entropy_mean(logits, &[2]).unwrap();
        assert!(g.value(l).item() < 1e-6);

        // Hand evaluation: row 0 -> -(3 - ln(e + e^2 + e^3)), row 1 -> ln 3.
        let logits = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let l = g.cross_entropy_mean(logits, &[2, 0]).unwrap();
        let e = std::f64::consts::E;
        let row0 = (e + e * e + e * e * e).ln() - 3.0;
        let expected = (row0 + 3f64.ln()) / 2.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.7531).abs() < 1e-4);

        let err = g.cross_entropy_mean(logits, &[2, 3]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 3, bound: 3, .. }));
    }

    #[test]
    fn backward_product_and_quadratic() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(5.0));
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert_eq!(g.grad(y).unwrap(), &[3.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -2.0]));
        let y = g.tanh(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), once.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn permute_and_narrow_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).get(&[3, 1, 2]), g.value(x).get(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));

        let a = g.narrow(x, 1, 0, 1).unwrap();
        let b = g.narrow(x, 1, 1, 2).unwrap();
        let joined = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(joined), g.value(x));
    }

    #[test]
    fn expand_broadcasts_unit_axes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 1], &[1.0, 2.0]));
        let e = g.expand(x, &[2, 2, 3]).unwrap();
        assert_eq!(
            g.value(e).data(),
            &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0]
        );
        assert!(g.expand(x, &[2, 3, 3]).is_err());
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, h, w, c, co) = (2, 5, 6, 3, 4);
        let geom = Conv2dGeometry {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x = random(&mut rng, &[b, h, w, c]);
        let wt = random(&mut rng, &[9 * c, co]);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let vw = g.constant(wt.clone());
        let cols = g.im2col(vx, geom).unwrap();
        let y = g.matmul(cols, vw).unwrap();
        let (ho, wo) = (geom.output_extent(h), geom.output_extent(w));
        assert_eq!((ho, wo), (3, 3));
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    acc += x.get(&[bi, iy as usize, ix as usize, ci])
                                        * wt.get(&[(ky * 3 + kx) * c + ci, o]);
                                }
                            }
                        }
                        let got = g.value(y).get(&[(bi * ho + oy) * wo + ox, o]);
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn repeated_backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let build = |rng: &mut ChaCha8Rng| {
            let mut g = Graph::<f32>::new();
            let a = g.param(Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0)));
            let b = g.param(Tensor::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0)));
            let m = g.matmul(a, b).unwrap();
            let s = g.softmax(m);
            let l = g.cross_entropy_mean(s, &[0, 4, 2]).unwrap();
            (g, a, b, l)
        };
        let (mut g, a, b, l) = build(&mut rng);
        g.backward(l).unwrap();
        let first = (g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec());
        for _ in 0..3 {
            g.zero_grad();
            g.backward(l).unwrap();
            assert_eq!(g.grad(a).unwrap(), first.0.as_slice());
            assert_eq!(g.grad(b).unwrap(), first.1.as_slice());
        }
    }
}

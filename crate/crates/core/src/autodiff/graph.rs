use crate::scalar::{gemm, Scalar};

use super::{AutodiffError, Tensor};

/// Handle to a node of a [`Graph`]. Ids are creation indices, so every input
/// of a node has a smaller id than the node itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        /// im2col matrix `[n*h*w, kh*kw*c_in]`, kept for the kernel gradient.
        cols: Vec<T>,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Matmul(NodeId, NodeId),
    Gap(NodeId),
    Softmax(NodeId),
    Log {
        input: NodeId,
        floor: T,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    L2Normalize {
        input: NodeId,
        outer: usize,
        axis_len: usize,
        inner: usize,
        norms: Vec<T>,
    },
    PairwiseSqDist(NodeId, NodeId),
    Rows {
        input: NodeId,
        start: usize,
    },
    SortRows {
        input: NodeId,
        perm: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Relu(_) => "relu",
            Op::Dense { .. } => "dense",
            Op::Matmul(..) => "matmul",
            Op::Gap(_) => "gap",
            Op::Softmax(_) => "softmax",
            Op::Log { .. } => "log",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::Rows { .. } => "rows",
            Op::SortRows { .. } => "sort_rows",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    /// Some `requires_grad` leaf is reachable through the inputs.
    needs_grad: bool,
    requires_grad: bool,
}

/// Gradients of a scalar output with respect to the `requires_grad` leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Computation graph; see the module docs.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

fn mismatch(node: usize, op: &'static str, expected: &[usize], actual: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        node,
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node so the graph can record a fresh forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    fn push(
        &mut self,
        op: Op<T>,
        value: Tensor<T>,
        inputs: &[NodeId],
    ) -> Result<NodeId, AutodiffError> {
        let id = self.next_id();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            requires_grad: false,
        });
        self.backward_done = false;
        Ok(NodeId(id))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId, AutodiffError> {
        let id = self.next_id();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                node: id,
                op: "leaf",
            });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: requires_grad,
            requires_grad,
        });
        self.backward_done = false;
        Ok(NodeId(id))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId, AutodiffError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId, AutodiffError> {
        self.leaf(value, false)
    }

    /// Same-padded, stride-1 convolution. `input` is `[n, h, w, c_in]`,
    /// `kernel` is `[kh, kw, c_in, c_out]` with odd `kh`/`kw`, `bias` is `[c_out]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        for id in [input, kernel, bias] {
            self.check(id)?;
        }
        let id = self.next_id();
        let xs = self.nodes[input.0].value.shape().to_vec();
        let ks = self.nodes[kernel.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape().to_vec();
        if ks.len() != 4 || ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(mismatch(id, "conv2d", &[3, 3, 1, 1], &ks));
        }
        let (kh, kw, c_in, c_out) = (ks[0], ks[1], ks[2], ks[3]);
        if xs.len() != 4 || xs[3] != c_in {
            let n = xs.first().copied().unwrap_or(1);
            return Err(mismatch(id, "conv2d", &[n, kh, kw, c_in], &xs));
        }
        if bs != [c_out] {
            return Err(mismatch(id, "conv2d", &[c_out], &bs));
        }
        let (n, h, w) = (xs[0], xs[1], xs[2]);
        let x = self.nodes[input.0].value.data();
        let kdim = kh * kw * c_in;
        let rows = n * h * w;
        let mut cols = vec![T::zero(); rows * kdim];
        im2col(x, n, h, w, c_in, kh, kw, &mut cols);
        let mut out = vec![T::zero(); rows * c_out];
        let b = self.nodes[bias.0].value.data();
        for r in 0..rows {
            out[r * c_out..(r + 1) * c_out].copy_from_slice(b);
        }
        gemm(
            rows,
            kdim,
            c_out,
            &cols,
            false,
            self.nodes[kernel.0].value.data(),
            false,
            &mut out,
            true,
        );
        let value = Tensor::raw(vec![n, h, w, c_out], out);
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            },
            value,
            &[input, kernel, bias],
        )
    }

    /// 2×2 max-pool with stride 2 over `[n, h, w, c]`; ties route to the first
    /// element in row-major window order.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(input)?;
        let id = self.next_id();
        let xs = self.nodes[input.0].value.shape().to_vec();
        if xs.len() != 4 || xs[1] % 2 != 0 || xs[2] % 2 != 0 {
            let mut even = xs.clone();
            even.resize(4, 2);
            even[1] += even[1] % 2;
            even[2] += even[2] % 2;
            return Err(mismatch(id, "max_pool2", &even, &xs));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.nodes[input.0].value.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = |dy: usize, dx: usize| ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                    let corners = [base(0, 0), base(0, 1), base(1, 0), base(1, 1)];
                    for ch in 0..c {
                        let mut best = corners[0] + ch;
                        for &corner in &corners[1..] {
                            if x[corner + ch] > x[best] {
                                best = corner + ch;
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::raw(vec![n, oh, ow, c], out);
        self.push(Op::MaxPool2 { input, argmax }, value, &[input])
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        self.push(Op::Relu(input), value, &[input])
    }

    /// Affine map `x·W + b` with `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn dense(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        for id in [input, weight, bias] {
            self.check(id)?;
        }
        let id = self.next_id();
        let xs = self.nodes[input.0].value.shape().to_vec();
        let ws = self.nodes[weight.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape().to_vec();
        if ws.len() != 2 {
            return Err(mismatch(
                id,
                "dense",
                &[xs.last().copied().unwrap_or(1), 1],
                &ws,
            ));
        }
        if xs.len() != 2 || xs[1] != ws[0] {
            let n = xs.first().copied().unwrap_or(1);
            return Err(mismatch(id, "dense", &[n, ws[0]], &xs));
        }
        if bs != [ws[1]] {
            return Err(mismatch(id, "dense", &[ws[1]], &bs));
        }
        let (n, d_in, d_out) = (xs[0], ws[0], ws[1]);
        let b = self.nodes[bias.0].value.data();
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        gemm(
            n,
            d_in,
            d_out,
            self.nodes[input.0].value.data(),
            false,
            self.nodes[weight.0].value.data(),
            false,
            &mut out,
            true,
        );
        let value = Tensor::raw(vec![n, d_out], out);
        self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            value,
            &[input, weight, bias],
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let id = self.next_id();
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa.len() != 2 {
            return Err(mismatch(
                id,
                "matmul",
                &[1, sb.first().copied().unwrap_or(1)],
                &sa,
            ));
        }
        if sb.len() != 2 || sb[0] != sa[1] {
            let cols = sb.last().copied().unwrap_or(1);
            return Err(mismatch(id, "matmul", &[sa[1], cols], &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            false,
            &mut out,
            false,
        );
        self.push(Op::Matmul(a, b), Tensor::raw(vec![m, n], out), &[a, b])
    }

    /// Global average pooling `[n, h, w, c] -> [n, c]`.
    pub fn gap(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(input)?;
        let id = self.next_id();
        let xs = self.nodes[input.0].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(mismatch(
                id,
                "gap",
                &[1, 1, 1, xs.last().copied().unwrap_or(1)],
                &xs,
            ));
        }
        let (n, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
        let x = self.nodes[input.0].value.data();
        let scale = T::one() / T::of(hw as f64);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let acc = &mut out[b * c..(b + 1) * c];
            for p in 0..hw {
                let src = &x[(b * hw + p) * c..(b * hw + p + 1) * c];
                for (o, &v) in acc.iter_mut().zip(src) {
                    *o += v;
                }
            }
            acc.iter_mut().for_each(|o| *o *= scale);
        }
        self.push(Op::Gap(input), Tensor::raw(vec![n, c], out), &[input])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        let k = *x.shape().last().unwrap_or(&1);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::raw(x.shape().to_vec(), out);
        self.push(Op::Softmax(input), value, &[input])
    }

    pub fn log(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.log_floor(input, 0.0)
    }

    /// `log(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, input: NodeId, floor: f64) -> Result<NodeId, AutodiffError> {
        self.check(input)?;
        let floor = T::of(floor);
        let x = &self.nodes[input.0].value;
        let data = x.data().iter().map(|&v| v.max(floor).ln()).collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        self.push(Op::Log { input, floor }, value, &[input])
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(mismatch(self.next_id(), name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::raw(va.shape().to_vec(), data);
        self.push(op, value, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let x = &self.nodes[a.0].value;
        let value = Tensor::raw(x.shape().to_vec(), x.data().iter().map(|&v| -v).collect());
        self.push(Op::Neg(a), value, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let factor = T::of(factor);
        let x = &self.nodes[a.0].value;
        let value = Tensor::raw(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v * factor).collect(),
        );
        self.push(Op::Scale(a, factor), value, &[a])
    }

    /// Sum of all elements (fixed index order) as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let total = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::Sum(a), Tensor::scalar(total), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        let x = self.nodes[a.0].value.data();
        let total = x.iter().fold(T::zero(), |acc, &v| acc + v);
        let value = Tensor::scalar(total / T::of(x.len() as f64));
        self.push(Op::Mean(a), value, &[a])
    }

    /// Scale every fibre along `axis` to unit Euclidean norm. A zero fibre is an error.
    pub fn l2_normalize(&mut self, input: NodeId, axis: usize) -> Result<NodeId, AutodiffError> {
        self.check(input)?;
        let id = self.next_id();
        let xs = self.nodes[input.0].value.shape().to_vec();
        if axis >= xs.len() {
            let mut want = xs.clone();
            want.resize(axis + 1, 1);
            return Err(mismatch(id, "l2_normalize", &want, &xs));
        }
        let outer: usize = xs[..axis].iter().product();
        let axis_len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let x = self.nodes[input.0].value.data();
        let mut out = x.to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * axis_len + a) * inner + i;
                let sq = (0..axis_len).fold(T::zero(), |acc, a| acc + x[at(a)] * x[at(a)]);
                let norm = sq.sqrt();
                if norm == T::zero() {
                    return Err(AutodiffError::ZeroNorm { node: id });
                }
                for a in 0..axis_len {
                    out[at(a)] = x[at(a)] / norm;
                }
                norms.push(norm);
            }
        }
        let value = Tensor::raw(xs, out);
        self.push(
            Op::L2Normalize {
                input,
                outer,
                axis_len,
                inner,
                norms,
            },
            value,
            &[input],
        )
    }

    /// Squared Euclidean distances between the rows of `a: [n, d]` and `b: [k, d]`.
    pub fn pairwise_sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let id = self.next_id();
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa.len() != 2 {
            return Err(mismatch(
                id,
                "pairwise_sq_dist",
                &[1, sb.last().copied().unwrap_or(1)],
                &sa,
            ));
        }
        if sb.len() != 2 || sb[1] != sa[1] {
            let k = sb.first().copied().unwrap_or(1);
            return Err(mismatch(id, "pairwise_sq_dist", &[k, sa[1]], &sb));
        }
        let (n, k, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let ai = &va[i * d..(i + 1) * d];
            for j in 0..k {
                let bj = &vb[j * d..(j + 1) * d];
                let dist = ai.iter().zip(bj).fold(T::zero(), |acc, (&x, &y)| {
                    let diff = x - y;
                    acc + diff * diff
                });
                out.push(dist);
            }
        }
        self.push(
            Op::PairwiseSqDist(a, b),
            Tensor::raw(vec![n, k], out),
            &[a, b],
        )
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn rows(
        &mut self,
        input: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AutodiffError> {
        self.check(input)?;
        let id = self.next_id();
        let x = &self.nodes[input.0].value;
        let xs = x.shape().to_vec();
        if xs.is_empty() || len == 0 || start + len > xs[0] {
            let mut want = xs.clone();
            if want.is_empty() {
                want.push(start + len);
            } else {
                want[0] = want[0].max(start + len);
            }
            return Err(mismatch(id, "rows", &want, &xs));
        }
        let cols = x.len() / xs[0];
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        let mut shape = xs;
        shape[0] = len;
        self.push(
            Op::Rows { input, start },
            Tensor::raw(shape, data),
            &[input],
        )
    }

    /// Sort each row of a `[n, k]` matrix ascending (stable in index order).
    pub fn sort_rows(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(input)?;
        let id = self.next_id();
        let x = &self.nodes[input.0].value;
        let xs = x.shape().to_vec();
        if xs.len() != 2 {
            return Err(mismatch(
                id,
                "sort_rows",
                &[1, xs.last().copied().unwrap_or(1)],
                &xs,
            ));
        }
        let k = xs[1];
        let mut perm = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(k) {
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&i, &j| row[i].partial_cmp(&row[j]).expect("finite values"));
            out.extend(idx.iter().map(|&i| row[i]));
            perm.extend(idx);
        }
        self.push(Op::SortRows { input, perm }, Tensor::raw(xs, out), &[input])
    }

    /// Reverse pass from a scalar `output`. Gradients of all `requires_grad`
    /// leaves are returned; fan-out contributions accumulate additively.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients<T>, AutodiffError> {
        self.check(output)?;
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let out_shape = self.nodes[output.0].value.shape();
        if self.nodes[output.0].value.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: out_shape.to_vec(),
            });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            if node.requires_grad {
                result[idx] = Some(Tensor::raw(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { grads: result })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |id: NodeId| &nodes[id.0].value;
        let wants = |id: NodeId| nodes[id.0].needs_grad;
        // Gradient buffer of an input, zero-initialised on first use.
        fn slot<'a, T: Scalar>(
            grads: &'a mut [Option<Vec<T>>],
            id: NodeId,
            len: usize,
        ) -> &'a mut Vec<T> {
            grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            } => {
                let ks = val(*kernel).shape();
                let (kh, kw, c_in, c_out) = (ks[0], ks[1], ks[2], ks[3]);
                let kdim = kh * kw * c_in;
                let rows = g.len() / c_out;
                if wants(*kernel) {
                    let dk = slot(grads, *kernel, kdim * c_out);
                    gemm(kdim, rows, c_out, cols, true, g, false, dk, true);
                }
                if wants(*bias) {
                    let db = slot(grads, *bias, c_out);
                    for r in 0..rows {
                        for (d, &v) in db.iter_mut().zip(&g[r * c_out..(r + 1) * c_out]) {
                            *d += v;
                        }
                    }
                }
                if wants(*input) {
                    let xs = val(*input).shape();
                    let (n, h, w) = (xs[0], xs[1], xs[2]);
                    let mut dcols = vec![T::zero(); rows * kdim];
                    gemm(
                        rows,
                        c_out,
                        kdim,
                        g,
                        false,
                        val(*kernel).data(),
                        true,
                        &mut dcols,
                        false,
                    );
                    let dx = slot(grads, *input, n * h * w * c_in);
                    col2im(&dcols, n, h, w, c_in, kh, kw, dx);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let dx = slot(grads, *input, val(*input).len());
                for (&src, &v) in argmax.iter().zip(g) {
                    dx[src] += v;
                }
            }
            Op::Relu(input) => {
                let x = val(*input).data();
                let dx = slot(grads, *input, x.len());
                for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let ws = val(*weight).shape();
                let (d_in, d_out) = (ws[0], ws[1]);
                let n = g.len() / d_out;
                if wants(*input) {
                    let dx = slot(grads, *input, n * d_in);
                    gemm(
                        n,
                        d_out,
                        d_in,
                        g,
                        false,
                        val(*weight).data(),
                        true,
                        dx,
                        true,
                    );
                }
                if wants(*weight) {
                    let dw = slot(grads, *weight, d_in * d_out);
                    gemm(d_in, n, d_out, val(*input).data(), true, g, false, dw, true);
                }
                if wants(*bias) {
                    let db = slot(grads, *bias, d_out);
                    for row in g.chunks(d_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), true, da, true);
                }
                if wants(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a).data(), true, g, false, db, true);
                }
            }
            Op::Gap(input) => {
                let xs = val(*input).shape();
                let (n, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let scale = T::one() / T::of(hw as f64);
                let dx = slot(grads, *input, n * hw * c);
                for b in 0..n {
                    let gb = &g[b * c..(b + 1) * c];
                    for p in 0..hw {
                        let dst = &mut dx[(b * hw + p) * c..(b * hw + p + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(gb) {
                            *d += v * scale;
                        }
                    }
                }
            }
            Op::Softmax(input) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                let dx = slot(grads, *input, y.len());
                for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::Log { input, floor } => {
                let x = val(*input).data();
                let dx = slot(grads, *input, x.len());
                for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                    if xv > *floor {
                        *d += gv / xv;
                    }
                }
            }
            Op::Add(a, b) => {
                for (id, sign) in [(*a, T::one()), (*b, T::one())] {
                    if wants(id) {
                        let d = slot(grads, id, g.len());
                        d.iter_mut().zip(g).for_each(|(d, &v)| *d += sign * v);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (id, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if wants(id) {
                        let d = slot(grads, id, g.len());
                        d.iter_mut().zip(g).for_each(|(d, &v)| *d += sign * v);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(*a, *b), (*b, *a)] {
                    if wants(id) {
                        let o = val(other).data();
                        let d = slot(grads, id, g.len());
                        for ((d, &v), &ov) in d.iter_mut().zip(g).zip(o) {
                            *d += v * ov;
                        }
                    }
                }
            }
            Op::Neg(a) => {
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
            }
            Op::Scale(a, factor) => {
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(d, &v)| *d += *factor * v);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                slot(grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let share = g[0] / T::of(n as f64);
                slot(grads, *a, n).iter_mut().for_each(|d| *d += share);
            }
            Op::L2Normalize {
                input,
                outer,
                axis_len,
                inner,
                norms,
            } => {
                let y = node.value.data();
                let dx = slot(grads, *input, y.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |a: usize| (o * axis_len + a) * inner + i;
                        let norm = norms[o * inner + i];
                        let dot =
                            (0..*axis_len).fold(T::zero(), |acc, a| acc + y[at(a)] * g[at(a)]);
                        for a in 0..*axis_len {
                            dx[at(a)] += (g[at(a)] - y[at(a)] * dot) / norm;
                        }
                    }
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (n, d) = (va.shape()[0], va.shape()[1]);
                let k = vb.shape()[0];
                let two = T::of(2.0);
                if wants(*a) {
                    let da = slot(grads, *a, n * d);
                    for i in 0..n {
                        for j in 0..k {
                            let w = two * g[i * k + j];
                            for c in 0..d {
                                da[i * d + c] += w * (va.data()[i * d + c] - vb.data()[j * d + c]);
                            }
                        }
                    }
                }
                if wants(*b) {
                    let db = slot(grads, *b, k * d);
                    for i in 0..n {
                        for j in 0..k {
                            let w = two * g[i * k + j];
                            for c in 0..d {
                                db[j * d + c] -= w * (va.data()[i * d + c] - vb.data()[j * d + c]);
                            }
                        }
                    }
                }
            }
            Op::Rows { input, start } => {
                let x = val(*input);
                let cols = x.len() / x.shape()[0];
                let dx = slot(grads, *input, x.len());
                for (d, &v) in dx[start * cols..].iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::SortRows { input, perm } => {
                let k = node.value.shape()[1];
                let dx = slot(grads, *input, g.len());
                for (pos, (&src, &v)) in perm.iter().zip(g).enumerate() {
                    let row = pos / k;
                    dx[row * k + src] += v;
                }
            }
        }
    }

    /// Discrete branch choices made during the forward pass: ReLU signs,
    /// max-pool winners, sort orders and active log floors. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(input) => {
                    sig.push(idx as u64);
                    pack_bits(
                        &mut sig,
                        self.nodes[input.0]
                            .value
                            .data()
                            .iter()
                            .map(|&v| v > T::zero()),
                    );
                }
                Op::Log { input, floor } => {
                    sig.push(idx as u64);
                    pack_bits(
                        &mut sig,
                        self.nodes[input.0].value.data().iter().map(|&v| v > *floor),
                    );
                }
                Op::MaxPool2 { argmax, .. } => {
                    sig.push(idx as u64);
                    sig.extend(argmax.iter().map(|&a| a as u64));
                }
                Op::SortRows { perm, .. } => {
                    sig.push(idx as u64);
                    sig.extend(perm.iter().map(|&p| p as u64));
                }
                _ => {}
            }
        }
        sig
    }
}

fn pack_bits(sig: &mut Vec<u64>, bits: impl Iterator<Item = bool>) {
    let mut word = 0u64;
    let mut used = 0;
    for bit in bits {
        word = (word << 1) | bit as u64;
        used += 1;
        if used == 64 {
            sig.push(word);
            word = 0;
            used = 0;
        }
    }
    if used > 0 {
        sig.push(word);
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    cols: &mut [T],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let kdim = kh * kw * c;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kdim;
                for ky in 0..kh {
                    let iy = y + ky;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    let iy = iy - ph;
                    for kx in 0..kw {
                        let ix = xx + kx;
                        if ix < pw || ix - pw >= w {
                            continue;
                        }
                        let ix = ix - pw;
                        let src = ((b * h + iy) * w + ix) * c;
                        let dst = row + (ky * kw + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    dx: &mut [T],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let kdim = kh * kw * c;
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kdim;
                for ky in 0..kh {
                    let iy = y + ky;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    let iy = iy - ph;
                    for kx in 0..kw {
                        let ix = xx + kx;
                        if ix < pw || ix - pw >= w {
                            continue;
                        }
                        let ix = ix - pw;
                        let dst = ((b * h + iy) * w + ix) * c;
                        let src = row + (ky * kw + kx) * c;
                        for (d, &v) in dx[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

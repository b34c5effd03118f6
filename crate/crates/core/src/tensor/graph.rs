use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, T),
    GradScale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    LogSoftmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Blend {
        a: Var,
        b: Var,
        keep: Vec<bool>,
    },
    Nll {
        logp: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(UnaryOp::Relu, _) => "relu",
            Op::Unary(UnaryOp::Tanh, _) => "tanh",
            Op::Unary(UnaryOp::Sigmoid, _) => "sigmoid",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::GradScale(..) => "grad_scale",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::LogSoftmax(_) => "log_softmax",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Blend { .. } => "blend",
            Op::Nll { .. } => "nll",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::GradScale(x, _)
            | Op::LogSoftmax(x)
            | Op::MaskedSoftmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Binary(_, a, b) | Op::MatMul { a, b, .. } | Op::Blend { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Permute { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Nll { logp, .. } => vec![*logp],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations recorded in creation order.
///
/// Inputs of a node always have a smaller index than the node itself, so the
/// reverse creation order is a valid topological order for backpropagation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    inference: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            inference: false,
        }
    }

    /// A graph that never records gradients (evaluation and decoding).
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::new()
        }
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

    /// Gradient accumulated on `v` by the last call(s) to [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.inference,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.bound.insert(id, v);
        v
    }

    /// Parameter leaves bound in this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let inputs = op.inputs();
        if cfg!(debug_assertions)
            && !value.all_finite()
            && inputs.iter().all(|i| self.nodes[i.0].value.all_finite())
        {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| match op {
                UnaryOp::Relu => v.max(T::zero()),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Sigmoid => sigmoid(v),
            })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(value, Op::Unary(op, x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    /// Exact-shape elementwise op, or scalar broadcast when one side has a
    /// single element.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.numel() == 1 {
            va.shape().to_vec()
        } else if va.numel() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(Error::Shape {
                op: "elementwise",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        let n = shape.iter().product::<usize>();
        let (da, db) = (va.data(), vb.data());
        let at = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data = (0..n)
            .map(|i| {
                let (x, y) = (at(da, i), at(db, i));
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                }
            })
            .collect();
        self.push(Tensor::new(shape, data)?, Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(value, Op::Scale(x, c))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass.
    pub fn grad_scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::GradScale(x, factor))
    }

    // ---- products ----------------------------------------------------------

    /// Matrix product over the last two axes. `a` is `[..., m, k]`; `b` is
    /// `[..., k, n]` (or `[..., n, k]` with `trans_b`) with the same leading
    /// axes.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &db[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `y = x·Wᵀ + bias` applied over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let inp = *sx.last().unwrap_or(&1);
        if sw.len() != 2 || sw[1] != inp || sx.is_empty() {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let out = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [out] {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![out],
                });
            }
        }
        let rows = self.value(x).numel() / inp.max(1);
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            rows,
            inp,
            out,
            T::one(),
            self.value(x).data(),
            inp as isize,
            1,
            self.value(w).data(),
            1,
            inp as isize,
            beta,
            &mut y,
        );
        let mut shape = sx;
        *shape.last_mut().expect("non-empty") = out;
        let value = Tensor::new(shape, y)?;
        self.push(
            value,
            Op::Linear {
                x,
                w,
                bias,
                rows,
                inp,
                out,
            },
        )
    }

    // ---- normalisation -----------------------------------------------------

    /// Numerically stable log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let v = src.last_dim();
        if v == 0 {
            return Err(Error::contract("log_softmax over an empty axis"));
        }
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(v) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|z| *z -= lse);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(value, Op::LogSoftmax(x))
    }

    /// Softmax over the trailing axis where `keep[i] == false` entries get a
    /// score of −∞. `keep` has the same number of elements as `x`.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let src = self.value(x);
        if keep.len() != src.numel() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: src.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let v = src.last_dim();
        let mut out = src.data().to_vec();
        for (row, mask) in out.chunks_mut(v).zip(keep.chunks(v)) {
            if row.iter().zip(mask).any(|(z, &k)| k && !z.is_finite()) {
                return Err(Error::NonFinite { op: "masked_softmax" });
            }
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(&z, _)| z)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::contract(
                    "attention mask disables every key for a query row",
                ));
            }
            let mut total = T::zero();
            for (z, &k) in row.iter_mut().zip(mask) {
                *z = if k { (*z - max).exp() } else { T::zero() };
                total += *z;
            }
            row.iter_mut().for_each(|z| *z = *z / total);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(value, Op::MaskedSoftmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: src.shape().to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let rows = src.numel() / d;
        let mut xhat = Vec::with_capacity(src.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    // ---- indexing and layout -----------------------------------------------

    /// Gathers rows of `table[V×d]`; output shape is `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: t.shape().to_vec(),
                rhs: ids_shape.to_vec(),
            });
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embedding ids",
                lhs: ids_shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { id, size: vocab });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != shape.len() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape.to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(src.data(), shape, perm);
        let value = Tensor::new(out_shape, data)?;
        self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::contract("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let dim = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Row-wise select over the trailing axis: row `r` comes from `a` when
    /// `keep[r]`, otherwise from `b`.
    pub fn blend(&mut self, a: Var, b: Var, keep: &[bool]) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.last_dim();
        if va.shape() != vb.shape() || keep.len() * d != va.numel() {
            return Err(Error::Shape {
                op: "blend",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(va.numel());
        for (r, &k) in keep.iter().enumerate() {
            let src = if k { va.data() } else { vb.data() };
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push(
            value,
            Op::Blend {
                a,
                b,
                keep: keep.to_vec(),
            },
        )
    }

    /// Zeroes rows where `keep[r]` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let zeros = Tensor::zeros(self.shape(x).to_vec());
        let z = self.constant(zeros);
        self.blend(x, z, keep)
    }

    // ---- reductions --------------------------------------------------------

    /// Mean negative log-likelihood over the rows of `logp[..×V]` that carry
    /// a target.
    pub fn nll(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var> {
        let src = self.value(logp);
        let v = src.last_dim();
        if targets.len() * v != src.numel() {
            return Err(Error::Shape {
                op: "nll",
                lhs: src.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Index { id: t, size: v });
                }
                total -= src.data()[r * v + t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::contract("loss over zero real target tokens"));
        }
        let value = Tensor::scalar(total / T::of(count as f64));
        self.push(
            value,
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                count,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls; intermediate gradients are recomputed each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if self.inference {
            return Err(Error::contract("backward on an inference graph"));
        }
        for node in self.nodes.iter_mut().take(loss.0 + 1) {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0], &[T::one()]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            let contributions = local_grads(before, node, &g);
            node.grad = Some(g);
            for (v, contrib) in contributions {
                if before[v.0].requires_grad {
                    accumulate(&mut before[v.0], &contrib);
                }
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Real>(node: &mut Node<T>, contrib: &[T]) {
    match &mut node.grad {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, &b)| *a += b),
        None => node.grad = Some(contrib.to_vec()),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Gradient contributions of one node to each of its inputs. Inputs that do
/// not require gradients may be skipped.
fn local_grads<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let val = |v: Var| nodes[v.0].value.data();
    let wants = |v: Var| nodes[v.0].requires_grad;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::Unary(op, x) => {
            let xs = val(*x);
            let d = g
                .iter()
                .zip(xs)
                .zip(out)
                .map(|((&gi, &xi), &yi)| match op {
                    UnaryOp::Relu => {
                        if xi > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    }
                    UnaryOp::Tanh => gi * (T::one() - yi * yi),
                    UnaryOp::Sigmoid => gi * yi * (T::one() - yi),
                })
                .collect();
            vec![(*x, d)]
        }
        Op::Binary(op, a, b) => {
            let (da, db) = (val(*a), val(*b));
            let at = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
            let mut ga = vec![T::zero(); da.len()];
            let mut gb = vec![T::zero(); db.len()];
            for (i, &gi) in g.iter().enumerate() {
                let ia = if da.len() == 1 { 0 } else { i };
                let ib = if db.len() == 1 { 0 } else { i };
                match op {
                    BinaryOp::Add => {
                        ga[ia] += gi;
                        gb[ib] += gi;
                    }
                    BinaryOp::Sub => {
                        ga[ia] += gi;
                        gb[ib] -= gi;
                    }
                    BinaryOp::Mul => {
                        ga[ia] += gi * at(db, i);
                        gb[ib] += gi * at(da, i);
                    }
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|&gi| gi * *c).collect())],
        Op::GradScale(x, c) => vec![(*x, g.iter().map(|&gi| gi * *c).collect())],
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (da, db) = (val(*a), val(*b));
            let mut res = Vec::new();
            if wants(*a) {
                // dA = dC · op(B)ᵀ
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..*batch {
                    let bs = &db[i * k * n..(i + 1) * k * n];
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        bs,
                        rsb,
                        csb,
                        T::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                res.push((*a, ga));
            }
            if wants(*b) {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..*batch {
                    let as_ = &da[i * m * k..(i + 1) * m * k];
                    let gs = &g[i * m * n..(i + 1) * m * n];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // dB[n×k] = dCᵀ · A
                        T::gemm(n, m, k, T::one(), gs, 1, n as isize, as_, k as isize, 1, T::zero(), dst);
                    } else {
                        // dB[k×n] = Aᵀ · dC
                        T::gemm(k, m, n, T::one(), as_, 1, k as isize, gs, n as isize, 1, T::zero(), dst);
                    }
                }
                res.push((*b, gb));
            }
            res
        }
        Op::Linear {
            x,
            w,
            bias,
            rows,
            inp,
            out: o,
        } => {
            let (rows, inp, o) = (*rows, *inp, *o);
            let mut res = Vec::new();
            if wants(*x) {
                let mut gx = vec![T::zero(); rows * inp];
                T::gemm(rows, o, inp, T::one(), g, o as isize, 1, val(*w), inp as isize, 1, T::zero(), &mut gx);
                res.push((*x, gx));
            }
            if wants(*w) {
                let mut gw = vec![T::zero(); o * inp];
                T::gemm(o, rows, inp, T::one(), g, 1, o as isize, val(*x), inp as isize, 1, T::zero(), &mut gw);
                res.push((*w, gw));
            }
            if let Some(b) = bias {
                if wants(*b) {
                    let mut gb = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    res.push((*b, gb));
                }
            }
            res
        }
        Op::LogSoftmax(x) => {
            let v = node.value.last_dim();
            let mut gx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(v).zip(out.chunks(v)) {
                let total: T = gr.iter().copied().sum();
                gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * total));
            }
            vec![(*x, gx)]
        }
        Op::MaskedSoftmax(x) => {
            let v = node.value.last_dim();
            let mut gx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(v).zip(out.chunks(v)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
            }
            vec![(*x, gx)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = node.value.last_dim();
            let gam = val(*gamma);
            let inv_d = T::one() / T::of(d as f64);
            let mut gx = Vec::with_capacity(g.len());
            let mut gg = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            for ((gr, hr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for j in 0..d {
                    let dh = gr[j] * gam[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                    gg[j] += gr[j] * hr[j];
                    gbeta[j] += gr[j];
                }
                mean_dh *= inv_d;
                mean_dh_h *= inv_d;
                for j in 0..d {
                    let dh = gr[j] * gam[j];
                    gx.push(r * (dh - mean_dh - hr[j] * mean_dh_h));
                }
            }
            vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
        }
        Op::Embedding { table, ids } => {
            let t = &nodes[table.0].value;
            let d = t.shape()[1];
            let mut gt = vec![T::zero(); t.numel()];
            for (r, &id) in ids.iter().enumerate() {
                gt[id * d..(id + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(a, &b)| *a += b);
            }
            vec![(*table, gt)]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![(*x, permute_data(g, node.value.shape(), &inverse))]
        }
        Op::Slice { x, axis, start } => {
            let src_shape = nodes[x.0].value.shape();
            let (outer, dim, inner) = split_axis(src_shape, *axis);
            let len = node.value.shape()[*axis];
            let mut gx = vec![T::zero(); outer * dim * inner];
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, gx)]
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for &v in inputs {
                let dim = nodes[v.0].value.shape()[*axis];
                let mut gv = Vec::with_capacity(outer * dim * inner);
                for o in 0..outer {
                    let base = o * total * inner + offset * inner;
                    gv.extend_from_slice(&g[base..base + dim * inner]);
                }
                offset += dim;
                res.push((v, gv));
            }
            res
        }
        Op::Blend { a, b, keep } => {
            let d = node.value.last_dim();
            let mut ga = vec![T::zero(); g.len()];
            let mut gb = vec![T::zero(); g.len()];
            for (r, &k) in keep.iter().enumerate() {
                let dst = if k { &mut ga } else { &mut gb };
                dst[r * d..(r + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Nll {
            logp,
            targets,
            count,
        } => {
            let v = nodes[logp.0].value.last_dim();
            let scale = g[0] / T::of(*count as f64);
            let mut gl = vec![T::zero(); targets.len() * v];
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    gl[r * v + t] = -scale;
                }
            }
            vec![(*logp, gl)]
        }
        Op::Sum(x) => vec![(*x, vec![g[0]; nodes[x.0].value.numel()])],
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            vec![(*x, vec![g[0] / T::of(n.max(1) as f64); n])]
        }
    }
}

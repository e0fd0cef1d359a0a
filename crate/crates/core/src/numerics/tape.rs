//! Reverse-mode differentiation over a linear tape of primitive applications.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and `backward` is a single reverse sweep.

use crate::numerics::kernels;
use crate::numerics::plan::AttentionPlan;
use crate::numerics::tensor::{numel, Tensor};
use crate::numerics::NumericsError;
use crate::scalar::Scalar;

/// Layer-norm epsilon shared by every normalization site.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Names of the recorded primitives, used in error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    Transpose,
    Reshape,
    Gelu,
    LayerNormScaleOnly,
    Sum,
    Mean,
    SumLast,
    MeanLast,
    Slice,
    Concat,
    EmbeddingAdd,
    MaskedSoftmax,
    LogSoftmax,
    Pick,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Leaf => "leaf",
            Self::Matmul => "matmul",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Scale => "scale",
            Self::Transpose => "transpose",
            Self::Reshape => "reshape",
            Self::Gelu => "gelu",
            Self::LayerNormScaleOnly => "layer_norm_scale_only",
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::SumLast => "sum_last",
            Self::MeanLast => "mean_last",
            Self::Slice => "slice",
            Self::Concat => "concat",
            Self::EmbeddingAdd => "embedding_add",
            Self::MaskedSoftmax => "masked_softmax",
            Self::LogSoftmax => "log_softmax",
            Self::Pick => "pick",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How the right operand of a binary op is indexed for each output element.
#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    /// `b` repeats every `n` output elements (trailing-axes broadcast).
    Cyclic(usize),
    Map(Vec<usize>),
}

impl Broadcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cyclic(n) => i % n,
            Broadcast::Map(m) => m[i],
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    LayerNorm {
        x: usize,
        scale: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    SumLast {
        a: usize,
    },
    MeanLast {
        a: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    EmbeddingAdd {
        x: usize,
        table: usize,
        index: Vec<Option<usize>>,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    Pick {
        a: usize,
        index: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Splits `shape` around `axis` into (outer, axis size, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient will be reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        kind: PrimitiveKind,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: kind.name() });
        }
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        Ok(self.push(value, op, tracked))
    }

    fn mismatch(&self, kind: PrimitiveKind, vars: &[Var]) -> NumericsError {
        NumericsError::ShapeMismatch {
            op: kind.name(),
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either a shared
    /// `[k, n]` matrix or `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let kind = PrimitiveKind::Matmul;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.mismatch(kind, &[a, b]));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != kb || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(self.mismatch(kind, &[a, b]));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if shared {
            kernels::matmul(av, bv, &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                kernels::matmul(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.record(
            kind,
            Tensor::from_parts(shape, out),
            Op::Matmul { a: a.0, b: b.0 },
            &[a.0, b.0],
        )
    }

    fn broadcast_plan(&self, kind: PrimitiveKind, a: Var, b: Var) -> Result<Broadcast, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if sb.len() > sa.len() {
            return Err(self.mismatch(kind, &[a, b]));
        }
        let pad = sa.len() - sb.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(sb.iter().copied()).collect();
        if padded.iter().zip(sa).any(|(&pb, &pa)| pb != pa && pb != 1) {
            return Err(self.mismatch(kind, &[a, b]));
        }
        if sa.ends_with(sb) {
            return Ok(Broadcast::Cyclic(numel(sb)));
        }
        // general case: map every output index onto b
        let mut strides = vec![0usize; sa.len()];
        let mut acc = 1;
        for d in (0..sa.len()).rev() {
            strides[d] = if padded[d] == 1 { 0 } else { acc };
            acc *= padded[d];
        }
        let total = numel(sa);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; sa.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..sa.len()).rev() {
                idx[d] += 1;
                if idx[d] < sa[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Broadcast::Map(map))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, NumericsError> {
        let pk = match kind {
            BinaryKind::Add => PrimitiveKind::Add,
            BinaryKind::Sub => PrimitiveKind::Sub,
            BinaryKind::Mul => PrimitiveKind::Mul,
        };
        let bcast = self.broadcast_plan(pk, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bd = bv.data();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bcast.index(i)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.record(
            pk,
            value,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bcast,
            },
            &[a.0, b.0],
        )
    }

    /// Elementwise `a + b`; `b` broadcasts onto the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| x * factor);
        self.record(PrimitiveKind::Scale, value, Op::Scale { a: a.0, factor }, &[a.0])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(self.mismatch(PrimitiveKind::Transpose, &[a]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = kernels::transpose_last2(self.value(a).data(), r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.record(
            PrimitiveKind::Transpose,
            Tensor::from_parts(shape, data),
            Op::Transpose { a: a.0 },
            &[a.0],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(NumericsError::ShapeMismatch {
                op: PrimitiveKind::Reshape.name(),
                shapes: vec![self.shape(a).to_vec(), shape.to_vec()],
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(a).data().to_vec());
        self.record(PrimitiveKind::Reshape, value, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| T::lit(gelu_f64(x.as_f64())));
        self.record(PrimitiveKind::Gelu, value, Op::Gelu { a: a.0 }, &[a.0])
    }

    /// Normalizes over the last axis and multiplies by a learnable scale. No bias.
    pub fn layer_norm(&mut self, x: Var, scale: Var) -> Result<Var, NumericsError> {
        let kind = PrimitiveKind::LayerNormScaleOnly;
        let d = self.value(x).last_dim();
        if self.shape(scale) != [d] || self.value(x).rank() == 0 {
            return Err(self.mismatch(kind, &[x, scale]));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_d = T::one() / T::from_usize_lossy(d);
        let xs = self.value(x).data();
        let gamma = self.value(scale).data();
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (&v, &g) in row.iter().zip(gamma) {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g);
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.record(
            kind,
            value,
            Op::LayerNorm {
                x: x.0,
                scale: scale.0,
                xhat,
                rstd,
            },
            &[x.0, scale.0],
        )
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(PrimitiveKind::Sum, value, Op::SumAll { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / T::from_usize_lossy(v.len()));
        self.record(PrimitiveKind::Mean, value, Op::MeanAll { a: a.0 }, &[a.0])
    }

    fn reduce_last(&mut self, a: Var, average: bool) -> Result<Var, NumericsError> {
        let kind = if average {
            PrimitiveKind::MeanLast
        } else {
            PrimitiveKind::SumLast
        };
        let v = self.value(a);
        if v.rank() == 0 {
            return Err(self.mismatch(kind, &[a]));
        }
        let d = v.last_dim();
        let norm = if average {
            T::one() / T::from_usize_lossy(d)
        } else {
            T::one()
        };
        let data = v
            .data()
            .chunks(d)
            .map(|r| r.iter().copied().sum::<T>() * norm)
            .collect();
        let shape = v.shape()[..v.rank() - 1].to_vec();
        let op = if average {
            Op::MeanLast { a: a.0 }
        } else {
            Op::SumLast { a: a.0 }
        };
        self.record(kind, Tensor::from_parts(shape, data), op, &[a.0])
    }

    /// Sums away the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.reduce_last(a, false)
    }

    /// Averages away the last axis.
    pub fn mean_last(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.reduce_last(a, true)
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(NumericsError::ShapeMismatch {
                op: PrimitiveKind::Slice.name(),
                shapes: vec![s, vec![axis, start, end]],
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let op = Op::Slice {
            a: a.0,
            axis,
            start,
            end,
        };
        self.record(PrimitiveKind::Slice, Tensor::from_parts(shape, data), op, &[a.0])
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let kind = PrimitiveKind::Concat;
        let first = parts.first().ok_or(NumericsError::ShapeMismatch {
            op: kind.name(),
            shapes: vec![],
        })?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(self.mismatch(kind, parts));
        }
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != s0[d]) {
                return Err(self.mismatch(kind, parts));
            }
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let total_axis: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let src = self.value(*p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total_axis;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let op = Op::Concat {
            inputs: ids.clone(),
            axis,
        };
        self.record(kind, Tensor::from_parts(shape, data), op, &ids)
    }

    /// Adds `table[index[r]]` to row `r` of `x` (rows over the last axis);
    /// rows with `None` pass through.
    pub fn embedding_add(&mut self, x: Var, table: Var, index: Vec<Option<usize>>) -> Result<Var, NumericsError> {
        let kind = PrimitiveKind::EmbeddingAdd;
        let d = self.value(x).last_dim();
        let ts = self.shape(table);
        let rows = self.value(x).len() / d;
        if ts.len() != 2 || ts[1] != d || index.len() != rows || index.iter().flatten().any(|&i| i >= ts[0]) {
            return Err(self.mismatch(kind, &[x, table]));
        }
        let tv = self.value(table).data();
        let mut data = self.value(x).data().to_vec();
        for (row, idx) in data.chunks_mut(d).zip(&index) {
            if let Some(i) = idx {
                for (o, &t) in row.iter_mut().zip(&tv[i * d..(i + 1) * d]) {
                    *o += t;
                }
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.record(
            kind,
            value,
            Op::EmbeddingAdd {
                x: x.0,
                table: table.0,
                index,
            },
            &[x.0, table.0],
        )
    }

    fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let kind = PrimitiveKind::MaskedSoftmax;
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = vec![T::zero(); v.len()];
        for (r, (row, orow)) in v.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let visible = |j: usize| mask.is_none_or(|m| m[r * d + j]);
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if visible(j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                return Err(NumericsError::FullyMaskedRow { row: r });
            }
            let mut total = T::zero();
            for (j, (&x, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if visible(j) {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            let inv = T::one() / total;
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.record(kind, value, Op::Softmax { a: a.0 }, &[a.0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.softmax_rows(a, None)
    }

    /// Softmax over attention logits `[batch, (heads,) K, K]` with entries the
    /// plan hides forced to exactly zero. `plans` holds one plan per batch
    /// element, or a single plan shared by the whole batch.
    pub fn masked_softmax(&mut self, logits: Var, plans: &[AttentionPlan]) -> Result<Var, NumericsError> {
        let s = self.shape(logits).to_vec();
        let kind = PrimitiveKind::MaskedSoftmax;
        if s.len() < 2 || plans.is_empty() {
            return Err(self.mismatch(kind, &[logits]));
        }
        let k = s[s.len() - 1];
        let batch = if s.len() >= 3 { s[0] } else { 1 };
        if s[s.len() - 2] != k || plans.iter().any(|p| p.len() != k) || (plans.len() != 1 && plans.len() != batch) {
            return Err(NumericsError::ShapeMismatch {
                op: kind.name(),
                shapes: vec![s, plans.iter().map(AttentionPlan::len).collect()],
            });
        }
        let per_batch = numel(&s) / batch;
        let mut mask = Vec::with_capacity(numel(&s));
        for b in 0..batch {
            let plan = if plans.len() == 1 { &plans[0] } else { &plans[b] };
            for _ in 0..per_batch / (k * k) {
                mask.extend_from_slice(plan.visibility());
            }
        }
        self.softmax_rows(logits, Some(&mask))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            out.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.record(PrimitiveKind::LogSoftmax, value, Op::LogSoftmax { a: a.0 }, &[a.0])
    }

    /// Selects entry `index[r]` from each row of the last axis.
    pub fn pick(&mut self, a: Var, index: Vec<usize>) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let d = v.last_dim();
        if v.rank() == 0 || index.len() != v.len() / d || index.iter().any(|&i| i >= d) {
            return Err(self.mismatch(PrimitiveKind::Pick, &[a]));
        }
        let data = v.data().chunks(d).zip(&index).map(|(row, &i)| row[i]).collect();
        let shape = v.shape()[..v.rank() - 1].to_vec();
        self.record(
            PrimitiveKind::Pick,
            Tensor::from_parts(shape, data),
            Op::Pick { a: a.0, index },
            &[a.0],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: node.value.shape().to_vec(),
            });
        }
        if !node.tracked {
            return Err(NumericsError::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(node.value.shape().to_vec(), vec![T::one()]));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.tracked {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: usize, delta: Vec<T>) {
        if !self.nodes[id].tracked {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.nodes[id].value.shape().to_vec(), delta));
            }
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let sa = av.shape();
                let sb = bv.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = av.len() / (m * k);
                let shared = sb.len() == 2;
                if self.nodes[*a].tracked {
                    let mut da = vec![T::zero(); av.len()];
                    if shared {
                        kernels::matmul_nt(gd, bv.data(), &mut da, batch * m, n, k);
                    } else {
                        for bi in 0..batch {
                            kernels::matmul_nt(
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &bv.data()[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].tracked {
                    let mut db = vec![T::zero(); bv.len()];
                    if shared {
                        kernels::matmul_tn_acc(av.data(), gd, &mut db, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            kernels::matmul_tn_acc(
                                &av.data()[bi * m * k..(bi + 1) * m * k],
                                &gd[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.nodes[*a].tracked {
                    let da = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => gd.iter().enumerate().map(|(i, &gv)| gv * bv[bcast.index(i)]).collect(),
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].tracked {
                    let mut db = vec![T::zero(); bv.len()];
                    for (i, &gv) in gd.iter().enumerate() {
                        let j = bcast.index(i);
                        db[j] += match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * av[i],
                        };
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, gd.iter().map(|&v| v * *factor).collect());
            }
            Op::Transpose { a } => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                self.accumulate(grads, *a, kernels::transpose_last2(gd, r, c));
            }
            Op::Reshape { a } => self.accumulate(grads, *a, gd.to_vec()),
            Op::Gelu { a } => {
                let xs = self.nodes[*a].value.data();
                let da = xs
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| gv * T::lit(gelu_grad_f64(x.as_f64())))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, scale, xhat, rstd } => {
                let gamma = self.nodes[*scale].value.data();
                let d = gamma.len();
                if self.nodes[*scale].tracked {
                    let mut dgamma = vec![T::zero(); d];
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((dg, &gv), &h) in dgamma.iter_mut().zip(grow).zip(hrow) {
                            *dg += gv * h;
                        }
                    }
                    self.accumulate(grads, *scale, dgamma);
                }
                if self.nodes[*x].tracked {
                    let inv_d = T::one() / T::from_usize_lossy(d);
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((grow, hrow), &r) in gd.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dh: Vec<T> = grow.iter().zip(gamma).map(|(&gv, &gm)| gv * gm).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        dx.extend(dh.iter().zip(hrow).map(|(&a, &h)| r * (a - mean_dh - h * mean_dh_h)));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SumAll { a } => {
                let n = self.nodes[*a].value.len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[*a].value.len();
                self.accumulate(grads, *a, vec![gd[0] / T::from_usize_lossy(n); n]);
            }
            Op::SumLast { a } | Op::MeanLast { a } => {
                let d = self.nodes[*a].value.last_dim();
                let norm = match &self.nodes[id].op {
                    Op::MeanLast { .. } => T::one() / T::from_usize_lossy(d),
                    _ => T::one(),
                };
                let da = gd.iter().flat_map(|&gv| std::iter::repeat_n(gv * norm, d)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Slice { a, axis, start, end } => {
                let src_shape = self.nodes[*a].value.shape();
                let (outer, len, inner) = axis_split(src_shape, *axis);
                let width = end - start;
                let mut da = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    da[dst..dst + width * inner].copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in inputs {
                    let len = self.nodes[p].value.shape()[*axis];
                    if self.nodes[p].tracked {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            dp.extend_from_slice(&gd[src..src + len * inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += len;
                }
            }
            Op::EmbeddingAdd { x, table, index } => {
                self.accumulate(grads, *x, gd.to_vec());
                if self.nodes[*table].tracked {
                    let tv = &self.nodes[*table].value;
                    let d = tv.last_dim();
                    let mut dt = vec![T::zero(); tv.len()];
                    for (grow, idx) in gd.chunks(d).zip(index) {
                        if let Some(i) = idx {
                            for (o, &gv) in dt[i * d..(i + 1) * d].iter_mut().zip(grow) {
                                *o += gv;
                            }
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::Softmax { a } => {
                let d = out.last_dim();
                let mut da = Vec::with_capacity(gd.len());
                for (grow, prow) in gd.chunks(d).zip(out.data().chunks(d)) {
                    let dot: T = grow.iter().zip(prow).map(|(&gv, &p)| gv * p).sum();
                    da.extend(grow.iter().zip(prow).map(|(&gv, &p)| p * (gv - dot)));
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSoftmax { a } => {
                let d = out.last_dim();
                let mut da = Vec::with_capacity(gd.len());
                for (grow, lrow) in gd.chunks(d).zip(out.data().chunks(d)) {
                    let total: T = grow.iter().copied().sum();
                    da.extend(grow.iter().zip(lrow).map(|(&gv, &l)| gv - l.exp() * total));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Pick { a, index } => {
                let src = &self.nodes[*a].value;
                let d = src.last_dim();
                let mut da = vec![T::zero(); src.len()];
                for (r, (&gv, &i)) in gd.iter().zip(index).enumerate() {
                    da[r * d + i] = gv;
                }
                self.accumulate(grads, *a, da);
            }
        }
    }
}

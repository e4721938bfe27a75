use std::fmt;

use super::kernels::gemm_nn;
use super::shape::{broadcast_offsets, broadcast_shapes, numel, permute_offsets, validate_perm};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient for every input given the upstream gradient of the output.
    /// Entries may be `None` for inputs that receive no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
    ) -> Result<Vec<Option<Vec<T>>>>;
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Shift(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Cos(Var),
    Sin(Var),
    Silu(Var),
    Square(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MeanLast(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        count: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    RepeatInterleave {
        x: Var,
        axis: usize,
        repeats: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "add_scalar",
            Op::Sqrt(_) => "sqrt",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Cos(_) => "cos",
            Op::Sin(_) => "sin",
            Op::Silu(_) => "silu",
            Op::Square(_) => "square",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::MeanLast(_) => "mean_last",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Embedding { .. } => "embedding",
            Op::Slice { .. } => "slice",
            Op::RepeatInterleave { .. } => "repeat_interleave",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    /// Causal flag for softmax nodes.
    pub(crate) causal: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// The tape is append-only. [`Tape::backward`] does not consume or clear it,
/// so it may be called repeatedly (e.g. for different scalar outputs of the
/// same forward pass); each call returns a fresh [`super::Gradients`].
///
/// In checked mode every forward value and every gradient is tested for
/// NaN/Inf and the first offender is reported as [`Error::NonFinite`].
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("checked", &self.checked)
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn checked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn is_checked(&self) -> bool {
        self.checked
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

    /// Records a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
            causal: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            causal: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb).map_err(|_| Error::shape(name, &sa, &sb))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&sa, &out_shape);
            let ob = broadcast_offsets(&sb, &out_shape);
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Tensor::from_vec(&out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| *v == T::zero()) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b), &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(a);
        let t = Tensor::from_vec(src.shape(), src.data().iter().map(|&x| f(x)).collect())?;
        self.push(t, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|v| *v < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: "negative input".into(),
            });
        }
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                msg: "non-positive input".into(),
            });
        }
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a), |x| x.cos())
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a), |x| x.sin())
    }

    /// `x · σ(x)`
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), silu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    // ── linear algebra and layout ───────────────────────────────────

    /// Batched matrix product over the last two axes. `b` is either a
    /// plain matrix shared by every batch entry of `a`, or has exactly the
    /// same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, out_shape) = matmul_dims(&sa, &sb)?;
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let shared = sb.len() == 2;
        for bi in 0..batch {
            let bslice = if shared {
                db
            } else {
                &db[bi * k * n..(bi + 1) * k * n]
            };
            gemm_nn(
                &da[bi * m * k..(bi + 1) * m * k],
                bslice,
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::from_vec(&out_shape, out)?;
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        validate_perm(perm, shape.len())?;
        let offsets = permute_offsets(&shape, perm);
        let src = self.value(a).data();
        let data = offsets.iter().map(|&o| src[o]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::from_vec(&out_shape, data)?;
        self.push(t, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let t = Tensor::from_vec(&out_shape, data)?;
        self.push(t, Op::Slice { x: a, axis, start }, &[a])
    }

    /// Repeats every entry along `axis` `repeats` times in place, so output
    /// index `j` reads input index `j / repeats`.
    pub fn repeat_interleave(&mut self, a: Var, axis: usize, repeats: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || repeats == 0 {
            return Err(Error::invalid(
                "repeat_interleave",
                format!("axis {axis}, repeats {repeats} on {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len() * repeats);
        for o in 0..outer {
            for i in 0..shape[axis] {
                let base = (o * shape[axis] + i) * inner;
                for _ in 0..repeats {
                    data.extend_from_slice(&src[base..base + inner]);
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] *= repeats;
        let t = Tensor::from_vec(&out_shape, data)?;
        self.push(t, Op::RepeatInterleave { x: a, axis, repeats }, &[a])
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s: f64 = self.value(a).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(T::of(s / n as f64)), Op::MeanAll(a), &[a])
    }

    fn reduce_last(&mut self, a: Var, keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&last) = shape.last() else {
            return Err(Error::invalid("sum_last", "scalar input"));
        };
        if last == 0 {
            return Err(Error::invalid("sum_last", "empty last axis"));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(last)
            .map(|row| {
                let s: f64 = row.iter().map(|v| v.f64()).sum();
                T::of(if mean { s / last as f64 } else { s })
            })
            .collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if keepdim {
            out_shape.push(1);
        }
        let t = Tensor::from_vec(&out_shape, data)?;
        let op = if mean { Op::MeanLast(a) } else { Op::SumLast(a) };
        self.push(t, op, &[a])
    }

    pub fn sum_last(&mut self, a: Var, keepdim: bool) -> Result<Var> {
        self.reduce_last(a, keepdim, false)
    }

    pub fn mean_last(&mut self, a: Var, keepdim: bool) -> Result<Var> {
        self.reduce_last(a, keepdim, true)
    }

    // ── attention and loss ──────────────────────────────────────────

    /// Max-stabilised softmax over the last axis. With `causal`, the last
    /// two axes are read as `[query, key]` and key `j` is masked for query
    /// `i` when `j > i + (keys - queries)`; masked entries get exactly 0.
    pub fn softmax_last(&mut self, a: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&n) = shape.last() else {
            return Err(Error::invalid("softmax", "scalar input"));
        };
        if n == 0 {
            return Err(Error::invalid("softmax", "empty last axis"));
        }
        let rows_per_matrix = if causal {
            if shape.len() < 2 || shape[shape.len() - 2] > n {
                return Err(Error::invalid(
                    "softmax",
                    format!("causal mask needs [.., q, k] with q <= k, got {shape:?}"),
                ));
            }
            shape[shape.len() - 2]
        } else {
            1
        };
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for (r, (row, orow)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let visible = if causal {
                (r % rows_per_matrix) + (n - rows_per_matrix) + 1
            } else {
                n
            };
            softmax_row(&row[..visible], &mut orow[..visible]);
        }
        let t = Tensor::from_vec(&shape, out)?;
        let v = self.push(t, Op::Softmax(a), &[a])?;
        self.nodes[v.0].causal = causal;
        Ok(v)
    }

    /// Mean next-token negative log-likelihood. `logits` is `[.., V]` and
    /// `targets` has one id per logits row; rows whose target equals
    /// `ignore_index` contribute neither loss nor gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let Some(&v) = shape.last() else {
            return Err(Error::invalid("cross_entropy", "scalar logits"));
        };
        let rows = numel(&shape) / v.max(1);
        if targets.len() != rows {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} targets for {} logit rows", targets.len(), rows),
            ));
        }
        let src = self.value(logits).data();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (row, &t) in src.chunks(v).zip(targets) {
            if Some(t) == ignore_index {
                continue;
            }
            if t >= v {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("target {t} outside vocabulary of {v}"),
                ));
            }
            total += log_sum_exp(row) - row[t].f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("cross_entropy", "every position is ignored"));
        }
        let t = Tensor::scalar(T::of(total / count as f64));
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore_index,
                count,
            },
            &[logits],
        )
    }

    /// Row lookup: `table` is `[V, d]`, output is `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(Error::invalid("embedding", "table must be [V, d]"));
        }
        if numel(ids_shape) != ids.len() {
            return Err(Error::invalid("embedding", "ids do not match ids_shape"));
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::invalid(
                    "embedding",
                    format!("token id {id} outside vocabulary of {vocab}"),
                ));
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(d);
        let t = Tensor::from_vec(&out_shape, data)?;
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Records an operation whose forward `output` the caller already
    /// computed from the values of `inputs`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut denom = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e.f64();
    }
    let inv = T::of(1.0 / denom);
    out.iter_mut().for_each(|o| *o = *o * inv);
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let s: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn matmul_dims(
    sa: &[usize],
    sb: &[usize],
) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", sa, sb));
    }
    if sb.len() != 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut out = sa[..sa.len() - 1].to_vec();
    out.push(n);
    Ok((batch, m, k, n, out))
}

use super::kernels::{gemm_nt, gemm_tn};
use super::shape::{broadcast_offsets, numel, permute_offsets};
use super::tape::{matmul_dims, sigmoid, Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Gradients of one scalar output with respect to every tape node that
/// requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros for nodes the output does not depend on.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()).expect("gradient extent"),
            None => Tensor::zeros(shape),
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

/// Sums a broadcast-shaped gradient back onto `input`'s shape.
fn reduce_to<T: Scalar>(g: &[T], input: &[usize], output: &[usize]) -> Vec<T> {
    if input == output {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); numel(input)];
    for (&off, &gv) in broadcast_offsets(input, output).iter().zip(g) {
        out[off] = out[off] + gv;
    }
    out
}

/// Pulls the per-element gradient at the output back to both broadcast
/// operands, applying `da`/`db` to the (broadcast) operand values.
fn binary_grads<T: Scalar>(
    g: &[T],
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    da: impl Fn(T, T) -> T,
    db: impl Fn(T, T) -> T,
) -> (Vec<T>, Vec<T>) {
    let (sa, sb) = (a.shape(), b.shape());
    let (oa, ob) = if sa == out_shape && sb == out_shape {
        let idx: Vec<usize> = (0..g.len()).collect();
        (idx.clone(), idx)
    } else {
        (
            broadcast_offsets(sa, out_shape),
            broadcast_offsets(sb, out_shape),
        )
    };
    let (va, vb) = (a.data(), b.data());
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for ((&i, &j), &gv) in oa.iter().zip(&ob).zip(g) {
        ga[i] = ga[i] + gv * da(va[i], vb[j]);
        gb[j] = gb[j] + gv * db(va[i], vb[j]);
    }
    (ga, gb)
}

impl<T: Scalar> Tape<T> {
    /// Reverse pass from a scalar `loss`. Nodes are visited in strictly
    /// decreasing record order and every gradient contribution is summed in
    /// that order, so the result is deterministic.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.is_checked() && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                });
            }
            let out = &node.value;
            let contributions: Vec<(Var, Vec<T>)> = match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    vec![
                        (*a, reduce_to(&g, ta.shape(), out.shape())),
                        (*b, reduce_to(&g, tb.shape(), out.shape())),
                    ]
                }
                Op::Sub(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    vec![
                        (*a, reduce_to(&g, ta.shape(), out.shape())),
                        (*b, reduce_to(&neg, tb.shape(), out.shape())),
                    ]
                }
                Op::Mul(a, b) => {
                    let (ga, gb) = binary_grads(
                        &g,
                        self.value(*a),
                        self.value(*b),
                        out.shape(),
                        |_, y| y,
                        |x, _| x,
                    );
                    vec![(*a, ga), (*b, gb)]
                }
                Op::Div(a, b) => {
                    let (ga, gb) = binary_grads(
                        &g,
                        self.value(*a),
                        self.value(*b),
                        out.shape(),
                        |_, y| T::one() / y,
                        |x, y| -x / (y * y),
                    );
                    vec![(*a, ga), (*b, gb)]
                }
                Op::Neg(a) => vec![(*a, g.iter().map(|&v| -v).collect())],
                Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
                Op::Shift(a) => vec![(*a, g)],
                Op::Sqrt(a) => {
                    let two = T::of(2.0);
                    vec![(
                        *a,
                        g.iter()
                            .zip(out.data())
                            .map(|(&gv, &y)| gv / (two * y))
                            .collect(),
                    )]
                }
                Op::Exp(a) => vec![(
                    *a,
                    g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect(),
                )],
                Op::Log(a) => vec![(*a, map_in(&g, self.value(*a), |gv, x| gv / x))],
                Op::Cos(a) => vec![(*a, map_in(&g, self.value(*a), |gv, x| -gv * x.sin()))],
                Op::Sin(a) => vec![(*a, map_in(&g, self.value(*a), |gv, x| gv * x.cos()))],
                Op::Silu(a) => vec![(
                    *a,
                    map_in(&g, self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (T::one() - s))
                    }),
                )],
                Op::Square(a) => vec![(
                    *a,
                    map_in(&g, self.value(*a), |gv, x| gv * T::of(2.0) * x),
                )],
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (batch, m, k, n_, _) = matmul_dims(ta.shape(), tb.shape())?;
                    let shared = tb.rank() == 2;
                    let mut ga = vec![T::zero(); ta.len()];
                    let mut gb = vec![T::zero(); tb.len()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n_..(bi + 1) * m * n_];
                        let a_s = &ta.data()[bi * m * k..(bi + 1) * m * k];
                        let boff = if shared { 0 } else { bi * k * n_ };
                        let b_s = &tb.data()[boff..boff + k * n_];
                        gemm_nt(gs, b_s, &mut ga[bi * m * k..(bi + 1) * m * k], m, n_, k);
                        gemm_tn(a_s, gs, &mut gb[boff..boff + k * n_], m, k, n_);
                    }
                    vec![(*a, ga), (*b, gb)]
                }
                Op::Permute(a, perm) => {
                    let offsets = permute_offsets(self.value(*a).shape(), perm);
                    let mut ga = vec![T::zero(); g.len()];
                    for (&o, &gv) in offsets.iter().zip(&g) {
                        ga[o] = gv;
                    }
                    vec![(*a, ga)]
                }
                Op::Reshape(a) => vec![(*a, g)],
                Op::SumAll(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
                Op::MeanAll(a) => {
                    let len = self.value(*a).len();
                    vec![(*a, vec![g[0] / T::of(len as f64); len])]
                }
                Op::SumLast(a) | Op::MeanLast(a) => {
                    let ta = self.value(*a);
                    let last = *ta.shape().last().expect("rank >= 1");
                    let scale = if matches!(node.op, Op::MeanLast(_)) {
                        T::one() / T::of(last as f64)
                    } else {
                        T::one()
                    };
                    let mut ga = Vec::with_capacity(ta.len());
                    for &gv in &g {
                        ga.extend(std::iter::repeat(gv * scale).take(last));
                    }
                    vec![(*a, ga)]
                }
                Op::Softmax(a) => {
                    let n = *out.shape().last().expect("rank >= 1");
                    let mut ga = vec![T::zero(); g.len()];
                    for ((grow, yrow), orow) in
                        g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n))
                    {
                        let dot: f64 = grow
                            .iter()
                            .zip(yrow)
                            .map(|(gv, y)| gv.f64() * y.f64())
                            .sum();
                        let dot = T::of(dot);
                        for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = y * (gv - dot);
                        }
                    }
                    vec![(*a, ga)]
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    count,
                } => {
                    let tl = self.value(*logits);
                    let v = *tl.shape().last().expect("rank >= 1");
                    let scale = g[0].f64() / *count as f64;
                    let mut ga = vec![T::zero(); tl.len()];
                    for ((row, orow), &t) in
                        tl.data().chunks(v).zip(ga.chunks_mut(v)).zip(targets)
                    {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let lse = super::tape::log_sum_exp(row);
                        for (j, (o, &x)) in orow.iter_mut().zip(row).enumerate() {
                            let p = (x.f64() - lse).exp();
                            let y = if j == t { 1.0 } else { 0.0 };
                            *o = T::of((p - y) * scale);
                        }
                    }
                    vec![(*logits, ga)]
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let mut ga = vec![T::zero(); tt.len()];
                    for (row, &id) in g.chunks(d).zip(ids) {
                        let dst = &mut ga[id * d..(id + 1) * d];
                        dst.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    vec![(*table, ga)]
                }
                Op::Slice { x, axis, start } => {
                    let shape = self.value(*x).shape();
                    let len = out.shape()[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let mut ga = vec![T::zero(); numel(shape)];
                    for o in 0..outer {
                        let dst = o * shape[*axis] * inner + start * inner;
                        let src = o * len * inner;
                        ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    vec![(*x, ga)]
                }
                Op::RepeatInterleave { x, axis, repeats } => {
                    let shape = self.value(*x).shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let mut ga = vec![T::zero(); numel(shape)];
                    let mut src = 0;
                    for o in 0..outer {
                        for i in 0..shape[*axis] {
                            let dst = (o * shape[*axis] + i) * inner;
                            for _ in 0..*repeats {
                                for k in 0..inner {
                                    ga[dst + k] = ga[dst + k] + g[src + k];
                                }
                                src += inner;
                            }
                        }
                    }
                    vec![(*x, ga)]
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = op.backward(&values, out, &g)?;
                    if gs.len() != inputs.len() {
                        return Err(Error::invalid(
                            "custom",
                            format!("{} returned {} gradients for {} inputs", op.name(), gs.len(), inputs.len()),
                        ));
                    }
                    inputs
                        .iter()
                        .zip(gs)
                        .filter_map(|(v, g)| g.map(|g| (*v, g)))
                        .collect()
                }
            };
            for (parent, pg) in contributions {
                if self.nodes[parent.0].requires_grad {
                    debug_assert_eq!(pg.len(), self.value(parent).len(), "{}", node.op.name());
                    accumulate(&mut grads[parent.0], pg);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn map_in<T: Scalar>(g: &[T], x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect()
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gemm_nt, gemm_tn, inverse_permutation, matmul_plan};
use super::nn::ParamId;
use super::{broadcast_map, broadcast_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Dropout(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Forward tape. Every operation appends one node; [`Graph::backward`]
/// replays the nodes in reverse.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients of a scalar loss with respect to every parameter and variable
/// leaf on the tape.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<(Var, Option<ParamId>, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves
            .iter()
            .find(|(v, _, _)| *v == var)
            .map(|(_, _, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.leaves
            .iter()
            .filter_map(|(_, p, g)| p.map(|id| (id, g)))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    /// A tape in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A tape in training mode whose dropout draws come from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Variable | Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// Records a leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Variable, &[])
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, t: Tensor<T>) -> Var {
        self.push(t, Op::Param(id), &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(name, &sa, &sb)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == shape && is_trailing(&sb, &shape) {
            let nb = xb.len();
            xa.iter().enumerate().map(|(i, &x)| f(x, xb[i % nb])).collect()
        } else if sb == shape && is_trailing(&sa, &shape) {
            let na = xa.len();
            xb.iter().enumerate().map(|(i, &y)| f(xa[i % na], y)).collect()
        } else {
            let (ma, mb) = (broadcast_map(&sa, &shape), broadcast_map(&sb, &shape));
            ma.iter().zip(&mb).map(|(&i, &j)| f(xa[i], xb[j])).collect()
        };
        Tensor::new(shape, data)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    /// Layer normalization over the last axis; `gain` and `bias` are vectors
    /// of the last-axis width.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (out, xhat, rstd) = kernels::layer_norm_forward(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(a), axes)?;
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::Contract("transpose needs at least two axes".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let width = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Inverted dropout; the identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = T::of(1.0 / keep);
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    pub(crate) fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("mask matches input");
        self.push(out, Op::Dropout(x, mask), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Dimension {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar `loss`. Each recorded op is visited once,
    /// newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Variable => leaves.push((Var(i), None, g)),
                Op::Param(id) => leaves.push((Var(i), Some(*id), g)),
                op => self.backward_op(op, &node.value, g, &mut grads)?,
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to `shape`.
    fn reduce_to(&self, g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
        if g.shape() == shape {
            return g.clone();
        }
        if is_trailing(shape, g.shape()) {
            let mut out = Tensor::zeros(shape.to_vec());
            let data = out.data_mut();
            for chunk in g.data().chunks(data.len().max(1)) {
                for (o, &v) in data.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            return out;
        }
        let map = broadcast_map(shape, g.shape());
        let mut out = Tensor::zeros(shape.to_vec());
        let data = out.data_mut();
        for (&j, &v) in map.iter().zip(g.data()) {
            data[j] += v;
        }
        out
    }

    fn backward_op(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Constant | Op::Variable | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let plan = matmul_plan(av.shape(), bv.shape())?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                let flat = bv.ndim() == 2
                    && plan.pairs.iter().enumerate().all(|(i, &(ai, _))| ai == i);
                if flat {
                    let rows = plan.pairs.len() * m;
                    if self.nodes[a.0].needs_grad {
                        gemm_nt(rows, n, k, g.data(), bv.data(), &mut ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        gemm_tn(k, rows, n, av.data(), g.data(), &mut gb);
                    }
                } else {
                    for (p, &(ai, bi)) in plan.pairs.iter().enumerate() {
                        let gp = &g.data()[p * m * n..(p + 1) * m * n];
                        let a_blk = &av.data()[ai * m * k..(ai + 1) * m * k];
                        let b_blk = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        if self.nodes[a.0].needs_grad {
                            gemm_nt(m, n, k, gp, b_blk, &mut ga[ai * m * k..(ai + 1) * m * k]);
                        }
                        if self.nodes[b.0].needs_grad {
                            gemm_tn(k, m, n, a_blk, gp, &mut gb[bi * k * n..(bi + 1) * k * n]);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(&g, self.shape(*a)));
                self.accumulate(grads, *b, self.reduce_to(&g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(&g, self.shape(*a)));
                let neg = g.map(|v| -v);
                self.accumulate(grads, *b, self.reduce_to(&neg, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let shape = g.shape();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (ma, mb) = (broadcast_map(sa, shape), broadcast_map(sb, shape));
                if self.nodes[a.0].needs_grad {
                    let mut ga = Tensor::zeros(sa.to_vec());
                    let d = ga.data_mut();
                    for ((&i, &j), &gv) in ma.iter().zip(&mb).zip(g.data()) {
                        d[i] += gv * vb[j];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = Tensor::zeros(sb.to_vec());
                    let d = gb.data_mut();
                    for ((&i, &j), &gv) in ma.iter().zip(&mb).zip(g.data()) {
                        d[j] += gv * va[i];
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad(xv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len)
                            .map(|j| g.data()[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let idx = base + j * inner;
                            gx[idx] = y[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let rows = out.len() / d;
                let gv = self.value(*gain).data();
                let dn = T::of(d as f64);
                let mut gx = vec![T::zero(); out.len()];
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for r in 0..rows {
                    let dy = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = dy[j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        ggain[j] += dy[j] * xh[j];
                        gbias[j] += dy[j];
                    }
                    for j in 0..d {
                        let dxh = dy[j] * gv[j];
                        gx[r * d + j] = rstd[r] / dn * (dn * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
                let gs = self.shape(*gain).to_vec();
                self.accumulate(grads, *gain, Tensor::new(gs, ggain)?);
                let bs = self.shape(*bias).to_vec();
                self.accumulate(grads, *bias, Tensor::new(bs, gbias)?);
            }
            Op::Permute(a, axes) => {
                let back = kernels::permute(&g, &inverse_permutation(axes))?;
                self.accumulate(grads, *a, back);
            }
            Op::Reshape(a) => {
                let back = g.reshape(self.shape(*a).to_vec())?;
                self.accumulate(grads, *a, back);
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let width = g.shape()[*axis];
                let mut gx = Tensor::zeros(shape);
                let d = gx.data_mut();
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    let src = o * width * inner;
                    d[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[src..src + width * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    self.accumulate(grads, p, Tensor::new(shape, data)?);
                }
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                let gv = g.data()[0] / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `src` equals the trailing axes of `full` up to leading unit axes, so it
/// repeats contiguously across `full`.
fn is_trailing(src: &[usize], full: &[usize]) -> bool {
    let core: &[usize] = {
        let lead = src.iter().take_while(|&&d| d == 1).count();
        &src[lead..]
    };
    core.len() <= full.len() && full[full.len() - core.len()..] == *core
}

/// `tanh` through a single exponential, which is markedly cheaper than the
/// library routine and accurate enough where it feeds `1 + tanh`.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + fast_tanh(c * (x + k * x * x * x)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = fast_tanh(c * (x + k * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

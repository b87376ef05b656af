//! Forward kernels over plain tensors. The graph records these and adds the
//! matching backward rules.

use super::{broadcast_map, broadcast_shape, strides, Scalar, Tensor};
use crate::error::{Error, Result};

/// Variance floor used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out += a · b` for row-major `a: m×k`, `b: k×n`, `out: m×n`.
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    T::gemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out += aᵀ · b` for row-major `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    T::gemm(m, k, n, a, (1, m), b, (n, 1), out);
}

/// `out += a · bᵀ` for row-major `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    T::gemm(m, k, n, a, (k, 1), b, (1, k), out);
}

/// Layout of a (possibly batched, broadcast) matrix product.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (a batch index, b batch index) for every output batch.
    pub pairs: Vec<(usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || Error::Dimension {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = broadcast_shape("matmul", a_batch, b_batch).map_err(|_| mismatch())?;
    let (amap, bmap) = if batch.is_empty() {
        (vec![0], vec![0])
    } else {
        (broadcast_map(a_batch, &batch), broadcast_map(b_batch, &batch))
    };
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs: amap.into_iter().zip(bmap).collect(),
    })
}

/// Matrix product over the last two axes with broadcast leading axes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![T::zero(); plan.pairs.len() * m * n];
    // A shared 2-D right operand lets the whole left batch run as one product.
    if b.ndim() == 2 && plan.pairs.iter().enumerate().all(|(i, &(ai, _))| ai == i) {
        gemm_acc(plan.pairs.len() * m, k, n, a.data(), b.data(), &mut out);
    } else {
        for (o, &(ai, bi)) in out.chunks_mut(m * n).zip(&plan.pairs) {
            gemm_acc(
                m,
                k,
                n,
                &a.data()[ai * m * k..(ai + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                o,
            );
        }
    }
    Tensor::new(plan.out_shape, out)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::Contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(data[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (data[base + j * inner] - max).exp();
                data[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                data[base + j * inner] /= sum;
            }
        }
    }
    Ok(out)
}

/// Normalizes every last-axis row to zero mean and unit variance before the
/// affine map. Returns the output plus the per-row (normalized, inverse std)
/// needed for differentiation.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &[T],
    bias: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = x.last_dim();
    let eps = T::of(LAYER_NORM_EPS);
    let dn = T::of(d as f64);
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        rstd[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (
        Tensor::new(x.shape().to_vec(), out).expect("shape preserved"),
        xhat,
        rstd,
    )
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &[T], bias: &[T]) -> Result<Tensor<T>> {
    if gain.len() != x.last_dim() || bias.len() != x.last_dim() {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: vec![gain.len(), bias.len()],
        });
    }
    Ok(layer_norm_forward(x, gain, bias).0)
}

/// Reorders axes; `axes[i]` names the source axis of output axis `i`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Contract(format!(
            "invalid permutation {axes:?} for shape {:?}",
            x.shape()
        )));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides = strides(x.shape());
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut flat = 0usize;
    for _ in 0..total {
        out.push(x.data()[flat]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            flat += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= perm_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

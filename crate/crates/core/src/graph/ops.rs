//! Forward kernels and vector-Jacobian products for every [`OpKind`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The closed set of differentiable operations.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Elementwise binary ops. The smaller operand broadcasts when its shape
    /// is a suffix of the larger one (scalars and row vectors included).
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Offset(f64),
    Exp,
    Log,
    Tanh,
    Silu,
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// `[n,k] x [k,m] -> [n,m]` or `[n,k] x [k] -> [n]`.
    MatMul,
    Transpose,
    /// Softmax over the last axis.
    Softmax,
    /// Sets entries above the diagonal of a square matrix to `-inf`.
    CausalMask,
    Sum,
    Mean,
    /// Concatenation along the leading axis.
    Concat,
    SliceRows {
        start: usize,
        end: usize,
    },
    /// Output row `i` is input row `perm[i]`.
    PermuteRows(Vec<usize>),
    Reshape(Vec<usize>),
    /// Row-wise cosine similarity of two `[P, F]` matrices, `0` for zero-norm rows.
    CosineRows,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::Offset(_) => "offset",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Silu => "silu",
            OpKind::Clamp { .. } => "clamp",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Softmax => "softmax",
            OpKind::CausalMask => "causal_mask",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::PermuteRows(_) => "permute_rows",
            OpKind::Reshape(_) => "reshape",
            OpKind::CosineRows => "cosine_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::CosineRows => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if is_suffix(b, a) {
        Ok(a.to_vec())
    } else if is_suffix(a, b) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, &[a, b]))
    }
}

fn binary(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (la, lb) = (ad.len(), bd.len());
    let data = (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

pub(crate) fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = kind.name();
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::Invalid(format!(
                "{name} expects {n} inputs, got {}",
                inputs.len()
            )));
        }
    }
    let out = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            match kind {
                OpKind::Add => binary(a, b, shape, |x, y| x + y),
                OpKind::Sub => binary(a, b, shape, |x, y| x - y),
                OpKind::Mul => binary(a, b, shape, |x, y| x * y),
                _ => binary(a, b, shape, |x, y| x / y),
            }
        }
        OpKind::Scale(c) => inputs[0].map(|v| v * c),
        OpKind::Offset(c) => inputs[0].map(|v| v + c),
        OpKind::Exp => inputs[0].map(f64::exp),
        OpKind::Log => inputs[0].map(f64::ln),
        OpKind::Tanh => inputs[0].map(f64::tanh),
        OpKind::Silu => inputs[0].map(|v| v * sigmoid(v)),
        OpKind::Clamp { lo, hi } => inputs[0].map(|v| v.clamp(*lo, *hi)),
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            match (a.shape(), b.shape()) {
                (&[n, k], &[k2, m]) if k == k2 => {
                    Tensor::new(vec![n, m], matmul_raw(a.data(), b.data(), n, k, m))?
                }
                (&[n, k], &[k2]) if k == k2 => {
                    Tensor::new(vec![n], matmul_raw(a.data(), b.data(), n, k, 1))?
                }
                (sa, sb) => return Err(Error::shape(name, &[sa, sb])),
            }
        }
        OpKind::Transpose => {
            let a = inputs[0];
            match *a.shape() {
                [n, m] => Tensor::new(vec![m, n], transpose_raw(a.data(), n, m))?,
                _ => return Err(Error::shape(name, &[a.shape()])),
            }
        }
        OpKind::Softmax => {
            let a = inputs[0];
            let w = last_dim(a);
            let mut data = a.data().to_vec();
            if w > 0 {
                for row in data.chunks_mut(w) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        }
        OpKind::CausalMask => {
            let a = inputs[0];
            match *a.shape() {
                [n, m] if n == m => {
                    let mut data = a.data().to_vec();
                    for i in 0..n {
                        for v in &mut data[i * n + i + 1..(i + 1) * n] {
                            *v = f64::NEG_INFINITY;
                        }
                    }
                    Tensor::new(vec![n, n], data)?
                }
                _ => return Err(Error::shape(name, &[a.shape()])),
            }
        }
        OpKind::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
        OpKind::Mean => {
            let a = inputs[0];
            if a.is_empty() {
                return Err(Error::shape(name, &[a.shape()]));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        OpKind::Concat => {
            let first = inputs
                .first()
                .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
            if first.shape().is_empty() {
                return Err(Error::shape(name, &[first.shape()]));
            }
            let tail = &first.shape()[1..];
            let mut rows = 0;
            let mut data = Vec::new();
            for t in inputs {
                if t.shape().is_empty() || t.shape()[1..] != *tail {
                    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
                    return Err(Error::shape(name, &shapes));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Tensor::new(shape, data)?
        }
        OpKind::SliceRows { start, end } => {
            let a = inputs[0];
            if a.shape().is_empty() || start > end || *end > a.shape()[0] {
                return Err(Error::shape(name, &[a.shape(), &[*start, *end]]));
            }
            let c = a.cols();
            let mut shape = a.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, a.data()[start * c..end * c].to_vec())?
        }
        OpKind::PermuteRows(perm) => {
            let a = inputs[0];
            if a.shape().is_empty() || perm.len() != a.shape()[0] {
                return Err(Error::shape(name, &[a.shape(), &[perm.len()]]));
            }
            let c = a.cols();
            let mut data = Vec::with_capacity(a.len());
            for &r in perm {
                if r >= perm.len() {
                    return Err(Error::Invalid(format!(
                        "permutation index {r} out of range"
                    )));
                }
                data.extend_from_slice(&a.data()[r * c..(r + 1) * c]);
            }
            Tensor::new(a.shape().to_vec(), data)?
        }
        OpKind::Reshape(shape) => {
            let a = inputs[0];
            if shape.iter().product::<usize>() != a.len() {
                return Err(Error::shape(name, &[a.shape(), shape]));
            }
            a.reshape(shape)?
        }
        OpKind::CosineRows => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() || a.shape().len() != 2 {
                return Err(Error::shape(name, &[a.shape(), b.shape()]));
            }
            let p = a.rows();
            let data = (0..p).map(|r| cosine(a.row(r), b.row(r)).0).collect();
            Tensor::new(vec![p], data)?
        }
    };
    Ok(out)
}

/// Returns `(cos, |a|, |b|)`; cosine is defined as 0 when either norm vanishes.
fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        (0.0, na, nb)
    } else {
        (dot / (na * nb), na, nb)
    }
}

fn reduce_broadcast(grad: Vec<f64>, len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad;
    }
    let mut out = vec![0.0; len];
    for (i, g) in grad.into_iter().enumerate() {
        out[i % len] += g;
    }
    out
}

/// Vector-Jacobian product. Returns one entry per input; `None` where
/// `needs[i]` is false.
pub(crate) fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    grad: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let (la, lb) = (a.len(), b.len());
            let ga = want(0).then(|| {
                let g: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| match kind {
                        OpKind::Add | OpKind::Sub => g,
                        OpKind::Mul => g * b[i % lb],
                        _ => g / b[i % lb],
                    })
                    .collect();
                reduce_broadcast(g, la)
            });
            let gb = want(1).then(|| {
                let g: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| match kind {
                        OpKind::Add => g,
                        OpKind::Sub => -g,
                        OpKind::Mul => g * a[i % la],
                        _ => {
                            let bv = b[i % lb];
                            -g * a[i % la] / (bv * bv)
                        }
                    })
                    .collect();
                reduce_broadcast(g, lb)
            });
            vec![ga, gb]
        }
        OpKind::Scale(c) => vec![Some(grad.iter().map(|g| g * c).collect())],
        OpKind::Offset(_) | OpKind::Reshape(_) => vec![Some(grad.to_vec())],
        OpKind::Exp => vec![Some(
            grad.iter().zip(out.data()).map(|(g, y)| g * y).collect(),
        )],
        OpKind::Log => vec![Some(
            grad.iter()
                .zip(inputs[0].data())
                .map(|(g, x)| g / x)
                .collect(),
        )],
        OpKind::Tanh => vec![Some(
            grad.iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        )],
        OpKind::Silu => vec![Some(
            grad.iter()
                .zip(inputs[0].data())
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect(),
        )],
        OpKind::Clamp { lo, hi } => vec![Some(
            grad.iter()
                .zip(inputs[0].data())
                .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                .collect(),
        )],
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k) = (a.shape()[0], a.shape()[1]);
            let m = if b.shape().len() == 2 {
                b.shape()[1]
            } else {
                1
            };
            // ga = g @ b^T, gb = a^T @ g
            let ga = want(0).then(|| {
                let bt = transpose_raw(b.data(), k, m);
                matmul_raw(grad, &bt, n, m, k)
            });
            let gb = want(1).then(|| {
                let at = transpose_raw(a.data(), n, k);
                matmul_raw(&at, grad, k, n, m)
            });
            vec![ga, gb]
        }
        OpKind::Transpose => {
            let s = inputs[0].shape();
            vec![Some(transpose_raw(grad, s[1], s[0]))]
        }
        OpKind::Softmax => {
            let w = last_dim(out);
            let mut gx = vec![0.0; grad.len()];
            if w > 0 {
                for ((gr, yr), xr) in grad
                    .chunks(w)
                    .zip(out.data().chunks(w))
                    .zip(gx.chunks_mut(w))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((x, g), y) in xr.iter_mut().zip(gr).zip(yr) {
                        *x = y * (g - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        OpKind::CausalMask => {
            let n = out.shape()[0];
            let mut g = grad.to_vec();
            for i in 0..n {
                for v in &mut g[i * n + i + 1..(i + 1) * n] {
                    *v = 0.0;
                }
            }
            vec![Some(g)]
        }
        OpKind::Sum => vec![Some(vec![grad[0]; inputs[0].len()])],
        OpKind::Mean => {
            let n = inputs[0].len();
            vec![Some(vec![grad[0] / n as f64; n])]
        }
        OpKind::Concat => {
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let span = offset..offset + t.len();
                    offset += t.len();
                    want(i).then(|| grad[span].to_vec())
                })
                .collect()
        }
        OpKind::SliceRows { start, end } => {
            let a = inputs[0];
            let c = a.cols();
            let mut g = vec![0.0; a.len()];
            g[start * c..end * c].copy_from_slice(grad);
            vec![Some(g)]
        }
        OpKind::PermuteRows(perm) => {
            let c = inputs[0].cols();
            let mut g = vec![0.0; grad.len()];
            for (i, &r) in perm.iter().enumerate() {
                g[r * c..(r + 1) * c].copy_from_slice(&grad[i * c..(i + 1) * c]);
            }
            vec![Some(g)]
        }
        OpKind::CosineRows => {
            let (a, b) = (inputs[0], inputs[1]);
            let f = a.cols();
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for r in 0..a.rows() {
                let (ar, br) = (a.row(r), b.row(r));
                let (c, na, nb) = cosine(ar, br);
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                let g = grad[r];
                for j in 0..f {
                    ga[r * f + j] = g * (br[j] / (na * nb) - c * ar[j] / (na * na));
                    gb[r * f + j] = g * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                }
            }
            vec![want(0).then_some(ga), want(1).then_some(gb)]
        }
    }
}

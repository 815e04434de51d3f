//! Token-axis mixing: fixed `T×T` matrices (pooling, random) and
//! single-head scaled dot-product self-attention.

use crate::error::{FedError, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

fn dims3(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, t, d] => Ok((n, t, d)),
        _ => Err(FedError::shape(op, x.shape(), &[0, 0, 0])),
    }
}

/// `y[n] = M · x[n]` for every sample, with `M` of shape `[T, T]`.
pub fn mix_tokens(matrix: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (n, t, d) = dims3(x, "mix_tokens")?;
    if matrix.shape() != [t, t] {
        return Err(FedError::shape("mix_tokens", matrix.shape(), x.shape()));
    }
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        let r = ni * t * d..(ni + 1) * t * d;
        matmul_into(matrix.data(), &x.data()[r.clone()], &mut out[r], t, t, d);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `dx[n] = Mᵀ · dy[n]`.
pub fn mix_tokens_backward(matrix: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (n, t, d) = dims3(dy, "mix_tokens_backward")?;
    let mut out = vec![0.0; dy.numel()];
    for ni in 0..n {
        let r = ni * t * d..(ni + 1) * t * d;
        matmul_at_into(matrix.data(), &dy.data()[r.clone()], &mut out[r], t, t, d);
    }
    Tensor::new(dy.shape().to_vec(), out)
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
}

fn project(x: &[f64], w: &Tensor, rows: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    matmul_bt_into(x, w.data(), &mut out, rows, d, d);
    out
}

/// Single-head attention. Projections are `[D, D]` in `[out, in]` layout,
/// no biases, no output projection.
pub fn attention_forward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<(Tensor, AttentionCache)> {
    let (n, t, d) = dims3(x, "attention")?;
    for w in [wq, wk, wv] {
        if w.shape() != [d, d] {
            return Err(FedError::shape("attention projection", w.shape(), &[d, d]));
        }
    }
    let rows = n * t;
    let q = project(x.data(), wq, rows, d);
    let k = project(x.data(), wk, rows, d);
    let v = project(x.data(), wv, rows, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![0.0; n * t * t];
    let mut out = vec![0.0; rows * d];
    for ni in 0..n {
        let (qs, ks, vs) = (
            &q[ni * t * d..(ni + 1) * t * d],
            &k[ni * t * d..(ni + 1) * t * d],
            &v[ni * t * d..(ni + 1) * t * d],
        );
        let a = &mut attn[ni * t * t..(ni + 1) * t * t];
        matmul_bt_into(qs, ks, a, t, d, t);
        for row in a.chunks_mut(t) {
            let max = row.iter().map(|s| s * scale).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                z += *s;
            }
            for s in row.iter_mut() {
                *s /= z;
            }
        }
        matmul_into(a, vs, &mut out[ni * t * d..(ni + 1) * t * d], t, t, d);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, AttentionCache { q, k, v, attn }))
}

/// Returns `(dx, dwq, dwk, dwv)`.
pub fn attention_backward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    cache: &AttentionCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (n, t, d) = dims3(x, "attention_backward")?;
    x.same_shape(dy, "attention_backward")?;
    let scale = 1.0 / (d as f64).sqrt();
    let rows = n * t;
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    for ni in 0..n {
        let r = ni * t * d..(ni + 1) * t * d;
        let a = &cache.attn[ni * t * t..(ni + 1) * t * t];
        let g = &dy.data()[r.clone()];
        // dA = dO·Vᵀ
        let mut da = vec![0.0; t * t];
        matmul_bt_into(g, &cache.v[r.clone()], &mut da, t, d, t);
        // dV = Aᵀ·dO
        matmul_at_into(a, g, &mut dv[r.clone()], t, t, d);
        // softmax backward, folded with the score scale
        let mut ds = vec![0.0; t * t];
        for i in 0..t {
            let dot: f64 = (0..t).map(|j| da[i * t + j] * a[i * t + j]).sum();
            for j in 0..t {
                ds[i * t + j] = a[i * t + j] * (da[i * t + j] - dot) * scale;
            }
        }
        matmul_into(&ds, &cache.k[r.clone()], &mut dq[r.clone()], t, t, d);
        matmul_at_into(&ds, &cache.q[r.clone()], &mut dk[r], t, t, d);
    }
    let mut dx = vec![0.0; rows * d];
    let mut grads = Vec::with_capacity(3);
    for (dp, w) in [(&dq, wq), (&dk, wk), (&dv, wv)] {
        matmul_into(dp, w.data(), &mut dx, rows, d, d);
        let mut dw = vec![0.0; d * d];
        matmul_at_into(dp, x.data(), &mut dw, rows, d, d);
        grads.push(Tensor::new(vec![d, d], dw)?);
    }
    let dwv = grads.pop().unwrap();
    let dwk = grads.pop().unwrap();
    let dwq = grads.pop().unwrap();
    Ok((Tensor::new(x.shape().to_vec(), dx)?, dwq, dwk, dwv))
}

use crate::error::{FedError, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

fn rows(x: &Tensor, in_features: usize) -> Result<usize> {
    let last = *x.shape().last().unwrap_or(&0);
    if x.rank() < 2 || last != in_features {
        return Err(FedError::shape("linear", x.shape(), &[in_features]));
    }
    Ok(x.numel() / in_features)
}

/// `y = x·Wᵀ + b` over the last axis. `weight` is `[out, in]`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    if bias.shape() != [out_f] {
        return Err(FedError::shape("linear bias", bias.shape(), &[out_f]));
    }
    let m = rows(x, in_f)?;
    let mut out = vec![0.0; m * out_f];
    for r in 0..m {
        out[r * out_f..(r + 1) * out_f].copy_from_slice(bias.data());
    }
    matmul_bt_into(x.data(), weight.data(), &mut out, m, in_f, out_f);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(shape, out)
}

/// Returns `(dx, dweight, dbias)`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    let m = rows(x, in_f)?;
    let mut dx = vec![0.0; m * in_f];
    matmul_into(dy.data(), weight.data(), &mut dx, m, out_f, in_f);
    let mut dw = vec![0.0; out_f * in_f];
    matmul_at_into(dy.data(), x.data(), &mut dw, m, out_f, in_f);
    let mut db = vec![0.0; out_f];
    for r in 0..m {
        for (d, g) in db.iter_mut().zip(&dy.data()[r * out_f..(r + 1) * out_f]) {
            *d += g;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![out_f, in_f], dw)?,
        Tensor::new(vec![out_f], db)?,
    ))
}

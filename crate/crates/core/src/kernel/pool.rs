use crate::error::{FedError, Result};
use crate::kernel::conv::ConvGeom;
use crate::tensor::Tensor;

fn dims4(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(FedError::shape(op, x.shape(), &[0, 0, 0, 0])),
    }
}

/// Max pooling without padding. Returns the output and, per output element,
/// the flat input index that won (first maximum in scan order).
pub fn maxpool2d_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = dims4(x, "maxpool2d")?;
    let geom = ConvGeom::new(kernel, stride, 0);
    let (oh, ow) = (geom.out_dim(h)?, geom.out_dim(w)?);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

pub fn avgpool2d_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "avgpool2d")?;
    let geom = ConvGeom::new(kernel, stride, 0);
    let (oh, ow) = (geom.out_dim(h)?, geom.out_dim(w)?);
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        acc += x.data()[base + (oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avgpool2d_backward(input_shape: &[usize], kernel: usize, stride: usize, dy: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut dx = Tensor::zeros(input_shape);
    for plane in 0..input_shape[0] * input_shape[1] {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy.data()[(plane * oh + oy) * ow + ox] * inv;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        dx.data_mut()[base + (oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// `[N,C,H,W] -> [N,C]` spatial mean.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "global_avg_pool")?;
    let s = h * w;
    let out = x
        .data()
        .chunks(s)
        .map(|p| p.iter().sum::<f64>() / s as f64)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let s = input_shape[2] * input_shape[3];
    let mut dx = Vec::with_capacity(dy.numel() * s);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g / s as f64, s));
    }
    Tensor::new(input_shape.to_vec(), dx).expect("global_avg_pool_backward shape")
}

/// `[N,T,D] -> [N,D]` mean over tokens.
pub fn token_mean_forward(x: &Tensor) -> Result<Tensor> {
    let (n, t, d) = match *x.shape() {
        [n, t, d] => (n, t, d),
        _ => return Err(FedError::shape("token_mean", x.shape(), &[0, 0, 0])),
    };
    let mut out = vec![0.0; n * d];
    for ni in 0..n {
        for ti in 0..t {
            let row = &x.data()[(ni * t + ti) * d..(ni * t + ti + 1) * d];
            for (o, v) in out[ni * d..(ni + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    let inv = 1.0 / t as f64;
    for o in &mut out {
        *o *= inv;
    }
    Tensor::new(vec![n, d], out)
}

pub fn token_mean_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, t, d) = (input_shape[0], input_shape[1], input_shape[2]);
    let inv = 1.0 / t as f64;
    let mut dx = Vec::with_capacity(n * t * d);
    for ni in 0..n {
        for _ in 0..t {
            dx.extend(dy.data()[ni * d..(ni + 1) * d].iter().map(|g| g * inv));
        }
    }
    Tensor::new(input_shape.to_vec(), dx).expect("token_mean_backward shape")
}

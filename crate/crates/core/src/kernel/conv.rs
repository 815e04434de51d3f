use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeom { kernel, stride, padding }
    }

    /// `⌊(n + 2p − k)/s⌋ + 1`, or a config error when non-positive.
    pub fn out_dim(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.padding;
        if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
            return Err(FedError::Config(format!(
                "non-positive output dimension: input {n}, kernel {}, stride {}, padding {}",
                self.kernel, self.stride, self.padding
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

fn check(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let ws = weight.shape();
    if x.rank() != 4 || ws.len() != 4 || ws[1] != x.shape()[1] || ws[2] != ws[3] {
        return Err(FedError::shape("conv2d", x.shape(), ws));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3], ws[0]))
}

/// Output positions `o` along one axis whose input `o·stride + offset − pad`
/// falls inside `[0, n)`.
fn valid_range(n: usize, out: usize, offset: usize, geom: ConvGeom) -> std::ops::Range<usize> {
    let (s, p) = (geom.stride, geom.padding);
    let lo = if offset >= p { 0 } else { (p - offset).div_ceil(s) };
    let hi = if n + p > offset { ((n + p - offset - 1) / s + 1).min(out) } else { 0 };
    lo.min(hi)..hi
}

/// Unfolds one sample `[C,H,W]` into `[C·k·k, oh·ow]` patch columns.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, geom: ConvGeom, oh: usize, ow: usize, cols: &mut [f64]) {
    let k = geom.kernel;
    let p = oh * ow;
    for ic in 0..c {
        let plane = &x[ic * h * w..][..h * w];
        for ky in 0..k {
            let ys = valid_range(h, oh, ky, geom);
            for kx in 0..k {
                let xs = valid_range(w, ow, kx, geom);
                let row = &mut cols[((ic * k + ky) * k + kx) * p..][..p];
                row.fill(0.0);
                for oy in ys.clone() {
                    let iy = oy * geom.stride + ky - geom.padding;
                    let dst = &mut row[oy * ow..][..ow];
                    for ox in xs.clone() {
                        dst[ox] = plane[iy * w + ox * geom.stride + kx - geom.padding];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back onto `dx`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, geom: ConvGeom, oh: usize, ow: usize, dx: &mut [f64]) {
    let k = geom.kernel;
    let p = oh * ow;
    for ic in 0..c {
        let plane = &mut dx[ic * h * w..][..h * w];
        for ky in 0..k {
            let ys = valid_range(h, oh, ky, geom);
            for kx in 0..k {
                let xs = valid_range(w, ow, kx, geom);
                let row = &cols[((ic * k + ky) * k + kx) * p..][..p];
                for oy in ys.clone() {
                    let iy = oy * geom.stride + ky - geom.padding;
                    let src = &row[oy * ow..][..ow];
                    for ox in xs.clone() {
                        plane[iy * w + ox * geom.stride + kx - geom.padding] += src[ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation with bias. `x` is `[N,C,H,W]`, `weight` is `[O,C,k,k]`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let (n, c, h, w, o) = check(x, weight)?;
    if geom.kernel != weight.shape()[2] {
        return Err(FedError::shape("conv2d kernel", weight.shape(), &[geom.kernel]));
    }
    if bias.shape() != [o] {
        return Err(FedError::shape("conv2d bias", bias.shape(), &[o]));
    }
    let (oh, ow) = (geom.out_dim(h)?, geom.out_dim(w)?);
    let (p, ckk) = (oh * ow, c * geom.kernel * geom.kernel);
    let mut cols = vec![0.0; ckk * p];
    let mut out = vec![0.0; n * o * p];
    for ni in 0..n {
        im2col(&x.data()[ni * c * h * w..][..c * h * w], c, h, w, geom, oh, ow, &mut cols);
        let y = &mut out[ni * o * p..][..o * p];
        for (oc, row) in y.chunks_mut(p).enumerate() {
            row.fill(bias.data()[oc]);
        }
        matmul_into(weight.data(), &cols, y, o, ckk, p);
    }
    let t = Tensor::new(vec![n, o, oh, ow], out)?;
    t.debug_check_finite("conv2d");
    Ok(t)
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    geom: ConvGeom,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w, o) = check(x, weight)?;
    let (oh, ow) = (geom.out_dim(h)?, geom.out_dim(w)?);
    if dy.shape() != [n, o, oh, ow] {
        return Err(FedError::shape("conv2d_backward", dy.shape(), &[n, o, oh, ow]));
    }
    let (p, ckk, chw) = (oh * ow, c * geom.kernel * geom.kernel, c * h * w);
    let mut cols = vec![0.0; ckk * p];
    let mut dcols = vec![0.0; ckk * p];
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; o];
    for ni in 0..n {
        let g = &dy.data()[ni * o * p..][..o * p];
        for (oc, row) in g.chunks(p).enumerate() {
            db[oc] += row.iter().sum::<f64>();
        }
        im2col(&x.data()[ni * chw..][..chw], c, h, w, geom, oh, ow, &mut cols);
        matmul_bt_into(g, &cols, &mut dw, o, p, ckk);
        dcols.fill(0.0);
        matmul_at_into(weight.data(), g, &mut dcols, o, ckk, p);
        col2im(&dcols, c, h, w, geom, oh, ow, &mut dx[ni * chw..][..chw]);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![o], db)?,
    ))
}

//! Dense row-major tensor of `f64` values.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(FedError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FedError::Config("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(FedError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(FedError::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every element through `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Rows `[start, start+len)` along the leading axis.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let row = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&self) -> Tensor {
        debug_assert_eq!(self.rank(), 3);
        let (b, r, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![0.0; self.data.len()];
        for n in 0..b {
            let base = n * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = self.data[base + i * c + j];
                }
            }
        }
        Tensor {
            shape: vec![b, c, r],
            data: out,
        }
    }

    pub(crate) fn debug_check_finite(&self, op: &str) {
        debug_assert!(self.is_finite(), "non-finite value produced by {op}");
    }
}

/// `a[m×k] · b[k×n]`, accumulating along `k` in index order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(FedError::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    let t = Tensor {
        shape: vec![m, n],
        data: out,
    };
    t.debug_check_finite("matmul");
    Ok(t)
}

/// `out[r, :] += Σ_q coef(r, q) · b[q, :]` over `q < inner`, every element
/// accumulating in ascending `q`. Rows go four at a time so each `b` row is
/// read once per block.
#[inline(always)]
fn accumulate_rows(out: &mut [f64], n: usize, inner: usize, b: &[f64], coef: impl Fn(usize, usize) -> f64) {
    let rows = out.len() / n;
    let mut r = 0;
    while r + 4 <= rows {
        let (o0, rest) = out[r * n..(r + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for q in 0..inner {
            let (c0, c1, c2, c3) = (coef(r, q), coef(r + 1, q), coef(r + 2, q), coef(r + 3, q));
            let brow = &b[q * n..][..n];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += c0 * bv;
                o1[j] += c1 * bv;
                o2[j] += c2 * bv;
                o3[j] += c3 * bv;
            }
        }
        r += 4;
    }
    for r in r..rows {
        let orow = &mut out[r * n..][..n];
        for q in 0..inner {
            let c = coef(r, q);
            for (o, &bv) in orow.iter_mut().zip(&b[q * n..][..n]) {
                *o += c * bv;
            }
        }
    }
}

/// Raw `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    accumulate_rows(&mut out[..m * n], n, k, b, |r, q| a[r * k + q]);
}

/// Dot product with four interleaved partial sums (fixed order).
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Raw `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Raw `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    accumulate_rows(&mut out[..k * n], n, m, b, |r, q| a[q * k + r]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_and_basis() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[5.0]);
    }

    #[test]
    fn random_matches_triple_loop() {
        let mut rng = crate::rng::stream(3, &[]);
        let a = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), naive(&a, &b).as_slice());
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}

//! Batch, layer and group normalization over a shared grouped-statistics
//! kernel. Every element belongs to one statistics group and one affine
//! channel; the three modes differ only in how groups are assigned.
//!
//! Channel axis by rank: `[N,F]` → F, `[N,C,H,W]` → C, `[N,T,D]` → D.
//! Variance is the biased (population) estimate.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Weight kept on the previous running statistic at each update.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Per channel, across the batch and spatial/token positions.
    Batch,
    /// Per sample over all feature axes; for `[N,T,D]`, per token over D.
    Layer,
    /// Per sample, per group of contiguous channels.
    Group(usize),
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    group_of: Vec<usize>,
    counts: Vec<usize>,
}

struct Layout {
    n: usize,
    channels: usize,
    /// Elements sharing one channel index in a row: H·W for images, 1 otherwise.
    spatial: usize,
    per_sample: usize,
    len: usize,
}

impl Layout {
    #[inline]
    fn channel(&self, i: usize) -> usize {
        (i / self.spatial) % self.channels
    }
}

fn layout(x: &Tensor) -> Result<Layout> {
    let s = x.shape();
    let (n, channels, spatial) = match s.len() {
        2 => (s[0], s[1], 1),
        3 => (s[0], s[2], 1),
        4 => (s[0], s[1], s[2] * s[3]),
        _ => return Err(FedError::shape("norm", s, &[0, 0])),
    };
    let len = x.numel();
    Ok(Layout { n, channels, spatial, per_sample: len / n, len })
}

fn assign_groups(l: &Layout, mode: NormMode, rank: usize) -> Result<(Vec<usize>, usize)> {
    let (group_of, groups) = match mode {
        NormMode::Batch => ((0..l.len).map(|i| l.channel(i)).collect(), l.channels),
        // One group per (sample, token): consecutive runs of D elements.
        NormMode::Layer if rank == 3 => ((0..l.len).map(|i| i / l.channels).collect(), l.len / l.channels),
        NormMode::Layer => ((0..l.len).map(|i| i / l.per_sample).collect(), l.n),
        NormMode::Group(g) => {
            if g == 0 || l.channels % g != 0 {
                return Err(FedError::Config(format!(
                    "group norm: {} channels not divisible into {g} groups",
                    l.channels
                )));
            }
            let per = l.channels / g;
            ((0..l.len).map(|i| (i / l.per_sample) * g + l.channel(i) / per).collect(), l.n * g)
        }
    };
    Ok((group_of, groups))
}

fn check_affine(l: &Layout, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [l.channels] || beta.shape() != [l.channels] {
        return Err(FedError::shape("norm affine", gamma.shape(), &[l.channels]));
    }
    Ok(())
}

/// Per-group mean and biased variance, accumulated in flat index order.
fn group_stats(x: &[f64], group_of: &[usize], groups: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut counts = vec![0usize; groups];
    let mut mean = vec![0.0; groups];
    for (&v, &g) in x.iter().zip(group_of) {
        mean[g] += v;
        counts[g] += 1;
    }
    for (m, &c) in mean.iter_mut().zip(&counts) {
        *m /= c as f64;
    }
    let mut var = vec![0.0; groups];
    for (&v, &g) in x.iter().zip(group_of) {
        let d = v - mean[g];
        var[g] += d * d;
    }
    for (s, &c) in var.iter_mut().zip(&counts) {
        *s /= c as f64;
    }
    (mean, var, counts)
}

/// Training-mode forward. For [`NormMode::Batch`] the batch mean and
/// variance per channel are also returned so the caller can update running
/// statistics.
#[allow(clippy::type_complexity)]
pub fn norm_train_forward(
    x: &Tensor,
    mode: NormMode,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache, Option<(Vec<f64>, Vec<f64>)>)> {
    if eps <= 0.0 {
        return Err(FedError::Config("normalization epsilon must be positive".into()));
    }
    let l = layout(x)?;
    check_affine(&l, gamma, beta)?;
    if mode == NormMode::Batch && l.n < 2 {
        return Err(FedError::Runtime(
            "batch norm in train mode needs at least 2 samples (degenerate batch)".into(),
        ));
    }
    let (group_of, groups) = assign_groups(&l, mode, x.rank())?;
    let (mean, var, counts) = group_stats(x.data(), &group_of, groups);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.numel());
    let mut y = Vec::with_capacity(x.numel());
    for (i, &v) in x.data().iter().enumerate() {
        let g = group_of[i];
        let c = l.channel(i);
        let h = (v - mean[g]) * inv_std[g];
        xhat.push(h);
        y.push(gamma.data()[c] * h + beta.data()[c]);
    }
    let batch_stats = (mode == NormMode::Batch).then(|| (mean, var));
    let y = Tensor::new(x.shape().to_vec(), y)?;
    y.debug_check_finite("norm");
    Ok((
        y,
        NormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
            group_of,
            counts,
        },
        batch_stats,
    ))
}

/// Batch norm inference using running statistics.
pub fn norm_eval_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let l = layout(x)?;
    check_affine(&l, gamma, beta)?;
    check_affine(&l, running_mean, running_var)?;
    let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let y = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, l.channel(i)))
        .map(|(v, c)| gamma.data()[c] * (v - running_mean.data()[c]) * inv_std[c] + beta.data()[c])
        .collect();
    Tensor::new(x.shape().to_vec(), y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn norm_backward(cache: &NormCache, gamma: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    cache.xhat.same_shape(dy, "norm_backward")?;
    let l = layout(dy)?;
    let groups = cache.counts.len();
    let xhat = cache.xhat.data();
    let mut dgamma = vec![0.0; l.channels];
    let mut dbeta = vec![0.0; l.channels];
    let mut dxhat = Vec::with_capacity(dy.numel());
    let mut sum1 = vec![0.0; groups];
    let mut sum2 = vec![0.0; groups];
    for (i, &g_up) in dy.data().iter().enumerate() {
        let c = l.channel(i);
        let g = cache.group_of[i];
        dgamma[c] += g_up * xhat[i];
        dbeta[c] += g_up;
        let d = g_up * gamma.data()[c];
        sum1[g] += d;
        sum2[g] += d * xhat[i];
        dxhat.push(d);
    }
    let dx = dxhat
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let g = cache.group_of[i];
            let m = cache.counts[g] as f64;
            cache.inv_std[g] * (d - sum1[g] / m - xhat[i] * sum2[g] / m)
        })
        .collect();
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::new(vec![l.channels], dgamma)?,
        Tensor::new(vec![l.channels], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> Tensor {
        Tensor::filled(&[c], 1.0)
    }

    #[test]
    fn constant_batch_normalizes_to_zero() {
        let x = Tensor::filled(&[4, 3], 2.5);
        let (y, _, _) = norm_train_forward(&x, NormMode::Batch, &ones(3), &Tensor::zeros(&[3]), DEFAULT_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -3.0, 4.0, 0.5]).unwrap();
        let (y, _, _) =
            norm_train_forward(&x, NormMode::Batch, &Tensor::zeros(&[2]), &Tensor::filled(&[2], 5.0), DEFAULT_EPS)
                .unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn two_sample_batch_closed_form() {
        // Two points a, b: mean (a+b)/2, biased variance ((a-b)/2)^2.
        let (a, b) = (1.0f64, 4.0f64);
        let x = Tensor::new(vec![2, 1], vec![a, b]).unwrap();
        let (y, _, stats) = norm_train_forward(&x, NormMode::Batch, &ones(1), &Tensor::zeros(&[1]), DEFAULT_EPS).unwrap();
        let var = ((a - b) / 2.0).powi(2);
        let expected = (a - (a + b) / 2.0) / (var + DEFAULT_EPS).sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-12);
        assert!((y.data()[1] + expected).abs() < 1e-12);
        let (m, v) = stats.unwrap();
        assert_eq!(m, vec![2.5]);
        assert_eq!(v, vec![2.25]);
    }

    #[test]
    fn single_sample_train_batch_is_rejected() {
        let x = Tensor::zeros(&[1, 3]);
        let err = norm_train_forward(&x, NormMode::Batch, &ones(3), &Tensor::zeros(&[3]), DEFAULT_EPS).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
    }

    #[test]
    fn layer_norm_closed_form() {
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _, _) = norm_train_forward(&x, NormMode::Layer, &ones(4), &Tensor::zeros(&[4]), DEFAULT_EPS).unwrap();
        let std = (1.25f64 + DEFAULT_EPS).sqrt();
        for (i, v) in y.data().iter().enumerate() {
            assert!((v - ((i as f64 + 1.0) - 2.5) / std).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_size_one_yields_beta() {
        let x = Tensor::new(vec![3, 1], vec![7.0, -1.0, 0.2]).unwrap();
        let (y, _, _) = norm_train_forward(&x, NormMode::Layer, &ones(1), &Tensor::filled(&[1], 0.3), DEFAULT_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn group_norm_indivisible_is_config_error() {
        let x = Tensor::zeros(&[2, 3, 2, 2]);
        let err = norm_train_forward(&x, NormMode::Group(2), &ones(3), &Tensor::zeros(&[3]), DEFAULT_EPS).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn group_norm_constant_input_yields_beta() {
        let x = Tensor::filled(&[2, 4, 2, 2], -1.5);
        let beta = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (y, _, _) = norm_train_forward(&x, NormMode::Group(2), &ones(4), &beta, DEFAULT_EPS).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[(i / 4) % 4]);
        }
    }
}

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Label-preserving per-client input transform, applied at batch time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FeatureTransform {
    #[default]
    None,
    /// Rotate each plane by `k` quarter turns counter-clockwise.
    Rotate90k { k: u32 },
    /// Output channel `c` takes input channel `perm[c]`.
    ChannelPermute { perm: Vec<usize> },
    /// Fixed per-sample additive noise keyed by `(seed, sample index)`.
    GaussianNoise { sigma: f64, seed: u64 },
}

impl FeatureTransform {
    pub fn is_none(&self) -> bool {
        matches!(self, FeatureTransform::None)
    }

    pub fn label(&self) -> String {
        match self {
            FeatureTransform::None => "none".into(),
            FeatureTransform::Rotate90k { k } => format!("rotate90x{k}"),
            FeatureTransform::ChannelPermute { perm } => format!(
                "channel_permute[{}]",
                perm.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            ),
            FeatureTransform::GaussianNoise { sigma, .. } => format!("gaussian_noise({sigma})"),
        }
    }

    pub fn validate(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        match self {
            FeatureTransform::Rotate90k { k } if k % 2 == 1 && h != w => {
                Err(FedError::Config(format!("rotation of non-square {h}x{w} images")))
            }
            FeatureTransform::ChannelPermute { perm } => {
                let mut seen = vec![false; channels];
                if perm.len() != channels || perm.iter().any(|&p| p >= channels || std::mem::replace(&mut seen[p], true)) {
                    return Err(FedError::Config(format!("{perm:?} is not a permutation of {channels} channels")));
                }
                Ok(())
            }
            FeatureTransform::GaussianNoise { sigma, .. } if !(*sigma >= 0.0) => {
                Err(FedError::Config("noise sigma must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }

    /// Transforms a `[B, C, H, W]` batch whose rows are dataset samples
    /// `indices`.
    pub fn apply(&self, batch: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let s = batch.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        self.validate(c, h, w)?;
        match self {
            FeatureTransform::None => Ok(batch.clone()),
            FeatureTransform::Rotate90k { k } => {
                let mut out = batch.clone();
                for _ in 0..k % 4 {
                    out = rotate90(&out);
                }
                Ok(out)
            }
            FeatureTransform::ChannelPermute { perm } => {
                let plane = h * w;
                let mut out = Vec::with_capacity(batch.numel());
                for n in 0..b {
                    for &src in perm {
                        let o = (n * c + src) * plane;
                        out.extend_from_slice(&batch.data()[o..o + plane]);
                    }
                }
                Tensor::new(s.to_vec(), out)
            }
            FeatureTransform::GaussianNoise { sigma, seed } => {
                let noise = Normal::new(0.0, *sigma).map_err(|e| FedError::Config(e.to_string()))?;
                let per = c * h * w;
                let mut out = batch.clone();
                for (n, &idx) in indices.iter().enumerate() {
                    let mut r = rng::stream(*seed, &[rng::TAG_NOISE, idx as u64]);
                    for v in &mut out.data_mut()[n * per..(n + 1) * per] {
                        *v += noise.sample(&mut r);
                    }
                }
                Ok(out)
            }
        }
    }
}

/// One quarter turn counter-clockwise: `out[y][x] = in[x][W-1-y]`.
fn rotate90(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = vec![0.0; x.numel()];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..w {
            for xx in 0..h {
                out[base + y * h + xx] = x.data()[base + xx * w + (w - 1 - y)];
            }
        }
    }
    Tensor::new(vec![s[0], s[1], w, h], out).expect("rotation preserves size")
}

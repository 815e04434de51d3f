//! Token mixers for the MetaFormer block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel::{attention_forward, mix_tokens};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenMixerKind {
    Identity,
    Pooling,
    RandomMatrix,
    Attention,
}

/// A resolved mixer with its weights.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenMixer {
    Identity,
    /// Fixed `[T, T]` matrix: local average pooling or a frozen random matrix.
    Matrix(Tensor),
    Attention { wq: Tensor, wk: Tensor, wv: Tensor },
}

/// Applies `mixer` to `[N, T, D]` tokens.
pub fn token_mixer_apply(mixer: &TokenMixer, tokens: &Tensor) -> Result<Tensor> {
    match mixer {
        TokenMixer::Identity => Ok(tokens.clone()),
        TokenMixer::Matrix(m) => mix_tokens(m, tokens),
        TokenMixer::Attention { wq, wk, wv } => Ok(attention_forward(tokens, wq, wk, wv)?.0),
    }
}

/// 3×3 average over the token grid, stride 1, padding excluded from the
/// count. Tokens are indexed row-major: `t = y * grid_w + x`.
pub fn pooling_matrix(grid_h: usize, grid_w: usize) -> Tensor {
    let t = grid_h * grid_w;
    let mut m = Tensor::zeros(&[t, t]);
    for y in 0..grid_h {
        for x in 0..grid_w {
            let ys = y.saturating_sub(1)..(y + 2).min(grid_h);
            let xs = x.saturating_sub(1)..(x + 2).min(grid_w);
            let count = (ys.len() * xs.len()) as f64;
            for ny in ys {
                for nx in xs.clone() {
                    m.data_mut()[(y * grid_w + x) * t + ny * grid_w + nx] = 1.0 / count;
                }
            }
        }
    }
    m
}

/// Row-stochastic random `[T, T]` matrix drawn from `(seed, block)`.
pub fn random_matrix(tokens: usize, seed: u64, block: usize) -> Tensor {
    let mut r = rng::stream(seed, &[rng::TAG_MIXER, block as u64]);
    let mut m = Tensor::zeros(&[tokens, tokens]);
    for row in m.data_mut().chunks_mut(tokens) {
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = r.random_range(0.0..1.0);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_rows_average_neighbours() {
        let m = pooling_matrix(3, 3);
        // corner has 4 neighbours (incl. itself), edge 6, centre 9
        assert_eq!(m.data()[0], 0.25);
        assert_eq!(m.data()[9 + 1], 1.0 / 6.0);
        assert_eq!(m.data()[4 * 9 + 4], 1.0 / 9.0);
        for row in m.data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_returns_input() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(token_mixer_apply(&TokenMixer::Identity, &x).unwrap(), x);
    }
}

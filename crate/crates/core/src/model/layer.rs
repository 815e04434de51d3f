//! Layer graph with a forward tape for reverse-mode gradients.

use crate::error::{FedError, Result};
use crate::kernel::{self, ConvGeom, NormCache, NormMode, AttentionCache};
use crate::model::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) enum MixerLayer {
    /// Fixed mixing matrix held by the layer (pooling).
    Fixed(Tensor),
    /// Mixing matrix stored as a frozen parameter.
    Frozen(usize),
    Attention { wq: usize, wk: usize, wv: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct NormLayer {
    pub mode: NormMode,
    pub gamma: usize,
    pub beta: usize,
    /// `(running_mean, running_var)` for batch norm.
    pub running: Option<(usize, usize)>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Linear { weight: usize, bias: usize },
    Conv2d { weight: usize, bias: usize, geom: ConvGeom },
    GlobalAvgPool,
    TokenMean,
    Relu,
    Gelu,
    Norm(NormLayer),
    Flatten,
    /// `[N, D, gh, gw] -> [N, gh·gw, D]`
    ToTokens,
    Residual(Vec<Layer>),
    Mixer(MixerLayer),
}

pub(crate) enum Saved {
    Input(Tensor),
    Shape(Vec<usize>),
    Norm(NormCache),
    Attention(Tensor, AttentionCache),
    Residual(Vec<Saved>),
    Nothing,
}

pub(crate) type StatUpdates = Vec<(usize, Tensor)>;

fn blend(old: &Tensor, new: &[f64], momentum: f64) -> Tensor {
    let data = old
        .data()
        .iter()
        .zip(new)
        .map(|(&o, &n)| momentum * o + (1.0 - momentum) * n)
        .collect();
    Tensor::new(old.shape().to_vec(), data).expect("running stat shape")
}

impl Layer {
    pub(crate) fn forward(
        &self,
        p: &ParamSet,
        x: Tensor,
        mode: Mode,
        tape: &mut Option<&mut Vec<Saved>>,
        stats: &mut StatUpdates,
    ) -> Result<Tensor> {
        let recording = tape.is_some();
        let (y, saved) = match self {
            Layer::Linear { weight, bias } => {
                let y = kernel::linear_forward(&x, p.tensor(*weight), p.tensor(*bias))?;
                (y, Saved::Input(x))
            }
            Layer::Conv2d { weight, bias, geom } => {
                let y = kernel::conv2d_forward(&x, p.tensor(*weight), p.tensor(*bias), *geom)?;
                (y, Saved::Input(x))
            }
            Layer::GlobalAvgPool => (kernel::global_avg_pool_forward(&x)?, Saved::Shape(x.shape().to_vec())),
            Layer::TokenMean => (kernel::token_mean_forward(&x)?, Saved::Shape(x.shape().to_vec())),
            Layer::Relu => (kernel::relu_forward(&x), Saved::Input(x)),
            Layer::Gelu => (kernel::gelu_forward(&x), Saved::Input(x)),
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let n = shape[0];
                let rest = x.numel() / n;
                (x.reshape(&[n, rest])?, Saved::Shape(shape))
            }
            Layer::ToTokens => {
                let s = x.shape().to_vec();
                if s.len() != 4 {
                    return Err(FedError::shape("to_tokens", &s, &[0, 0, 0, 0]));
                }
                let y = x.reshape(&[s[0], s[1], s[2] * s[3]])?.transpose_last2();
                (y, Saved::Shape(s))
            }
            Layer::Norm(n) => self.norm_forward(n, p, x, mode, stats)?,
            Layer::Residual(inner) => {
                let mut inner_tape = Vec::new();
                let mut sub = if recording { Some(&mut inner_tape) } else { None };
                let mut h = x.clone();
                for l in inner {
                    h = l.forward(p, h, mode, &mut sub, stats)?;
                }
                (x.add(&h)?, Saved::Residual(inner_tape))
            }
            Layer::Mixer(m) => match m {
                MixerLayer::Fixed(mat) => (kernel::mix_tokens(mat, &x)?, Saved::Nothing),
                MixerLayer::Frozen(i) => (kernel::mix_tokens(p.tensor(*i), &x)?, Saved::Nothing),
                MixerLayer::Attention { wq, wk, wv } => {
                    let (y, cache) = kernel::attention_forward(&x, p.tensor(*wq), p.tensor(*wk), p.tensor(*wv))?;
                    (y, Saved::Attention(x, cache))
                }
            },
        };
        if let Some(t) = tape.as_mut() {
            t.push(saved);
        }
        Ok(y)
    }

    fn norm_forward(
        &self,
        n: &NormLayer,
        p: &ParamSet,
        x: Tensor,
        mode: Mode,
        stats: &mut StatUpdates,
    ) -> Result<(Tensor, Saved)> {
        let (gamma, beta) = (p.tensor(n.gamma), p.tensor(n.beta));
        if let (Mode::Eval, Some((rm, rv))) = (mode, n.running) {
            let y = kernel::norm_eval_forward(&x, gamma, beta, p.tensor(rm), p.tensor(rv), n.eps)?;
            return Ok((y, Saved::Nothing));
        }
        let (y, cache, batch) = kernel::norm_train_forward(&x, n.mode, gamma, beta, n.eps)?;
        if let (Some((rm, rv)), Some((mean, var))) = (n.running, batch) {
            stats.push((rm, blend(p.tensor(rm), &mean, n.momentum)));
            stats.push((rv, blend(p.tensor(rv), &var, n.momentum)));
        }
        Ok((y, Saved::Norm(cache)))
    }

    /// Pops this layer's tape entry, accumulates parameter gradients into
    /// `grads` and returns the input gradient.
    pub(crate) fn backward(&self, p: &ParamSet, saved: Saved, dy: Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        fn acc(grads: &mut [Tensor], i: usize, g: &Tensor) {
            for (a, b) in grads[i].data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        let missing = || FedError::Runtime("tape entry does not match layer (backward after eval forward?)".into());
        Ok(match (self, saved) {
            (Layer::Linear { weight, bias }, Saved::Input(x)) => {
                let (dx, dw, db) = kernel::linear_backward(&x, p.tensor(*weight), &dy)?;
                acc(grads, *weight, &dw);
                acc(grads, *bias, &db);
                dx
            }
            (Layer::Conv2d { weight, bias, geom }, Saved::Input(x)) => {
                let (dx, dw, db) = kernel::conv2d_backward(&x, p.tensor(*weight), *geom, &dy)?;
                acc(grads, *weight, &dw);
                acc(grads, *bias, &db);
                dx
            }
            (Layer::GlobalAvgPool, Saved::Shape(shape)) => kernel::global_avg_pool_backward(&shape, &dy),
            (Layer::TokenMean, Saved::Shape(shape)) => kernel::token_mean_backward(&shape, &dy),
            (Layer::Relu, Saved::Input(x)) => kernel::relu_backward(&x, &dy),
            (Layer::Gelu, Saved::Input(x)) => kernel::gelu_backward(&x, &dy),
            (Layer::Flatten, Saved::Shape(shape)) => dy.reshape(&shape)?,
            (Layer::ToTokens, Saved::Shape(s)) => dy.transpose_last2().reshape(&s)?,
            (Layer::Norm(n), Saved::Norm(cache)) => {
                let (dx, dg, db) = kernel::norm_backward(&cache, p.tensor(n.gamma), &dy)?;
                acc(grads, n.gamma, &dg);
                acc(grads, n.beta, &db);
                dx
            }
            (Layer::Residual(inner), Saved::Residual(mut tape)) => {
                let mut g = dy.clone();
                for l in inner.iter().rev() {
                    let s = tape.pop().ok_or_else(missing)?;
                    g = l.backward(p, s, g, grads)?;
                }
                dy.add(&g)?
            }
            (Layer::Mixer(MixerLayer::Fixed(m)), Saved::Nothing) => kernel::mix_tokens_backward(m, &dy)?,
            (Layer::Mixer(MixerLayer::Frozen(i)), Saved::Nothing) => kernel::mix_tokens_backward(p.tensor(*i), &dy)?,
            (Layer::Mixer(MixerLayer::Attention { wq, wk, wv }), Saved::Attention(x, cache)) => {
                let (dx, gq, gk, gv) =
                    kernel::attention_backward(&x, p.tensor(*wq), p.tensor(*wk), p.tensor(*wv), &cache, &dy)?;
                acc(grads, *wq, &gq);
                acc(grads, *wk, &gk);
                acc(grads, *wv, &gv);
                dx
            }
            _ => return Err(missing()),
        })
    }

    pub(crate) fn is_mixer(&self) -> bool {
        matches!(self, Layer::Mixer(_))
    }
}

//! Desk-scale model families: an MLP, a small CNN with pluggable
//! normalization, and a MetaFormer with pluggable token mixers.
//!
//! Parameter names are hierarchical (`block1.norm.gamma`) and every entry is
//! tagged with a [`ParamRole`] so aggregation can separate norm parameters.

pub mod layer;
pub mod mixer;
pub mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::kernel::{self, ConvGeom, NormMode, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::rng;
use crate::tensor::Tensor;
use layer::{Layer, MixerLayer, NormLayer, Saved};
pub use layer::Mode;
pub use mixer::{pooling_matrix, random_matrix, token_mixer_apply, TokenMixer, TokenMixerKind};
pub use params::{ParamEntry, ParamRole, ParamSet, PartitionPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "TinyCNN")]
    TinyCnn,
    #[serde(rename = "TinyMetaFormer")]
    TinyMetaFormer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    BatchNorm,
    LayerNorm,
    GroupNorm,
    None,
}

fn default_groups() -> usize {
    2
}
fn default_patch() -> usize {
    4
}
fn default_mlp_ratio() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub norm_kind: NormKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_mixer: Option<TokenMixerKind>,
    pub depth: usize,
    pub width: usize,
    pub num_classes: usize,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub seed: u64,
    /// Group count for [`NormKind::GroupNorm`].
    #[serde(default = "default_groups")]
    pub norm_groups: usize,
    /// MetaFormer patch size (non-overlapping patch embedding).
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    /// MetaFormer channel-MLP hidden width as a multiple of `width`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl ModelSpec {
    pub fn new(family: Family, norm_kind: NormKind, depth: usize, width: usize, num_classes: usize, input_shape: [usize; 3]) -> Self {
        ModelSpec {
            family,
            norm_kind,
            token_mixer: (family == Family::TinyMetaFormer).then_some(TokenMixerKind::Pooling),
            depth,
            width,
            num_classes,
            input_shape,
            seed: 0,
            norm_groups: default_groups(),
            patch_size: default_patch(),
            mlp_ratio: default_mlp_ratio(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedError::Config(m));
        if (self.family == Family::TinyMetaFormer) != self.token_mixer.is_some() {
            return bad("model.token_mixer must be set exactly when family is TinyMetaFormer".into());
        }
        if self.depth == 0 || self.width == 0 {
            return bad("model.depth and model.width must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad("model.num_classes must be at least 2".into());
        }
        if self.input_shape.contains(&0) {
            return bad("model.input_shape dimensions must be positive".into());
        }
        if self.norm_kind == NormKind::GroupNorm && (self.norm_groups == 0 || self.width % self.norm_groups != 0) {
            return bad(format!("model.norm_groups {} must divide width {}", self.norm_groups, self.width));
        }
        if self.family == Family::TinyMetaFormer {
            let [_, h, w] = self.input_shape;
            if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
                return bad(format!("model.patch_size {} must divide input {h}x{w}", self.patch_size));
            }
            if self.mlp_ratio == 0 {
                return bad("model.mlp_ratio must be at least 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    layers: Vec<Layer>,
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    params: ParamSet,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<usize> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut r = rng::stream(self.spec.seed, &[rng::TAG_INIT, rng::hash_str(&name)]);
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-bound..bound)).collect();
        self.params.push(name, Tensor::new(shape.to_vec(), data)?, ParamRole::Weight)
    }

    fn zeros(&mut self, name: String, shape: &[usize], role: ParamRole) -> Result<usize> {
        self.params.push(name, Tensor::zeros(shape), role)
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize) -> Result<Layer> {
        let weight = self.uniform(format!("{prefix}.weight"), &[out, inp], inp)?;
        let bias = self.zeros(format!("{prefix}.bias"), &[out], ParamRole::Bias)?;
        Ok(Layer::Linear { weight, bias })
    }

    fn conv(&mut self, prefix: &str, inp: usize, out: usize, geom: ConvGeom) -> Result<Layer> {
        let k = geom.kernel;
        let weight = self.uniform(format!("{prefix}.weight"), &[out, inp, k, k], inp * k * k)?;
        let bias = self.zeros(format!("{prefix}.bias"), &[out], ParamRole::Bias)?;
        Ok(Layer::Conv2d { weight, bias, geom })
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> Result<Option<Layer>> {
        let mode = match self.spec.norm_kind {
            NormKind::None => return Ok(None),
            NormKind::BatchNorm => NormMode::Batch,
            NormKind::LayerNorm => NormMode::Layer,
            NormKind::GroupNorm => NormMode::Group(self.spec.norm_groups),
        };
        let gamma = self.params.push(format!("{prefix}.gamma"), Tensor::filled(&[channels], 1.0), ParamRole::NormAffine)?;
        let beta = self.zeros(format!("{prefix}.beta"), &[channels], ParamRole::NormAffine)?;
        let running = if mode == NormMode::Batch {
            let rm = self.zeros(format!("{prefix}.running_mean"), &[channels], ParamRole::NormRunningStat)?;
            let rv = self.params.push(
                format!("{prefix}.running_var"),
                Tensor::filled(&[channels], 1.0),
                ParamRole::NormRunningStat,
            )?;
            Some((rm, rv))
        } else {
            None
        };
        Ok(Some(Layer::Norm(NormLayer { mode, gamma, beta, running, eps: DEFAULT_EPS, momentum: DEFAULT_MOMENTUM })))
    }

    fn mlp(&mut self) -> Result<Vec<Layer>> {
        let s = self.spec;
        let mut layers = vec![Layer::Flatten];
        let mut inp = s.input_shape.iter().product();
        for i in 0..s.depth {
            layers.push(self.linear(&format!("fc{i}"), inp, s.width)?);
            layers.extend(self.norm(&format!("norm{i}"), s.width)?);
            layers.push(Layer::Relu);
            inp = s.width;
        }
        layers.push(self.linear("head", inp, s.num_classes)?);
        Ok(layers)
    }

    fn cnn(&mut self) -> Result<Vec<Layer>> {
        let s = self.spec;
        let mut layers = Vec::new();
        let mut inp = s.input_shape[0];
        for i in 0..s.depth {
            layers.push(self.conv(&format!("block{i}.conv"), inp, s.width, ConvGeom::new(3, 1, 1))?);
            layers.extend(self.norm(&format!("block{i}.norm"), s.width)?);
            layers.push(Layer::Relu);
            inp = s.width;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(self.linear("head", s.width, s.num_classes)?);
        Ok(layers)
    }

    fn metaformer(&mut self) -> Result<Vec<Layer>> {
        let s = self.spec;
        let [c, h, w] = s.input_shape;
        let p = s.patch_size;
        let (gh, gw) = (h / p, w / p);
        let d = s.width;
        let mut layers = vec![self.conv("embed", c, d, ConvGeom::new(p, p, 0))?, Layer::ToTokens];
        for i in 0..s.depth {
            let mut mix = Vec::new();
            mix.extend(self.norm(&format!("block{i}.norm1"), d)?);
            let mixer = match s.token_mixer.expect("validated") {
                // Identity mixing is the absence of a mixer layer.
                TokenMixerKind::Identity => None,
                TokenMixerKind::Pooling => Some(MixerLayer::Fixed(pooling_matrix(gh, gw))),
                TokenMixerKind::RandomMatrix => {
                    let m = random_matrix(gh * gw, s.seed, i);
                    Some(MixerLayer::Frozen(self.params.push(format!("block{i}.mixer.matrix"), m, ParamRole::Frozen)?))
                }
                TokenMixerKind::Attention => Some(MixerLayer::Attention {
                    wq: self.uniform(format!("block{i}.mixer.q_weight"), &[d, d], d)?,
                    wk: self.uniform(format!("block{i}.mixer.k_weight"), &[d, d], d)?,
                    wv: self.uniform(format!("block{i}.mixer.v_weight"), &[d, d], d)?,
                }),
            };
            mix.extend(mixer.map(Layer::Mixer));
            layers.push(Layer::Residual(mix));
            self.channel_mlp(&mut layers, i)?;
        }
        layers.extend(self.norm("final_norm", d)?);
        layers.push(Layer::TokenMean);
        layers.push(self.linear("head", d, s.num_classes)?);
        Ok(layers)
    }

    fn channel_mlp(&mut self, layers: &mut Vec<Layer>, i: usize) -> Result<()> {
        let d = self.spec.width;
        let hidden = d * self.spec.mlp_ratio;
        let mut mlp = Vec::new();
        mlp.extend(self.norm(&format!("block{i}.norm2"), d)?);
        mlp.push(self.linear(&format!("block{i}.mlp.fc1"), d, hidden)?);
        mlp.push(Layer::Gelu);
        mlp.push(self.linear(&format!("block{i}.mlp.fc2"), hidden, d)?);
        layers.push(Layer::Residual(mlp));
        Ok(())
    }
}

/// Builds a model deterministically from `spec` (including its seed).
/// Each parameter is drawn from its own stream keyed by name, so changing
/// the normalization kind leaves every other tensor bitwise unchanged.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut b = Builder { spec, params: ParamSet::new() };
    let layers = match spec.family {
        Family::Mlp => b.mlp()?,
        Family::TinyCnn => b.cnn()?,
        Family::TinyMetaFormer => b.metaformer()?,
    };
    Ok(Model { spec: spec.clone(), params: b.params, layers })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces all parameters; names, shapes and roles must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.spec.input_shape;
        if x.rank() != 4 || x.shape()[1..] != expected {
            return Err(FedError::shape("model input", x.shape(), &expected));
        }
        Ok(())
    }

    /// Logits `[N, num_classes]`. Train mode uses batch statistics but does
    /// not update running statistics.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let mut stats = Vec::new();
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&self.params, h, mode, &mut None, &mut stats)?;
        }
        Ok(h)
    }

    /// Train-mode forward and backward of the mean cross-entropy loss.
    /// Updates batch-norm running statistics. Gradients are aligned with
    /// [`Model::params`]; non-trainable entries get zero gradients.
    pub fn backprop(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        self.check_input(x)?;
        if labels.is_empty() || labels.len() != x.shape()[0] {
            return Err(FedError::shape("backprop labels", x.shape(), &[labels.len()]));
        }
        let mut tape = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        let mut h = x.clone();
        {
            let mut t = Some(&mut tape);
            for l in &self.layers {
                h = l.forward(&self.params, h, Mode::Train, &mut t, &mut stats)?;
            }
        }
        let (loss, _, mut g) = kernel::softmax_cross_entropy(&h, labels)?;
        let mut grads: Vec<Tensor> = self.params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        for l in self.layers.iter().rev() {
            let saved: Saved = tape.pop().expect("tape length matches layers");
            g = l.backward(&self.params, saved, g, &mut grads)?;
        }
        for (i, t) in stats {
            *self.params.tensor_mut(i) = t;
        }
        Ok((loss, grads))
    }

    /// A copy with every token-mixer layer deleted from its residual branch.
    pub fn without_token_mixers(&self) -> Model {
        fn strip(layers: &[Layer]) -> Vec<Layer> {
            layers
                .iter()
                .filter(|l| !l.is_mixer())
                .map(|l| match l {
                    Layer::Residual(inner) => Layer::Residual(strip(inner)),
                    other => other.clone(),
                })
                .collect()
        }
        Model { spec: self.spec.clone(), params: self.params.clone(), layers: strip(&self.layers) }
    }

    /// Token mixer of MetaFormer block `block`, with its current weights.
    pub fn token_mixer(&self, block: usize) -> Option<TokenMixer> {
        let mut found = Vec::new();
        for l in &self.layers {
            if let Layer::Residual(inner) = l {
                let m = inner.iter().find_map(|x| match x {
                    Layer::Mixer(m) => Some(m),
                    _ => None,
                });
                let is_mix_branch = m.is_some() || !inner.iter().any(|x| matches!(x, Layer::Linear { .. }));
                if is_mix_branch {
                    found.push(m.map(|m| match m {
                        MixerLayer::Fixed(t) => TokenMixer::Matrix(t.clone()),
                        MixerLayer::Frozen(i) => TokenMixer::Matrix(self.params.tensor(*i).clone()),
                        MixerLayer::Attention { wq, wk, wv } => TokenMixer::Attention {
                            wq: self.params.tensor(*wq).clone(),
                            wk: self.params.tensor(*wk).clone(),
                            wv: self.params.tensor(*wv).clone(),
                        },
                    })
                    .unwrap_or(TokenMixer::Identity));
                }
            }
        }
        found.into_iter().nth(block)
    }
}

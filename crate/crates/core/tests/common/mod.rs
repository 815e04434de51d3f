//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use fedsim::data::{gen_synthetic_split, Dataset, SyntheticKind, SyntheticSpec};
use fedsim::kernel::{self, ConvGeom, NormMode, DEFAULT_EPS};
use fedsim::model::{TokenMixer, token_mixer_apply};
use fedsim::rng;
use fedsim::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const SHAPES_PER_LAYER: usize = 20;

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute gap when both are ~0.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of several tensors with respect
/// to input `which`.
pub fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + FD_STEP;
            let up = f(&work);
            work[which].data_mut()[i] = orig - FD_STEP;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn weighted(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// One gradient check: a scalar objective over `inputs` and its analytic
/// gradient for each input.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub objective: Box<dyn Fn(&[Tensor]) -> f64>,
    pub analytic: Vec<Tensor>,
}

impl Case {
    /// Worst relative error over all inputs.
    pub fn max_rel_err(&self) -> f64 {
        (0..self.inputs.len())
            .map(|k| rel_err(self.analytic[k].data(), &numeric_grad(&*self.objective, &self.inputs, k)))
            .fold(0.0, f64::max)
    }
}

pub type CaseGen = fn(&mut ChaCha8Rng) -> Case;

/// Values bounded away from zero, so ReLU kinks sit outside the FD stencil.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(r, shape, 0.05, 1.5);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// A permutation of well-separated values, so max-pool winners are stable.
fn distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 + r.random_range(0.0..0.001)).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(r);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn linear_case(r: &mut ChaCha8Rng) -> Case {
    let (n, i, o) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..6));
    let x = rand_tensor(r, &[n, i], -1.0, 1.0);
    let w = rand_tensor(r, &[o, i], -1.0, 1.0);
    let b = rand_tensor(r, &[o], -1.0, 1.0);
    let up = rand_tensor(r, &[n, o], -1.0, 1.0);
    let (dx, dw, db) = kernel::linear_backward(&x, &w, &up).unwrap();
    let obj = move |t: &[Tensor]| weighted(&kernel::linear_forward(&t[0], &t[1], &t[2]).unwrap(), &up);
    Case { inputs: vec![x, w, b], objective: Box::new(obj), analytic: vec![dx, dw, db] }
}

fn conv_case(r: &mut ChaCha8Rng) -> Case {
    let k = r.random_range(1..4);
    let geom = ConvGeom::new(k, r.random_range(1..3), r.random_range(0..k));
    let (n, c, o) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..4));
    let (h, w) = (r.random_range(k..k + 4), r.random_range(k..k + 4));
    let x = rand_tensor(r, &[n, c, h, w], -1.0, 1.0);
    let wt = rand_tensor(r, &[o, c, k, k], -1.0, 1.0);
    let b = rand_tensor(r, &[o], -1.0, 1.0);
    let y = kernel::conv2d_forward(&x, &wt, &b, geom).unwrap();
    let up = rand_tensor(r, y.shape(), -1.0, 1.0);
    let (dx, dw, db) = kernel::conv2d_backward(&x, &wt, geom, &up).unwrap();
    let obj = move |t: &[Tensor]| weighted(&kernel::conv2d_forward(&t[0], &t[1], &t[2], geom).unwrap(), &up);
    Case { inputs: vec![x, wt, b], objective: Box::new(obj), analytic: vec![dx, dw, db] }
}

fn maxpool_case(r: &mut ChaCha8Rng) -> Case {
    let (k, s) = (r.random_range(1..4), r.random_range(1..3));
    let shape = [r.random_range(1..3), r.random_range(1..3), r.random_range(k..k + 4), r.random_range(k..k + 4)];
    let x = distinct(r, &shape);
    let (y, arg) = kernel::maxpool2d_forward(&x, k, s).unwrap();
    let up = rand_tensor(r, y.shape(), -1.0, 1.0);
    let dx = kernel::maxpool2d_backward(x.shape(), &arg, &up);
    let obj = move |t: &[Tensor]| weighted(&kernel::maxpool2d_forward(&t[0], k, s).unwrap().0, &up);
    Case { inputs: vec![x], objective: Box::new(obj), analytic: vec![dx] }
}

fn avgpool_case(r: &mut ChaCha8Rng) -> Case {
    let (k, s) = (r.random_range(1..4), r.random_range(1..3));
    let shape = [r.random_range(1..3), r.random_range(1..3), r.random_range(k..k + 4), r.random_range(k..k + 4)];
    let x = rand_tensor(r, &shape, -1.0, 1.0);
    let y = kernel::avgpool2d_forward(&x, k, s).unwrap();
    let up = rand_tensor(r, y.shape(), -1.0, 1.0);
    let dx = kernel::avgpool2d_backward(x.shape(), k, s, &up);
    let obj = move |t: &[Tensor]| weighted(&kernel::avgpool2d_forward(&t[0], k, s).unwrap(), &up);
    Case { inputs: vec![x], objective: Box::new(obj), analytic: vec![dx] }
}

fn global_pool_case(r: &mut ChaCha8Rng) -> Case {
    let shape = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..5), r.random_range(1..5)];
    let x = rand_tensor(r, &shape, -1.0, 1.0);
    let up = rand_tensor(r, &[shape[0], shape[1]], -1.0, 1.0);
    let dx = kernel::global_avg_pool_backward(x.shape(), &up);
    let obj = move |t: &[Tensor]| weighted(&kernel::global_avg_pool_forward(&t[0]).unwrap(), &up);
    Case { inputs: vec![x], objective: Box::new(obj), analytic: vec![dx] }
}

fn token_mean_case(r: &mut ChaCha8Rng) -> Case {
    let shape = [r.random_range(1..4), r.random_range(1..6), r.random_range(1..5)];
    let x = rand_tensor(r, &shape, -1.0, 1.0);
    let up = rand_tensor(r, &[shape[0], shape[2]], -1.0, 1.0);
    let dx = kernel::token_mean_backward(x.shape(), &up);
    let obj = move |t: &[Tensor]| weighted(&kernel::token_mean_forward(&t[0]).unwrap(), &up);
    Case { inputs: vec![x], objective: Box::new(obj), analytic: vec![dx] }
}

fn any_shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    match r.random_range(0..3) {
        0 => vec![r.random_range(1..5), r.random_range(1..6)],
        1 => vec![r.random_range(1..3), r.random_range(1..4), r.random_range(1..4)],
        _ => vec![r.random_range(1..3), r.random_range(1..3), r.random_range(1..4), r.random_range(1..4)],
    }
}

fn relu_case(r: &mut ChaCha8Rng) -> Case {
    let shape = any_shape(r);
    let x = away_from_zero(r, &shape);
    let up = rand_tensor(r, &shape, -1.0, 1.0);
    let dx = kernel::relu_backward(&x, &up);
    let obj = move |t: &[Tensor]| weighted(&kernel::relu_forward(&t[0]), &up);
    Case { inputs: vec![x], objective: Box::new(obj), analytic: vec![dx] }
}

fn gelu_case(r: &mut ChaCha8Rng) -> Case {
    let shape = any_shape(r);
    let x = rand_tensor(r, &shape, -3.0, 3.0);
    let up = rand_tensor(r, &shape, -1.0, 1.0);
    let dx = kernel::gelu_backward(&x, &up);
    let obj = move |t: &[Tensor]| weighted(&kernel::gelu_forward(&t[0]), &up);
    Case { inputs: vec![x], objective: Box::new(obj), analytic: vec![dx] }
}

fn norm_case(r: &mut ChaCha8Rng, mode: NormMode, shape: Vec<usize>, channels: usize) -> Case {
    let x = rand_tensor(r, &shape, -2.0, 2.0);
    let gamma = rand_tensor(r, &[channels], 0.5, 1.5);
    let beta = rand_tensor(r, &[channels], -0.5, 0.5);
    let up = rand_tensor(r, &shape, -1.0, 1.0);
    let (_, cache, _) = kernel::norm_train_forward(&x, mode, &gamma, &beta, DEFAULT_EPS).unwrap();
    let (dx, dg, db) = kernel::norm_backward(&cache, &gamma, &up).unwrap();
    let obj = move |t: &[Tensor]| weighted(&kernel::norm_train_forward(&t[0], mode, &t[1], &t[2], DEFAULT_EPS).unwrap().0, &up);
    Case { inputs: vec![x, gamma, beta], objective: Box::new(obj), analytic: vec![dx, dg, db] }
}

fn batch_norm_case(r: &mut ChaCha8Rng) -> Case {
    let n = r.random_range(2..5);
    let c = r.random_range(1..4);
    let shape = if r.random_bool(0.5) { vec![n, c] } else { vec![n, c, r.random_range(1..4), r.random_range(1..4)] };
    norm_case(r, NormMode::Batch, shape, c)
}

fn layer_norm_case(r: &mut ChaCha8Rng) -> Case {
    let n = r.random_range(1..4);
    let (shape, c) = match r.random_range(0..3) {
        0 => {
            let f = r.random_range(2..6);
            (vec![n, f], f)
        }
        1 => {
            let d = r.random_range(2..5);
            (vec![n, r.random_range(1..4), d], d)
        }
        _ => {
            let c = r.random_range(1..4);
            (vec![n, c, r.random_range(1..4), r.random_range(2..4)], c)
        }
    };
    norm_case(r, NormMode::Layer, shape, c)
}

fn group_norm_case(r: &mut ChaCha8Rng) -> Case {
    let g = r.random_range(1..4);
    let c = g * r.random_range(1..3);
    let shape = vec![r.random_range(1..3), c, r.random_range(1..4), r.random_range(2..4)];
    norm_case(r, NormMode::Group(g), shape, c)
}

fn attention_case(r: &mut ChaCha8Rng) -> Case {
    let (n, t, d) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
    let x = rand_tensor(r, &[n, t, d], -1.0, 1.0);
    let wq = rand_tensor(r, &[d, d], -1.0, 1.0);
    let wk = rand_tensor(r, &[d, d], -1.0, 1.0);
    let wv = rand_tensor(r, &[d, d], -1.0, 1.0);
    let up = rand_tensor(r, &[n, t, d], -1.0, 1.0);
    let (_, cache) = kernel::attention_forward(&x, &wq, &wk, &wv).unwrap();
    let (dx, dq, dk, dv) = kernel::attention_backward(&x, &wq, &wk, &wv, &cache, &up).unwrap();
    let obj = move |t: &[Tensor]| weighted(&kernel::attention_forward(&t[0], &t[1], &t[2], &t[3]).unwrap().0, &up);
    Case { inputs: vec![x, wq, wk, wv], objective: Box::new(obj), analytic: vec![dx, dq, dk, dv] }
}

fn matrix_mixer_case(r: &mut ChaCha8Rng) -> Case {
    let (n, t, d) = (r.random_range(1..3), r.random_range(1..6), r.random_range(1..4));
    let x = rand_tensor(r, &[n, t, d], -1.0, 1.0);
    let m = rand_tensor(r, &[t, t], 0.0, 1.0);
    let up = rand_tensor(r, &[n, t, d], -1.0, 1.0);
    let dx = kernel::mix_tokens_backward(&m, &up).unwrap();
    let mixer = TokenMixer::Matrix(m);
    let obj = move |t: &[Tensor]| weighted(&token_mixer_apply(&mixer, &t[0]).unwrap(), &up);
    Case { inputs: vec![x], objective: Box::new(obj), analytic: vec![dx] }
}

fn softmax_ce_case(r: &mut ChaCha8Rng) -> Case {
    let (n, k) = (r.random_range(1..6), r.random_range(2..7));
    let logits = rand_tensor(r, &[n, k], -3.0, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let (_, _, dlogits) = kernel::softmax_cross_entropy(&logits, &labels).unwrap();
    let obj = move |t: &[Tensor]| kernel::softmax_cross_entropy(&t[0], &labels).unwrap().0;
    Case { inputs: vec![logits], objective: Box::new(obj), analytic: vec![dlogits] }
}

pub const LAYER_CASES: &[(&str, CaseGen)] = &[
    ("linear", linear_case),
    ("conv2d", conv_case),
    ("maxpool2d", maxpool_case),
    ("avgpool2d", avgpool_case),
    ("global_avg_pool", global_pool_case),
    ("token_mean", token_mean_case),
    ("relu", relu_case),
    ("gelu", gelu_case),
    ("batch_norm_train", batch_norm_case),
    ("layer_norm", layer_norm_case),
    ("group_norm", group_norm_case),
    ("attention_mixer", attention_case),
    ("matrix_mixer", matrix_mixer_case),
    ("softmax_cross_entropy", softmax_ce_case),
];

/// Worst relative error of `gen` over `shapes` random draws.
pub fn check_layer(name: &str, gen: CaseGen, shapes: usize) -> f64 {
    let mut r = rng::stream(0x6ead, &[rng::hash_str(name)]);
    (0..shapes).map(|_| gen(&mut r).max_rel_err()).fold(0.0, f64::max)
}

pub fn blobs(classes: usize, samples: usize, image_size: usize, sigma: f64, seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        kind: SyntheticKind::GaussianBlobs,
        classes,
        samples,
        channels: 1,
        image_size,
        sigma,
    };
    let test = SyntheticSpec { samples: (samples / 4).max(classes), ..spec.clone() };
    (gen_synthetic_split(&spec, seed, 0).unwrap(), gen_synthetic_split(&test, seed, 1).unwrap())
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn params_bits(p: &fedsim::model::ParamSet) -> Vec<(String, Vec<u64>)> {
    p.entries().iter().map(|e| (e.name.clone(), bits(&e.tensor))).collect()
}

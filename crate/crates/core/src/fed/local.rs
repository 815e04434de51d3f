//! Client-side minibatch SGD, shared by federated clients and the
//! centralized baseline.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::fed::config::{LocalBudget, Precision};
use crate::model::{Model, ParamSet};
use crate::partition::FeatureTransform;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{clip_global_norm, lr_at_step, TrainSchedule};

/// Batches in one pass over `n` samples. A trailing batch of a single
/// sample is folded into the previous batch so batch norm never sees a
/// one-sample batch.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n.div_ceil(batch_size);
    if n > 1 && n % batch_size == 1 {
        full - 1
    } else {
        full
    }
}

pub fn steps_per_round(budget: LocalBudget, n: usize, batch_size: usize) -> usize {
    match budget {
        LocalBudget::Epochs(e) => e * batches_per_epoch(n, batch_size),
        LocalBudget::Steps(s) => s,
    }
}

/// Schedule spanning `rounds` rounds of `steps_per_round` steps. Warmup is
/// capped at the run length.
pub fn run_schedule(base: &TrainSchedule, rounds: usize, steps_per_round: usize) -> TrainSchedule {
    let total = rounds * steps_per_round;
    TrainSchedule { total_steps: total, warmup_steps: base.warmup_steps.min(total), ..base.clone() }
}

fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, stream: u64, round: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    let mut r = rng::stream(seed, &[rng::TAG_SHUFFLE, stream, round as u64, epoch as u64]);
    order.shuffle(&mut r);
    let count = batches_per_epoch(order.len(), batch_size);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > count {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Everything a trainer needs besides the model.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub data: &'a Dataset,
    /// Sorted sample indices owned by this trainer.
    pub indices: &'a [usize],
    pub transform: &'a FeatureTransform,
    /// Full-run schedule for this trainer (see [`run_schedule`]).
    pub schedule: &'a TrainSchedule,
    pub budget: LocalBudget,
    pub round: usize,
    /// Shuffle stream id (the client id).
    pub stream: u64,
    pub seed: u64,
    pub precision: Precision,
}

pub enum Variant<'a> {
    Plain,
    /// Adds `mu·(w − anchor)` to each trainable gradient before clipping.
    Prox { mu: f64 },
    /// Adds `c − c_i` to each clipped gradient. With `fedbn` the norm
    /// entries are left uncorrected.
    Scaffold { c: &'a ParamSet, c_i: &'a ParamSet, fedbn: bool },
}

#[derive(Clone, Debug)]
pub struct LocalReport {
    pub client_id: usize,
    /// Trained parameters. After [`crate::fed::fedbn_filter`] only the
    /// shared partition remains.
    pub params: ParamSet,
    pub sample_count: usize,
    pub mean_loss: f64,
    pub steps: usize,
    /// Mean scheduled learning rate over the steps taken.
    pub mean_lr: f64,
    /// SCAFFOLD `c_i⁺`.
    pub control: Option<ParamSet>,
}

/// Adds the proximal-term gradient `mu·(w − anchor)` to every trainable
/// entry.
pub fn apply_prox(grads: &mut [Tensor], params: &ParamSet, anchor: &ParamSet, mu: f64) {
    for (i, g) in grads.iter_mut().enumerate() {
        if !params.entries()[i].role.is_trainable() {
            continue;
        }
        let (w, a) = (params.tensor(i).data(), anchor.tensor(i).data());
        for ((gv, wv), av) in g.data_mut().iter_mut().zip(w).zip(a) {
            *gv += mu * (wv - av);
        }
    }
}

/// Adds `c − c_i` to the entries selected by `mask`.
pub fn apply_control_correction(grads: &mut [Tensor], c: &ParamSet, c_i: &ParamSet, mask: &[bool]) {
    for (i, g) in grads.iter_mut().enumerate().filter(|(i, _)| mask[*i]) {
        let (cv, civ) = (c.tensor(i).data(), c_i.tensor(i).data());
        for ((gv, a), b) in g.data_mut().iter_mut().zip(cv).zip(civ) {
            *gv += a - b;
        }
    }
}

fn controlled(params: &ParamSet, fedbn: bool) -> Vec<bool> {
    params
        .entries()
        .iter()
        .map(|e| e.role.is_trainable() && !(fedbn && e.role.is_norm()))
        .collect()
}

/// Runs one round of local training on `model`, which must hold the
/// broadcast snapshot on entry.
pub fn local_train(model: &mut Model, ctx: &TrainContext<'_>, variant: &Variant<'_>) -> Result<LocalReport> {
    if ctx.indices.is_empty() {
        return Err(FedError::Runtime(format!("client {} has an empty shard", ctx.stream)));
    }
    let batch_size = ctx.schedule.batch_size;
    let steps = steps_per_round(ctx.budget, ctx.indices.len(), batch_size);
    if steps == 0 {
        return Err(FedError::Runtime(format!("client {} would take zero local steps", ctx.stream)));
    }
    if let Variant::Scaffold { c, c_i, .. } = variant {
        model.params().check_compatible(c)?;
        model.params().check_compatible(c_i)?;
    }
    let anchor = model.params().clone();
    let trainable: Vec<bool> = anchor.entries().iter().map(|e| e.role.is_trainable()).collect();
    let offset = ctx.round * steps;
    let (mut taken, mut loss_sum, mut lr_sum, mut epoch) = (0usize, 0.0, 0.0, 0usize);
    while taken < steps {
        for batch in epoch_batches(ctx.indices, batch_size, ctx.seed, ctx.stream, ctx.round, epoch) {
            if taken == steps {
                break;
            }
            let (images, labels) = ctx.data.batch(&batch);
            let images = ctx.transform.apply(&images, &batch)?;
            let (loss, mut grads) = model.backprop(&images, &labels)?;
            if let Variant::Prox { mu } = variant {
                apply_prox(&mut grads, model.params(), &anchor, *mu);
            }
            clip_global_norm(&mut grads, ctx.schedule.clip_norm);
            if let Variant::Scaffold { c, c_i, fedbn } = variant {
                apply_control_correction(&mut grads, c, c_i, &controlled(&anchor, *fedbn));
            }
            let lr = lr_at_step(ctx.schedule, offset + taken)?;
            let params = model.params_mut();
            for (i, g) in grads.iter().enumerate().filter(|(i, _)| trainable[*i]) {
                let t = params.tensor_mut(i);
                for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
                if ctx.precision == Precision::F32 {
                    t.round_to_f32();
                }
            }
            if !loss.is_finite() {
                return Err(FedError::Runtime(format!("client {} loss diverged to {loss}", ctx.stream)));
            }
            loss_sum += loss;
            lr_sum += lr;
            taken += 1;
        }
        epoch += 1;
    }
    let mean_lr = lr_sum / taken as f64;
    let control = match variant {
        Variant::Scaffold { c, c_i, fedbn } => Some(scaffold_control(&anchor, model.params(), c, c_i, taken, mean_lr, *fedbn)?),
        _ => None,
    };
    Ok(LocalReport {
        client_id: ctx.stream as usize,
        params: model.params().clone(),
        sample_count: ctx.indices.len(),
        mean_loss: loss_sum / taken as f64,
        steps: taken,
        mean_lr,
        control,
    })
}

/// `c_i⁺ = c_i − c + (w_global − w_local)/(K·η_l)` on controlled entries.
/// When no learning happened (`η_l = 0`) the old control is kept.
fn scaffold_control(
    global: &ParamSet,
    local: &ParamSet,
    c: &ParamSet,
    c_i: &ParamSet,
    steps: usize,
    mean_lr: f64,
    fedbn: bool,
) -> Result<ParamSet> {
    let mut next = c_i.clone();
    if mean_lr == 0.0 {
        return Ok(next);
    }
    let scale = 1.0 / (steps as f64 * mean_lr);
    let mask = controlled(global, fedbn);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let data: Vec<f64> = c_i
            .tensor(i)
            .data()
            .iter()
            .zip(c.tensor(i).data())
            .zip(global.tensor(i).data().iter().zip(local.tensor(i).data()))
            .map(|((ci, cv), (wg, wl))| ci - cv + (wg - wl) * scale)
            .collect();
        *next.tensor_mut(i) = Tensor::new(c_i.tensor(i).shape().to_vec(), data)?;
    }
    Ok(next)
}

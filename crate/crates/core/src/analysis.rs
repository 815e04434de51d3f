//! Centralized baseline, weight divergence, evaluation and convergence
//! metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::fed::{batches_per_epoch, local_train, run_schedule, LocalBudget, Precision, TrainContext, Variant};
use crate::kernel::softmax_cross_entropy;
use crate::model::{build_model, Mode, Model, ModelSpec, ParamSet};
use crate::partition::FeatureTransform;
use crate::train::TrainSchedule;

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct CentralizedRun {
    pub params: ParamSet,
    pub test_accuracy: f64,
    /// Parameters after each epoch, when requested.
    pub snapshots: Vec<ParamSet>,
}

/// Plain SGD on the pooled training set with the federated regimen. The
/// shuffle stream matches client 0 with one local epoch per round, so a
/// one-client federation over the whole set reproduces this run bitwise.
pub fn train_centralized(
    train: &Dataset,
    test: &Dataset,
    spec: &ModelSpec,
    schedule: &TrainSchedule,
    epochs: usize,
    seed: u64,
    precision: Precision,
    keep_snapshots: bool,
) -> Result<CentralizedRun> {
    if epochs == 0 {
        return Err(FedError::Config("epochs must be at least 1".into()));
    }
    if train.is_empty() {
        return Err(FedError::Config("training set is empty".into()));
    }
    let mut model = build_model(spec)?;
    if precision == Precision::F32 {
        model.params_mut().round_to_f32();
    }
    let indices: Vec<usize> = (0..train.len()).collect();
    let run = run_schedule(schedule, epochs, batches_per_epoch(train.len(), schedule.batch_size));
    run.validate()?;
    let transform = FeatureTransform::None;
    let mut snapshots = Vec::new();
    for epoch in 0..epochs {
        let ctx = TrainContext {
            data: train,
            indices: &indices,
            transform: &transform,
            schedule: &run,
            budget: LocalBudget::Epochs(1),
            round: epoch,
            stream: 0,
            seed,
            precision,
        };
        local_train(&mut model, &ctx, &Variant::Plain)?;
        if keep_snapshots {
            snapshots.push(model.params().clone());
        }
    }
    let test_accuracy = evaluate_accuracy(&model, test)?;
    Ok(CentralizedRun { params: model.params().clone(), test_accuracy, snapshots })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub global: f64,
    pub per_layer: BTreeMap<String, f64>,
    pub round: usize,
}

/// Relative L2 distance `‖w_fed − w_cent‖ / ‖w_cent‖` over trainable
/// entries (weights, biases, norm affines). Running statistics are left
/// out. Per-layer values use each entry's own reference norm; an entry
/// whose reference is all zeros reports its absolute distance.
pub fn weight_divergence(w_fed: &ParamSet, w_cent: &ParamSet, round: usize) -> Result<DivergenceReport> {
    w_fed.check_compatible(w_cent)?;
    let (mut diff_sq, mut ref_sq) = (0.0, 0.0);
    let mut per_layer = BTreeMap::new();
    for (i, e) in w_cent.entries().iter().enumerate() {
        if !e.role.is_trainable() {
            continue;
        }
        let d: f64 = w_fed.tensor(i).data().iter().zip(e.tensor.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let r = e.tensor.sum_sq();
        diff_sq += d;
        ref_sq += r;
        let layer = if r > 0.0 { (d / r).sqrt() } else { d.sqrt() };
        per_layer.insert(e.name.clone(), layer);
    }
    if ref_sq == 0.0 {
        return Err(FedError::Runtime("reference parameters have zero norm".into()));
    }
    Ok(DivergenceReport { global: (diff_sq / ref_sq).sqrt(), per_layer, round })
}

/// Predicted class per row; ties go to the lowest class index.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of test samples whose argmax prediction matches the label, in
/// eval mode. Ties go to the lowest class index.
pub fn evaluate_accuracy(model: &Model, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(FedError::Runtime("cannot evaluate on an empty test set".into()));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = test.batch(chunk);
        let logits = model.forward(&x, Mode::Eval)?;
        let classes = logits.shape()[1];
        correct += argmax_rows(logits.data(), classes).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean eval-mode cross-entropy over `indices`, with `transform` applied.
pub fn evaluate_loss(model: &Model, data: &Dataset, indices: &[usize], transform: &FeatureTransform) -> Result<f64> {
    if indices.is_empty() {
        return Err(FedError::Runtime("cannot evaluate on an empty index set".into()));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(chunk);
        let x = transform.apply(&x, chunk)?;
        let logits = model.forward(&x, Mode::Eval)?;
        let (loss, _, _) = softmax_cross_entropy(&logits, &labels)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// First 1-based round whose accuracy reaches `target`.
pub fn rounds_to_target(accuracies: &[f64], target: f64) -> Option<usize> {
    accuracies.iter().position(|&a| a >= target).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::model::ParamRole;
    use crate::tensor::Tensor;

    fn params(v: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap(), ParamRole::Weight).unwrap();
        p.push("norm.running_mean", Tensor::filled(&[1], 7.0), ParamRole::NormRunningStat).unwrap();
        p
    }

    #[test]
    fn divergence_identities() {
        let c = params(&[1.0, -2.0, 3.0]);
        assert_eq!(weight_divergence(&c, &c, 0).unwrap().global, 0.0);
        let f = params(&[2.0, -4.0, 6.0]);
        assert!((weight_divergence(&f, &c, 0).unwrap().global - 1.0).abs() < 1e-15);
        assert!(weight_divergence(&c, &params(&[0.0, 0.0, 0.0]), 0).is_err());
    }

    #[test]
    fn running_stats_do_not_count() {
        let c = params(&[1.0, 1.0]);
        let mut f = c.clone();
        *f.tensor_mut(1) = Tensor::filled(&[1], -100.0);
        let r = weight_divergence(&f, &c, 3).unwrap();
        assert_eq!(r.global, 0.0);
        assert_eq!(r.round, 3);
        assert!(!r.per_layer.contains_key("norm.running_mean"));
    }

    #[test]
    fn rounds_to_target_scan() {
        let log = [0.2, 0.5, 0.5, 0.9];
        assert_eq!(rounds_to_target(&log, 0.5), Some(2));
        assert_eq!(rounds_to_target(&log, 0.0), Some(1));
        assert_eq!(rounds_to_target(&log, 1.1), None);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }
}

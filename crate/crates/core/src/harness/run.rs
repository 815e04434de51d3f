//! Run orchestration: data preparation, partitioning, federated and
//! centralized arms, per-seed results.

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{rounds_to_target, train_centralized, weight_divergence, CentralizedRun, DivergenceReport};
use crate::data::{gen_synthetic_split, load_idx_dataset, Dataset, SyntheticSpec};
use crate::error::{FedError, Result};
use crate::fed::{FedSetup, Federation, RoundRecord};
use crate::harness::config::{DatasetConfig, ExperimentConfig, SplitConfig};
use crate::model::{ModelSpec, ParamSet};
use crate::partition::{
    heterogeneity_report, split_feature_skew, split_iid, split_label_skew, split_quantity_skew, ClientShard,
    HeterogeneityReport,
};

/// Train and test sets of an experiment.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { generator, classes, samples, test_samples, image_size, channels, sigma, seed } => {
            let spec = SyntheticSpec {
                kind: *generator,
                classes: *classes,
                samples: *samples,
                channels: *channels,
                image_size: *image_size,
                sigma: *sigma,
            };
            let test_n = test_samples.unwrap_or(samples / 4).max(*classes);
            let train = gen_synthetic_split(&spec, *seed, 0)?;
            let test = gen_synthetic_split(&SyntheticSpec { samples: test_n, ..spec }, *seed, 1)?;
            Ok((train, test))
        }
        DatasetConfig::Idx { path, classes } => {
            let mut train = load_idx_dataset(&path.join("train-images.idx"), &path.join("train-labels.idx"))?;
            let mut test = load_idx_dataset(&path.join("test-images.idx"), &path.join("test-labels.idx"))?;
            let k = classes.unwrap_or(train.num_classes.max(test.num_classes));
            for ds in [&mut train, &mut test] {
                if ds.num_classes > k {
                    return Err(FedError::Config(format!("dataset.classes {k} is below the largest label")));
                }
                ds.num_classes = k;
            }
            if train.sample_shape() != test.sample_shape() {
                return Err(FedError::shape("train vs test images", &train.sample_shape(), &test.sample_shape()));
            }
            Ok((train, test))
        }
    }
}

pub fn build_shards(split: &SplitConfig, ds: &Dataset, seed: u64) -> Result<Vec<ClientShard>> {
    match split {
        SplitConfig::Iid { clients } => split_iid(ds, *clients, seed),
        SplitConfig::LabelSkew { clients, classes_per_client } => split_label_skew(ds, *clients, *classes_per_client, seed),
        SplitConfig::QuantitySkew { clients, alpha } => split_quantity_skew(ds, *clients, *alpha, seed),
        SplitConfig::FeatureSkew { clients, transforms } => split_feature_skew(ds, *clients, transforms, seed),
    }
}

pub fn model_spec(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> ModelSpec {
    cfg.model.to_spec(train.num_classes, train.sample_shape(), seed)
}

pub fn fed_setup(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> FedSetup {
    FedSetup {
        model: model_spec(cfg, train, seed),
        aggregator: cfg.aggregator.clone(),
        schedule: cfg.schedule.to_schedule(),
        budget: cfg.local,
        rounds: cfg.rounds,
        seed,
        precision: cfg.precision,
    }
}

/// Centralized arm for one seed: `rounds` epochs over the pooled set. With
/// a one-epoch local budget this matches the summed client steps per round.
pub fn run_centralized(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, seed: u64, snapshots: bool) -> Result<CentralizedRun> {
    let spec = model_spec(cfg, train, seed);
    train_centralized(train, test, &spec, &cfg.schedule.to_schedule(), cfg.rounds, seed, cfg.precision, snapshots)
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<RoundRecord>,
    pub partition: HeterogeneityReport,
    /// Divergence from the centralized arm after the last round.
    pub divergence: Option<DivergenceReport>,
    pub rounds_to_target: Option<usize>,
    #[serde(skip)]
    pub final_params: ParamSet,
    #[serde(skip)]
    pub centralized_params: Option<ParamSet>,
}

pub fn run_seed(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, seed: u64) -> Result<SeedRun> {
    let shards = build_shards(&cfg.split, train, seed)?;
    let partition = heterogeneity_report(&shards, train)?;
    let central = if cfg.track_divergence { Some(run_centralized(cfg, train, test, seed, true)?) } else { None };
    let mut fed = Federation::new(fed_setup(cfg, train, seed), train, test, shards)?;
    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut divergence = None;
    for r in 0..cfg.rounds {
        let mut row = fed.run_round()?;
        if let Some(c) = &central {
            let report = weight_divergence(&fed.state().global, &c.snapshots[r], row.round)?;
            row.weight_divergence = Some(report.global);
            divergence = Some(report);
        }
        rows.push(row);
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.global_test_acc).collect();
    Ok(SeedRun {
        seed,
        rows,
        partition,
        divergence,
        rounds_to_target: cfg.target_acc.and_then(|t| rounds_to_target(&accs, t)),
        final_params: fed.state().global.clone(),
        centralized_params: central.map(|c| c.params),
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// In the configured seed order.
    pub runs: Vec<SeedRun>,
}

/// Runs every seed. With `parallel_seeds` the seeds run concurrently; the
/// result is identical either way.
pub fn run_experiment(cfg: &ExperimentConfig, parallel_seeds: bool) -> Result<ExperimentResult> {
    let (train, test) = prepare_data(cfg)?;
    let runs = if parallel_seeds {
        cfg.seeds.par_iter().map(|&s| run_seed(cfg, &train, &test, s)).collect::<Result<Vec<_>>>()?
    } else {
        cfg.seeds.iter().map(|&s| run_seed(cfg, &train, &test, s)).collect::<Result<Vec<_>>>()?
    };
    Ok(ExperimentResult { config: cfg.clone(), runs })
}

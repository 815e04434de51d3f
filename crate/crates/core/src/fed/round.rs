use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate_accuracy, evaluate_loss};
use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::fed::aggregate::{aggregate_fedavg, aggregate_fedavgm, aggregate_scaffold, fedbn_filter, RoundState};
use crate::fed::config::{AggregatorConfig, AggregatorKind, LocalBudget, Precision};
use crate::fed::local::{local_train, run_schedule, steps_per_round, LocalReport, TrainContext, Variant};
use crate::fed::sampling::sample_clients;
use crate::model::{build_model, Model, ModelSpec, ParamSet, PartitionPolicy};
use crate::partition::ClientShard;
use crate::train::TrainSchedule;

/// Static description of a federated run.
#[derive(Clone, Debug, PartialEq)]
pub struct FedSetup {
    pub model: ModelSpec,
    pub aggregator: AggregatorConfig,
    /// Base regimen; `total_steps` is derived per client from `rounds`.
    pub schedule: TrainSchedule,
    pub budget: LocalBudget,
    pub rounds: usize,
    pub seed: u64,
    pub precision: Precision,
}

/// One row of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub aggregator: String,
    pub sampled_clients: Vec<usize>,
    pub global_test_acc: f64,
    pub mean_train_loss: f64,
    pub weight_divergence: Option<f64>,
    pub wallclock_ms: u64,
}

pub struct Federation<'a> {
    setup: FedSetup,
    train: &'a Dataset,
    test: &'a Dataset,
    shards: Vec<ClientShard>,
    template: Model,
    state: RoundState,
    /// FedBN: each client's own normalization entries.
    client_norms: BTreeMap<usize, ParamSet>,
    last_payloads: Vec<LocalReport>,
}

impl<'a> Federation<'a> {
    pub fn new(setup: FedSetup, train: &'a Dataset, test: &'a Dataset, shards: Vec<ClientShard>) -> Result<Self> {
        setup.aggregator.validate()?;
        // total_steps is recomputed per client; only the remaining fields are checked here.
        run_schedule(&setup.schedule, setup.rounds, 1).validate()?;
        if setup.rounds == 0 {
            return Err(FedError::Config("rounds must be at least 1".into()));
        }
        if shards.is_empty() {
            return Err(FedError::Config("federation needs at least one client".into()));
        }
        if shards.iter().enumerate().any(|(i, s)| s.client_id != i) {
            return Err(FedError::Config("client ids must be 0..K in order".into()));
        }
        if train.sample_shape() != setup.model.input_shape || test.sample_shape() != setup.model.input_shape {
            return Err(FedError::shape("dataset vs model", &train.sample_shape(), &setup.model.input_shape));
        }
        let mut template = build_model(&setup.model)?;
        if setup.precision == Precision::F32 {
            template.params_mut().round_to_f32();
        }
        let state = RoundState::new(template.params().clone(), setup.seed);
        Ok(Federation { setup, train, test, shards, template, state, client_norms: BTreeMap::new(), last_payloads: Vec::new() })
    }

    pub fn setup(&self) -> &FedSetup {
        &self.setup
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    /// Payloads of the last round as the server received them.
    pub fn last_payloads(&self) -> &[LocalReport] {
        &self.last_payloads
    }

    pub fn global_model(&self) -> Model {
        let mut m = self.template.clone();
        m.set_params(self.state.global.clone()).expect("global params match template");
        m
    }

    /// The model client `id` starts its next round from: the broadcast
    /// global parameters, with its own normalization entries under FedBN.
    pub fn client_model(&self, id: usize) -> Result<Model> {
        if id >= self.shards.len() {
            return Err(FedError::Runtime(format!("no client {id}")));
        }
        let mut m = self.global_model();
        if let Some(local) = self.client_norms.get(&id) {
            m.params_mut().overwrite_from(local)?;
        }
        Ok(m)
    }

    fn train_client(&self, id: usize) -> Result<(LocalReport, Option<ParamSet>)> {
        let shard = &self.shards[id];
        let sched = &self.setup.schedule;
        let steps = steps_per_round(self.setup.budget, shard.len(), sched.batch_size);
        let schedule = run_schedule(sched, self.setup.rounds, steps);
        let ctx = TrainContext {
            data: self.train,
            indices: &shard.indices,
            transform: &shard.transform,
            schedule: &schedule,
            budget: self.setup.budget,
            round: self.state.round,
            stream: id as u64,
            seed: self.setup.seed,
            precision: self.setup.precision,
        };
        let agg = &self.setup.aggregator;
        let c_i;
        let variant = match agg.kind {
            AggregatorKind::FedAVG | AggregatorKind::FedAVGM => Variant::Plain,
            AggregatorKind::FedProx => Variant::Prox { mu: agg.mu() },
            AggregatorKind::SCAFFOLD => {
                c_i = self.state.client_control(id);
                Variant::Scaffold { c: &self.state.server_control, c_i: &c_i, fedbn: agg.fedbn }
            }
        };
        let mut model = self.client_model(id)?;
        let report = local_train(&mut model, &ctx, &variant)
            .map_err(|e| FedError::Runtime(format!("round {} client {id}: {e}", self.state.round + 1)))?;
        let local = agg.fedbn.then(|| model.params().partition(PartitionPolicy::ExcludeNorm).1);
        Ok((report, local))
    }

    /// sample → broadcast → local training → aggregation → evaluation.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        if self.state.round >= self.setup.rounds {
            return Err(FedError::Runtime(format!("all {} rounds already run", self.setup.rounds)));
        }
        let start = Instant::now();
        let agg = self.setup.aggregator.clone();
        let sampled = sample_clients(self.shards.len(), agg.fraction, self.state.round, self.setup.seed)?;
        let results: Vec<(LocalReport, Option<ParamSet>)> =
            sampled.par_iter().map(|&id| self.train_client(id)).collect::<Result<_>>()?;

        let mut reports = Vec::with_capacity(results.len());
        for (report, local) in results {
            if let Some(local) = local {
                self.client_norms.insert(report.client_id, local);
            }
            reports.push(report);
        }
        let total_n: usize = reports.iter().map(|r| r.sample_count).sum();
        let mean_train_loss = reports.iter().map(|r| r.mean_loss * r.sample_count as f64).sum::<f64>() / total_n as f64;
        let reports = fedbn_filter(reports, agg.fedbn);

        let new_shared = match agg.kind {
            AggregatorKind::FedAVG | AggregatorKind::FedProx => aggregate_fedavg(&reports, agg.weighting)?,
            AggregatorKind::FedAVGM => aggregate_fedavgm(&reports, &mut self.state, agg.beta(), agg.server_lr(), agg.weighting)?,
            AggregatorKind::SCAFFOLD => {
                let k = self.shards.len();
                aggregate_scaffold(&reports, &mut self.state, agg.server_lr(), agg.weighting, k)?
            }
        };
        self.state.global.overwrite_from(&new_shared)?;
        self.last_payloads = reports;
        self.state.round += 1;

        let global_test_acc = self.test_accuracy()?;
        Ok(RoundRecord {
            round: self.state.round,
            aggregator: agg.kind.name().to_string(),
            sampled_clients: sampled,
            global_test_acc,
            mean_train_loss,
            weight_divergence: None,
            wallclock_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Runs every remaining round.
    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        (self.state.round..self.setup.rounds).map(|_| self.run_round()).collect()
    }

    /// Test accuracy of the global model. Under FedBN the global model has
    /// no aggregated norm entries, so the mean accuracy of the per-client
    /// models is reported instead.
    pub fn test_accuracy(&self) -> Result<f64> {
        if !self.setup.aggregator.fedbn {
            return evaluate_accuracy(&self.global_model(), self.test);
        }
        let accs = (0..self.shards.len())
            .map(|id| evaluate_accuracy(&self.client_model(id)?, self.test))
            .collect::<Result<Vec<_>>>()?;
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Mean cross-entropy of the global model over the pooled client data
    /// (eval mode, transforms applied).
    pub fn global_train_loss(&self) -> Result<f64> {
        let model = self.global_model();
        let mut total = 0.0;
        let mut n = 0;
        for s in &self.shards {
            total += evaluate_loss(&model, self.train, &s.indices, &s.transform)? * s.len() as f64;
            n += s.len();
        }
        Ok(total / n as f64)
    }
}

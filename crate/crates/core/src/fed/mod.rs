//! The federated round protocol: client sampling, broadcast, local
//! training, aggregation and evaluation, with FedAVG, FedAVGM, FedProx,
//! SCAFFOLD and FedBN semantics.

mod aggregate;
mod config;
mod local;
mod round;
mod sampling;

pub use aggregate::{aggregate_fedavg, aggregate_fedavgm, aggregate_scaffold, fedbn_filter, RoundState};
pub use config::{AggregatorConfig, AggregatorKind, LocalBudget, Precision, Weighting};
pub use local::{
    apply_control_correction, apply_prox, batches_per_epoch, local_train, run_schedule, steps_per_round,
    LocalReport, TrainContext, Variant,
};
pub use round::{FedSetup, Federation, RoundRecord};
pub use sampling::sample_clients;

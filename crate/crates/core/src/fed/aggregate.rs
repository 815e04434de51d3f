//! Server-side reductions. Reports are always reduced in ascending
//! `client_id` order, whatever order they arrive in.

use std::collections::BTreeMap;

use crate::error::{FedError, Result};
use crate::fed::config::Weighting;
use crate::fed::local::LocalReport;
use crate::model::{ParamSet, PartitionPolicy};
use crate::tensor::Tensor;

/// Server state carried between rounds.
#[derive(Clone, Debug)]
pub struct RoundState {
    pub global: ParamSet,
    pub round: usize,
    /// FedAVGM velocity.
    pub momentum: ParamSet,
    /// SCAFFOLD server control `c`.
    pub server_control: ParamSet,
    /// SCAFFOLD client controls `c_i`; absent entries are zero.
    pub client_controls: BTreeMap<usize, ParamSet>,
    pub seed: u64,
}

impl RoundState {
    pub fn new(global: ParamSet, seed: u64) -> Self {
        RoundState {
            momentum: global.zeros_like(),
            server_control: global.zeros_like(),
            client_controls: BTreeMap::new(),
            global,
            round: 0,
            seed,
        }
    }

    pub fn client_control(&self, client: usize) -> ParamSet {
        self.client_controls.get(&client).cloned().unwrap_or_else(|| self.global.zeros_like())
    }
}

fn sorted(reports: &[LocalReport]) -> Result<Vec<&LocalReport>> {
    if reports.is_empty() {
        return Err(FedError::Protocol("no client reports to aggregate".into()));
    }
    let mut v: Vec<&LocalReport> = reports.iter().collect();
    v.sort_by_key(|r| r.client_id);
    if v.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(FedError::Protocol("duplicate client report".into()));
    }
    for r in &v[1..] {
        v[0].params.check_compatible(&r.params)?;
    }
    if let Some(r) = v.iter().find(|r| r.sample_count == 0) {
        return Err(FedError::Protocol(format!("client {} reported zero samples", r.client_id)));
    }
    Ok(v)
}

fn weights(reports: &[&LocalReport], weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Uniform => vec![1.0 / reports.len() as f64; reports.len()],
        Weighting::BySampleCount => {
            let total: usize = reports.iter().map(|r| r.sample_count).sum();
            reports.iter().map(|r| r.sample_count as f64 / total as f64).collect()
        }
    }
}

fn average(reports: &[&LocalReport], weighting: Weighting) -> ParamSet {
    let w = weights(reports, weighting);
    let mut out = reports[0].params.clone();
    for (i, entry) in reports[0].params.entries().iter().enumerate() {
        let acc = out.tensor_mut(i);
        for (a, v) in acc.data_mut().iter_mut().zip(entry.tensor.data()) {
            *a = w[0] * v;
        }
        for (r, wk) in reports.iter().zip(&w).skip(1) {
            for (a, v) in acc.data_mut().iter_mut().zip(r.params.tensor(i).data()) {
                *a += wk * v;
            }
        }
    }
    out
}

/// `w ← Σ p_k w_k` with `p_k = n_k/Σn` or `1/K`.
pub fn aggregate_fedavg(reports: &[LocalReport], weighting: Weighting) -> Result<ParamSet> {
    Ok(average(&sorted(reports)?, weighting))
}

fn global_entry<'a>(state: &'a ParamSet, name: &str) -> Result<(usize, &'a Tensor)> {
    let i = state.index_of(name).ok_or_else(|| FedError::Protocol(format!("unknown parameter {name}")))?;
    Ok((i, state.tensor(i)))
}

/// Server momentum on the mean client update `Δ̄ = w − w̄`:
/// `v ← βv + Δ̄`, `w ← w − η·v`. Running statistics are plain-averaged.
/// Returns the new shared parameters and updates `state.momentum`.
pub fn aggregate_fedavgm(
    reports: &[LocalReport],
    state: &mut RoundState,
    beta: f64,
    server_lr: f64,
    weighting: Weighting,
) -> Result<ParamSet> {
    let mut avg = average(&sorted(reports)?, weighting);
    for i in 0..avg.len() {
        let entry = &avg.entries()[i];
        if !entry.role.is_trainable() {
            continue;
        }
        let (gi, w) = global_entry(&state.global, &entry.name)?;
        w.same_shape(&entry.tensor, "fedavgm")?;
        let w = w.data().to_vec();
        let v = state.momentum.tensor_mut(gi);
        for ((m, a), wg) in v.data_mut().iter_mut().zip(avg.tensor_mut(i).data_mut()).zip(&w) {
            let delta = wg - *a;
            *m = beta * *m + delta;
            // w − ηv written relative to w̄ = w − Δ̄.
            *a -= server_lr * *m - delta;
        }
    }
    Ok(avg)
}

/// SCAFFOLD server step: `w ← w + η·(w̄ − w)` and
/// `c ← c + (|S|/N)·mean_S(c_i⁺ − c_i)`; stored `c_i` are replaced by
/// `c_i⁺`.
pub fn aggregate_scaffold(
    reports: &[LocalReport],
    state: &mut RoundState,
    server_lr: f64,
    weighting: Weighting,
    total_clients: usize,
) -> Result<ParamSet> {
    let reports = sorted(reports)?;
    for r in &reports {
        let c = r
            .control
            .as_ref()
            .ok_or_else(|| FedError::Protocol(format!("client {} sent no control variate", r.client_id)))?;
        state.global.check_compatible(c)?;
    }
    let mut avg = average(&reports, weighting);
    if server_lr != 1.0 {
        for i in 0..avg.len() {
            if !avg.entries()[i].role.is_trainable() {
                continue;
            }
            let (_, w) = global_entry(&state.global, &avg.entries()[i].name)?;
            let w = w.data().to_vec();
            for (a, wg) in avg.tensor_mut(i).data_mut().iter_mut().zip(&w) {
                *a = wg + server_lr * (*a - wg);
            }
        }
    }
    // (|S|/N)·mean over S is a plain sum scaled by 1/N.
    let scale = 1.0 / total_clients as f64;
    let mut c = state.server_control.clone();
    for r in &reports {
        let old = state.client_control(r.client_id);
        let new = r.control.as_ref().unwrap();
        for i in 0..c.len() {
            for ((cv, n), o) in c.tensor_mut(i).data_mut().iter_mut().zip(new.tensor(i).data()).zip(old.tensor(i).data()) {
                *cv += scale * (n - o);
            }
        }
    }
    state.server_control = c;
    for r in reports {
        state.client_controls.insert(r.client_id, r.control.clone().unwrap());
    }
    Ok(avg)
}

/// Restricts each report to the parameters that may leave the client:
/// frozen entries are always dropped, and with `fedbn` so are all
/// normalization entries.
pub fn fedbn_filter(reports: Vec<LocalReport>, fedbn: bool) -> Vec<LocalReport> {
    let policy = if fedbn { PartitionPolicy::ExcludeNorm } else { PartitionPolicy::All };
    reports
        .into_iter()
        .map(|mut r| {
            let (shared, _) = r.params.partition(policy);
            let mut payload = ParamSet::new();
            for e in shared.entries().iter().filter(|e| e.role.is_federated()) {
                payload.push(e.name.clone(), e.tensor.clone(), e.role).expect("names stay unique");
            }
            r.params = payload;
            r
        })
        .collect()
}

//! Client shard construction with controlled label, quantity and feature
//! skew, plus heterogeneity diagnostics.

mod ks;
mod transform;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::rng;
pub use ks::{ks_from_counts, ks_statistic};
pub use transform::FeatureTransform;

const MAX_DIRICHLET_ALPHA: f64 = 1e6;
const DIRICHLET_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Sorted ascending.
    pub indices: Vec<usize>,
    pub label_hist: Vec<usize>,
    #[serde(default)]
    pub transform: FeatureTransform,
}

impl ClientShard {
    fn new(client_id: usize, mut indices: Vec<usize>, ds: &Dataset) -> Self {
        indices.sort_unstable();
        let label_hist = ds.class_histogram(&indices);
        ClientShard { client_id, indices, label_hist, transform: FeatureTransform::None }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn class_pools(ds: &Dataset, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l].push(i);
    }
    for p in &mut pools {
        p.shuffle(rng);
    }
    pools
}

fn check_clients(ds: &Dataset, num_clients: usize) -> Result<()> {
    if num_clients == 0 {
        return Err(FedError::Config("num_clients must be at least 1".into()));
    }
    if num_clients > ds.len() {
        return Err(FedError::Config(format!("{num_clients} clients for only {} samples", ds.len())));
    }
    Ok(())
}

/// Stratified IID split: each class is shuffled and dealt round-robin, with
/// the starting client carried over between classes so that per-class and
/// total counts differ by at most one across clients.
pub fn split_iid(ds: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    check_clients(ds, num_clients)?;
    let mut r = rng::stream(seed, &[rng::TAG_SPLIT, 0]);
    let mut buckets = vec![Vec::new(); num_clients];
    let mut next = 0;
    for pool in class_pools(ds, &mut r) {
        for idx in pool {
            buckets[next].push(idx);
            next = (next + 1) % num_clients;
        }
    }
    Ok(buckets.into_iter().enumerate().map(|(k, b)| ClientShard::new(k, b, ds)).collect())
}

/// Class sets for label skew: client `k` gets `classes_per_client`
/// consecutive classes (mod C) starting at `⌊k·C/K⌋`.
pub fn label_skew_assignment(num_classes: usize, num_clients: usize, classes_per_client: usize) -> Result<Vec<Vec<usize>>> {
    if classes_per_client == 0 || classes_per_client > num_classes {
        return Err(FedError::Config(format!(
            "classes_per_client must be in 1..={num_classes}, got {classes_per_client}"
        )));
    }
    if classes_per_client * num_clients < num_classes {
        return Err(FedError::Config(format!(
            "{num_clients} clients x {classes_per_client} classes cannot cover {num_classes} classes"
        )));
    }
    let sets: Vec<Vec<usize>> = (0..num_clients)
        .map(|k| {
            let start = k * num_classes / num_clients;
            let mut s: Vec<usize> = (0..classes_per_client).map(|j| (start + j) % num_classes).collect();
            s.sort_unstable();
            s
        })
        .collect();
    let mut covered = vec![false; num_classes];
    sets.iter().flatten().for_each(|&c| covered[c] = true);
    if let Some(c) = covered.iter().position(|&v| !v) {
        return Err(FedError::Config(format!("class {c} is not assigned to any client")));
    }
    Ok(sets)
}

/// Label-distribution skew: each client only sees its assigned classes, and
/// every class is dealt evenly among the clients that share it.
pub fn split_label_skew(ds: &Dataset, num_clients: usize, classes_per_client: usize, seed: u64) -> Result<Vec<ClientShard>> {
    check_clients(ds, num_clients)?;
    let sets = label_skew_assignment(ds.num_classes, num_clients, classes_per_client)?;
    let mut r = rng::stream(seed, &[rng::TAG_SPLIT, 1]);
    let mut buckets = vec![Vec::new(); num_clients];
    for (class, pool) in class_pools(ds, &mut r).into_iter().enumerate() {
        let owners: Vec<usize> = (0..num_clients).filter(|&k| sets[k].contains(&class)).collect();
        for (j, idx) in pool.into_iter().enumerate() {
            buckets[owners[j % owners.len()]].push(idx);
        }
    }
    let shards: Vec<ClientShard> = buckets.into_iter().enumerate().map(|(k, b)| ClientShard::new(k, b, ds)).collect();
    if let Some(s) = shards.iter().find(|s| s.is_empty()) {
        return Err(FedError::Config(format!("client {} received no samples", s.client_id)));
    }
    Ok(shards)
}

/// Rounds `shares · total` to integers summing exactly to `total` by the
/// largest-remainder method (ties to the lower index).
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Quantity skew: client sizes follow `N · Dirichlet(alpha)` (shares are
/// redrawn until every client has at least one sample); label composition
/// within each client is stratified.
pub fn split_quantity_skew(ds: &Dataset, num_clients: usize, alpha: f64, seed: u64) -> Result<Vec<ClientShard>> {
    check_clients(ds, num_clients)?;
    if !(alpha > 0.0) {
        return Err(FedError::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha.min(MAX_DIRICHLET_ALPHA), 1.0).map_err(|e| FedError::Config(e.to_string()))?;
    let mut r = rng::stream(seed, &[rng::TAG_SPLIT, 2]);
    let mut sizes = None;
    for _ in 0..DIRICHLET_RETRIES {
        let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut r)).collect();
        let sum: f64 = draws.iter().sum();
        if !(sum > 0.0) {
            continue;
        }
        let shares: Vec<f64> = draws.iter().map(|d| d / sum).collect();
        let s = largest_remainder(&shares, ds.len());
        if s.iter().all(|&n| n >= 1) {
            sizes = Some(s);
            break;
        }
    }
    let sizes = sizes.ok_or_else(|| {
        FedError::Config(format!("could not draw {num_clients} non-empty client sizes with alpha {alpha}"))
    })?;
    // Interleave shuffled class pools so any contiguous slice is stratified.
    let mut pools = class_pools(ds, &mut r);
    let mut order = Vec::with_capacity(ds.len());
    let mut cursor = vec![0usize; pools.len()];
    while order.len() < ds.len() {
        for (c, pool) in pools.iter_mut().enumerate() {
            if cursor[c] < pool.len() {
                order.push(pool[cursor[c]]);
                cursor[c] += 1;
            }
        }
    }
    let mut start = 0;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let shard = ClientShard::new(k, order[start..start + n].to_vec(), ds);
            start += n;
            shard
        })
        .collect())
}

/// Feature skew: an IID split with client `i` carrying `transforms[i]`.
pub fn split_feature_skew(ds: &Dataset, num_clients: usize, transforms: &[FeatureTransform], seed: u64) -> Result<Vec<ClientShard>> {
    if transforms.len() != num_clients {
        return Err(FedError::Config(format!(
            "{} transforms for {num_clients} clients",
            transforms.len()
        )));
    }
    let [c, h, w] = ds.sample_shape();
    for t in transforms {
        t.validate(c, h, w)?;
    }
    let mut shards = split_iid(ds, num_clients, seed)?;
    for (s, t) in shards.iter_mut().zip(transforms) {
        s.transform = t.clone();
    }
    Ok(shards)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    /// Mean client-vs-client KS over all unordered pairs (label skew).
    pub mean_pairwise_ks: f64,
    /// Mean client-vs-pooled KS.
    pub mean_client_vs_global_ks: f64,
    pub pairwise_ks: Vec<Vec<f64>>,
    pub shard_sizes: Vec<usize>,
    /// max/min shard size (quantity skew).
    pub size_ratio: f64,
    /// Per-client transform labels (feature skew).
    pub transforms: Vec<String>,
    pub feature_skew: bool,
}

pub fn heterogeneity_report(shards: &[ClientShard], ds: &Dataset) -> Result<HeterogeneityReport> {
    if shards.is_empty() || shards.iter().any(ClientShard::is_empty) {
        return Err(FedError::Runtime("heterogeneity report needs non-empty shards".into()));
    }
    let k = shards.len();
    let mut pairwise = vec![vec![0.0; k]; k];
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let v = ks_from_counts(&shards[i].label_hist, &shards[j].label_hist)?;
            pairwise[i][j] = v;
            pairwise[j][i] = v;
            sum += v;
        }
    }
    let pairs = k * (k - 1) / 2;
    let mean_pairwise_ks = if pairs == 0 { 0.0 } else { sum / pairs as f64 };
    let mut pooled = vec![0usize; ds.num_classes];
    for s in shards {
        for (p, c) in pooled.iter_mut().zip(&s.label_hist) {
            *p += c;
        }
    }
    let vs_global = shards
        .iter()
        .map(|s| ks_from_counts(&s.label_hist, &pooled))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = shards.iter().map(ClientShard::len).collect();
    let (max, min) = (*sizes.iter().max().unwrap(), *sizes.iter().min().unwrap());
    Ok(HeterogeneityReport {
        mean_pairwise_ks,
        mean_client_vs_global_ks: vs_global.iter().sum::<f64>() / k as f64,
        pairwise_ks: pairwise,
        shard_sizes: sizes,
        size_ratio: max as f64 / min as f64,
        transforms: shards.iter().map(|s| s.transform.label()).collect(),
        feature_skew: shards.iter().any(|s| !s.transform.is_none()),
    })
}

/// JSON manifest of shards: `{client_id, indices, label_hist, transform, seed}`.
pub fn shard_manifest(shards: &[ClientShard], seed: u64) -> serde_json::Value {
    serde_json::Value::Array(
        shards
            .iter()
            .map(|s| {
                serde_json::json!({
                    "client_id": s.client_id,
                    "indices": s.indices,
                    "label_hist": s.label_hist,
                    "transform": s.transform,
                    "seed": seed,
                })
            })
            .collect(),
    )
}

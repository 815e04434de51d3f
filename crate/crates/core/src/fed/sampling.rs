use rand::seq::index;

use crate::error::{FedError, Result};
use crate::rng;

/// Chooses `⌈fraction·K⌉` of `num_clients` without replacement, keyed by
/// `(seed, round)`, returned in ascending id order.
pub fn sample_clients(num_clients: usize, fraction: f64, round: usize, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FedError::Config(format!("sampling fraction must be in (0, 1], got {fraction}")));
    }
    if num_clients == 0 {
        return Err(FedError::Config("no clients to sample".into()));
    }
    let k = ((fraction * num_clients as f64).ceil() as usize).clamp(1, num_clients);
    if k == num_clients {
        return Ok((0..num_clients).collect());
    }
    let mut r = rng::stream(seed, &[rng::TAG_SAMPLE, round as u64]);
    let mut chosen = index::sample(&mut r, num_clients, k).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

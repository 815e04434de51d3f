use crate::error::{FedError, Result};

/// Kolmogorov–Smirnov statistic between two class distributions: the
/// largest gap between their CDFs under the fixed class index order. Inputs
/// may be counts; each is normalized by its own sum.
pub fn ks_statistic(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(FedError::shape("ks_statistic", &[p.len()], &[q.len()]));
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if !(sp > 0.0 && sq > 0.0) || p.iter().chain(q).any(|&v| v < 0.0) {
        return Err(FedError::Runtime("ks_statistic needs non-negative distributions with positive mass".into()));
    }
    let (mut cp, mut cq, mut best) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in p.iter().zip(q) {
        cp += a / sp;
        cq += b / sq;
        best = best.max((cp - cq).abs());
    }
    Ok(best.min(1.0))
}

pub fn ks_from_counts(p: &[usize], q: &[usize]) -> Result<f64> {
    let f = |v: &[usize]| v.iter().map(|&c| c as f64).collect::<Vec<_>>();
    ks_statistic(&f(p), &f(q))
}

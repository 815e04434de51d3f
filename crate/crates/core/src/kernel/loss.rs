use crate::error::{FedError, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a `[N, K]` batch of logits.
///
/// Returns `(loss, probabilities, dlogits)` where `dlogits = (p - y) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(FedError::shape("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let label = labels[i];
        if label >= k {
            return Err(FedError::Runtime(format!("label {label} out of range for {k} classes")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &l) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (l - max).exp();
            z += *p;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p /= z;
        }
        loss += -(row[label] - max - z.ln());
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = probs.clone();
    for i in 0..n {
        grad[i * k + labels[i]] -= 1.0;
    }
    for g in &mut grad {
        *g *= inv_n;
    }
    Ok((
        loss * inv_n,
        Tensor::new(vec![n, k], probs)?,
        Tensor::new(vec![n, k], grad)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_give_p_minus_y() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, probs, grad) = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let expected = [0.125, -0.375, 0.125, 0.125, 0.125, 0.125, 0.125, -0.375];
        for (g, e) in grad.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-15);
        }
    }
}

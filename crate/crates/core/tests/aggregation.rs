use fedsim::fed::{
    aggregate_fedavg, aggregate_fedavgm, aggregate_scaffold, fedbn_filter, sample_clients, LocalReport, RoundState, Weighting,
};
use fedsim::model::{ParamRole, ParamSet};
use fedsim::Tensor;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Signed, ToPrimitive, Zero};
use proptest::prelude::*;

fn params(w: &[f64], gamma: f64, mean: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("fc.weight", Tensor::new(vec![w.len()], w.to_vec()).unwrap(), ParamRole::Weight).unwrap();
    p.push("norm.gamma", Tensor::filled(&[1], gamma), ParamRole::NormAffine).unwrap();
    p.push("norm.running_mean", Tensor::filled(&[1], mean), ParamRole::NormRunningStat).unwrap();
    p
}

fn report(id: usize, n: usize, p: ParamSet) -> LocalReport {
    LocalReport { client_id: id, params: p, sample_count: n, mean_loss: 0.0, steps: 1, mean_lr: 0.1, control: None }
}

fn exact(v: f64) -> BigRational {
    BigRational::from_f64(v).unwrap()
}

proptest! {
    #[test]
    fn fedavg_matches_exact_rational_mean(
        clients in proptest::collection::vec((1usize..500, proptest::collection::vec(-100.0f64..100.0, 3)), 1..6),
        uniform in any::<bool>(),
    ) {
        let reports: Vec<LocalReport> = clients
            .iter()
            .enumerate()
            .map(|(i, (n, w))| report(i, *n, params(w, w[0], w[1])))
            .collect();
        let weighting = if uniform { Weighting::Uniform } else { Weighting::BySampleCount };
        let avg = aggregate_fedavg(&reports, weighting).unwrap();
        let total: usize = clients.iter().map(|c| c.0).sum();
        let k = clients.len();
        for j in 0..3 {
            let mut sum = BigRational::zero();
            let mut mag = 0.0;
            for (n, w) in &clients {
                let p = if uniform {
                    BigRational::new(BigInt::from(1), BigInt::from(k))
                } else {
                    BigRational::new(BigInt::from(*n), BigInt::from(total))
                };
                mag += p.to_f64().unwrap() * w[j].abs();
                sum += p * exact(w[j]);
            }
            let got = avg.tensor(0).data()[j];
            let err = (exact(got) - &sum).abs().to_f64().unwrap();
            prop_assert!(err <= 4.0 * (k as f64 + 2.0) * f64::EPSILON * mag, "entry {j}: err {err}");
        }
    }
}

#[test]
fn fedavg_hand_example_and_order_independence() {
    let a = report(0, 1, params(&[1.0, 0.0], 1.0, 0.0));
    let b = report(1, 3, params(&[5.0, 4.0], 3.0, 8.0));
    let avg = aggregate_fedavg(&[b.clone(), a.clone()], Weighting::BySampleCount).unwrap();
    assert_eq!(avg.tensor(0).data(), &[4.0, 3.0]);
    assert_eq!(avg.tensor(1).data(), &[2.5]);
    assert_eq!(avg.tensor(2).data(), &[6.0]);
    let uni = aggregate_fedavg(&[a, b], Weighting::Uniform).unwrap();
    assert_eq!(uni.tensor(0).data(), &[3.0, 2.0]);
}

#[test]
fn fedavg_protocol_errors() {
    let a = report(0, 2, params(&[1.0], 1.0, 0.0));
    assert!(matches!(aggregate_fedavg(&[], Weighting::Uniform), Err(fedsim::FedError::Protocol(_))));
    assert!(aggregate_fedavg(&[a.clone(), a.clone()], Weighting::Uniform).is_err());
    let empty = report(1, 0, params(&[1.0], 1.0, 0.0));
    assert!(aggregate_fedavg(&[a.clone(), empty], Weighting::BySampleCount).is_err());
    let wrong = report(1, 2, params(&[1.0, 2.0], 1.0, 0.0));
    assert!(aggregate_fedavg(&[a, wrong], Weighting::BySampleCount).is_err());
}

#[test]
fn fedavgm_follows_momentum_recursion() {
    let (beta, lr) = (0.5, 0.7);
    let mut state = RoundState::new(params(&[1.0, -2.0], 1.0, 0.0), 0);
    let (mut w, mut v) = (vec![1.0, -2.0], vec![0.0, 0.0]);
    let local = [[0.5, -1.0], [2.0, 0.0], [1.5, -3.0]];
    for (round, target) in local.iter().enumerate() {
        let reports = [report(0, 1, params(target, 1.0, round as f64))];
        let next = aggregate_fedavgm(&reports, &mut state, beta, lr, Weighting::BySampleCount).unwrap();
        for j in 0..2 {
            let delta = w[j] - target[j];
            v[j] = beta * v[j] + delta;
            w[j] -= lr * v[j];
            assert!((next.tensor(0).data()[j] - w[j]).abs() < 1e-12, "round {round} entry {j}");
            assert!((state.momentum.tensor(0).data()[j] - v[j]).abs() < 1e-12);
        }
        // Running statistics are averaged, not extrapolated.
        assert_eq!(next.tensor(2).data(), &[round as f64]);
        state.global.overwrite_from(&next).unwrap();
    }
}

#[test]
fn scaffold_server_step_hand_arithmetic() {
    let mut state = RoundState::new(params(&[0.0], 1.0, 0.0), 0);
    let control = |v: f64| params(&[v], 0.0, 0.0);
    let mut a = report(0, 1, params(&[2.0], 1.0, 0.0));
    a.control = Some(control(4.0));
    let mut b = report(2, 1, params(&[4.0], 1.0, 0.0));
    b.control = Some(control(-1.0));
    let next = aggregate_scaffold(&[a, b], &mut state, 0.5, Weighting::Uniform, 4).unwrap();
    // w + 0.5·(3 − 0)
    assert_eq!(next.tensor(0).data(), &[1.5]);
    // c = 0 + (1/4)·((4 − 0) + (−1 − 0))
    assert_eq!(state.server_control.tensor(0).data(), &[0.75]);
    assert_eq!(state.client_control(2).tensor(0).data(), &[-1.0]);
    assert_eq!(state.client_control(1).tensor(0).data(), &[0.0]);

    let missing = report(1, 1, params(&[0.0], 1.0, 0.0));
    assert!(aggregate_scaffold(&[missing], &mut state, 1.0, Weighting::Uniform, 4).is_err());
}

#[test]
fn fedbn_filter_drops_norm_and_frozen_entries() {
    let mut p = params(&[1.0], 1.0, 0.0);
    p.push("mixer", Tensor::filled(&[1], 1.0), ParamRole::Frozen).unwrap();
    let kept = |fedbn| -> Vec<String> {
        fedbn_filter(vec![report(0, 1, p.clone())], fedbn)[0].params.names().map(str::to_string).collect()
    };
    assert_eq!(kept(true), vec!["fc.weight"]);
    assert_eq!(kept(false), vec!["fc.weight", "norm.gamma", "norm.running_mean"]);
}

proptest! {
    #[test]
    fn sampling_is_replayable_and_sized(k in 1usize..40, fraction in 0.01f64..=1.0, round in 0usize..50, seed in any::<u64>()) {
        let s = sample_clients(k, fraction, round, seed).unwrap();
        prop_assert_eq!(s.len(), ((fraction * k as f64).ceil() as usize).clamp(1, k));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|&c| c < k));
        prop_assert_eq!(s, sample_clients(k, fraction, round, seed).unwrap());
    }
}

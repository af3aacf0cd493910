use fledgesim_core::model::{Layout, ParamVector};
use fledgesim_core::privacy::{account_epsilon, clip_update, noised_average, PrivacyLedger};
use fledgesim_core::strategy::{fedavg_aggregate, ClientUpdate};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

const FIXTURE_SEED: u64 = 20240601;
const FIXTURE: [f64; 6] = [
    -0.5911808760396384,
    1.0341691458545572,
    -1.9200010717204152,
    -0.5666210275607462,
    -0.6801451246751211,
    1.48254775005623,
];

#[test]
fn unit_noise_on_a_zero_update_reproduces_the_golden_fixture() {
    let zero = ParamVector::zeros(Layout::logistic(2, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(FIXTURE_SEED);
    let (out, spec) = noised_average(&[zero], 1.0, 1.0, &mut rng).unwrap();
    assert_eq!(spec.sigma, 1.0);
    assert_eq!(out.values, FIXTURE);

    let mut reference = ChaCha8Rng::seed_from_u64(FIXTURE_SEED);
    let direct: Vec<f64> = (0..6).map(|_| reference.sample::<f64, _>(StandardNormal)).collect();
    assert_eq!(direct, FIXTURE);
}

#[test]
fn empirical_noise_std_matches_z_c_over_m() {
    let zeros: Vec<ParamVector> = (0..4).map(|_| ParamVector::zeros(Layout::logistic(0, 1))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| noised_average(&zeros, 0.5, 2.0, &mut rng).unwrap().0.values[0])
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((std - 0.25).abs() <= 0.02 * 0.25, "std {std}");
}

#[test]
fn fewer_received_updates_mean_more_noise() {
    let mut last = 0.0;
    for m in (1..=9).rev() {
        let zeros: Vec<ParamVector> = (0..m).map(|_| ParamVector::zeros(Layout::logistic(0, 1))).collect();
        let sigma = noised_average(&zeros, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().1.sigma;
        assert!(sigma > last);
        last = sigma;
    }
}

/// Smallest epsilon of the Gaussian mechanism with sensitivity 1 and noise
/// std `sigma` at `delta`, from the exact privacy profile
/// `delta(eps) = Phi(1/(2s) - eps s) - e^eps Phi(-1/(2s) - eps s)`.
fn analytic_gaussian_epsilon(sigma: f64, delta: f64) -> f64 {
    let phi = Normal::new(0.0, 1.0).unwrap();
    let profile = |eps: f64| phi.cdf(0.5 / sigma - eps * sigma) - eps.exp() * phi.cdf(-0.5 / sigma - eps * sigma);
    let (mut lo, mut hi) = (0.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if profile(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn full_batch_single_round_is_close_to_the_analytic_gaussian() {
    let oracle = analytic_gaussian_epsilon(2.0, 1e-5);
    assert!((oracle - 1.9930914044151204).abs() < 1e-9, "{oracle}");
    let eps = account_epsilon(2.0, 1.0, 1e-5, 1).unwrap();
    assert!(eps >= oracle, "RDP must upper-bound the exact value");
    assert!(eps <= 1.10 * oracle, "{eps} vs {oracle}");
}

#[test]
fn epsilon_edge_cases_and_monotonicity() {
    assert_eq!(account_epsilon(0.0, 0.2, 1e-5, 1).unwrap(), f64::INFINITY);
    assert_eq!(account_epsilon(1.0, 0.2, 1e-5, 0).unwrap(), 0.0);
    assert!(account_epsilon(1.0, 0.2, 0.0, 10).unwrap_err().is_config());
    assert!(account_epsilon(1.0, 0.2, 1.0, 10).unwrap_err().is_config());

    let zs = [0.3, 0.5, 1.0, 1.3, 1.5];
    let eps: Vec<f64> = zs.iter().map(|&z| account_epsilon(z, 0.2, 1e-5, 100).unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[1] < w[0]), "{eps:?}");

    let by_rounds: Vec<f64> = [1, 10, 50, 100].iter().map(|&t| account_epsilon(1.0, 0.2, 1e-5, t).unwrap()).collect();
    assert!(by_rounds.windows(2).all(|w| w[1] > w[0]), "{by_rounds:?}");
    let by_q: Vec<f64> = [0.01, 0.05, 0.2, 1.0].iter().map(|&q| account_epsilon(1.0, q, 1e-5, 10).unwrap()).collect();
    assert!(by_q.windows(2).all(|w| w[1] > w[0]), "{by_q:?}");
}

#[test]
fn ledger_is_monotone_and_infinite_only_without_noise() {
    let mut ledger = PrivacyLedger::new(1e-5).unwrap();
    assert_eq!(ledger.epsilon(), 0.0);
    let mut last = 0.0;
    for r in 1..=20 {
        ledger.record_round(r, 1.1, 0.2, 9 - (r as usize % 4));
        let e = ledger.epsilon();
        assert!(e.is_finite() && e >= last);
        last = e;
    }
    let mut open = PrivacyLedger::new(1e-5).unwrap();
    open.record_round(1, 0.0, 0.2, 9);
    assert_eq!(open.epsilon(), f64::INFINITY);
}

fn pv(values: Vec<f64>) -> ParamVector {
    let n = values.len();
    ParamVector::from_values(Layout::logistic(n - 1, 1), values).unwrap()
}

proptest! {
    #[test]
    fn clipping_is_a_contraction(values in prop::collection::vec(-100.0f64..100.0, 2..20), c in 0.01f64..50.0) {
        let x = pv(values);
        let y = clip_update(&x, c);
        prop_assert!(y.norm() <= x.norm().min(c) + 1e-12);
    }

    #[test]
    fn noiseless_average_is_bit_identical_to_fedavg(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..10),
        seed in any::<u64>(),
    ) {
        let deltas: Vec<ParamVector> = rows.into_iter().map(pv).collect();
        let updates: Vec<ClientUpdate> = deltas
            .iter()
            .enumerate()
            .map(|(i, d)| ClientUpdate { client_id: i, new_params: d.clone(), num_samples: 1, local_loss: 1.0 })
            .collect();
        let (avg, spec) = noised_average(&deltas, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(spec.sigma, 0.0);
        let reference = fedavg_aggregate(&updates).unwrap();
        prop_assert_eq!(
            avg.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            reference.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

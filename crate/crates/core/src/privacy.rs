//! Server-side user-level differential privacy.
//!
//! Client deltas are clipped to an L2 ball, averaged over the updates that
//! actually arrived, and perturbed by one Gaussian draw whose per-coordinate
//! standard deviation is `z * C / m'` for `m'` received updates. Privacy loss
//! is tracked with a Rényi-DP accountant for the Poisson-subsampled Gaussian
//! mechanism.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::strategy::weighted_mean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub noise_multiplier: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    /// Defaults to `1 / (total training samples)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Defaults to the scheduled client selection rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate: Option<f64>,
}

fn default_clip_norm() -> f64 {
    1.0
}

impl PrivacyConfig {
    pub fn new(noise_multiplier: f64) -> Self {
        Self {
            noise_multiplier,
            clip_norm: default_clip_norm(),
            delta: None,
            sampling_rate: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::config("privacy.noise_multiplier must be finite and >= 0"));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("privacy.clip_norm must be positive"));
        }
        if let Some(d) = self.delta {
            check_delta(d)?;
        }
        if let Some(q) = self.sampling_rate {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::config("privacy.sampling_rate must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Scales `delta` into the L2 ball of radius `clip_norm`.
pub fn clip_update(delta: &ParamVector, clip_norm: f64) -> ParamVector {
    let norm = delta.norm();
    if norm <= clip_norm || norm == 0.0 {
        return delta.clone();
    }
    delta.scaled(clip_norm / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-coordinate standard deviation of the added Gaussian.
    pub sigma: f64,
    pub clients_received: usize,
}

impl NoiseSpec {
    pub fn for_round(noise_multiplier: f64, clip_norm: f64, clients_received: usize) -> Self {
        Self {
            sigma: noise_multiplier * clip_norm / clients_received.max(1) as f64,
            clients_received,
        }
    }
}

/// Adds `N(0, sigma^2)` independently to every coordinate.
pub fn add_gaussian_noise<R: Rng + ?Sized>(params: &mut ParamVector, sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for v in params.values.iter_mut() {
        let xi: f64 = rng.sample(StandardNormal);
        *v += sigma * xi;
    }
}

/// Mean of (already clipped) deltas plus Gaussian noise scaled to the number
/// of deltas received.
pub fn noised_average<R: Rng + ?Sized>(
    deltas: &[ParamVector],
    noise_multiplier: f64,
    clip_norm: f64,
    rng: &mut R,
) -> Result<(ParamVector, NoiseSpec)> {
    if deltas.is_empty() {
        return Err(Error::NoPrivateAggregate);
    }
    let mut mean = weighted_mean(deltas.iter().map(|d| (d, 1.0)))?;
    let spec = NoiseSpec::for_round(noise_multiplier, clip_norm, deltas.len());
    add_gaussian_noise(&mut mean, spec.sigma, rng);
    Ok((mean, spec))
}

/// Rényi orders used by the accountant.
pub const RDP_ORDERS: [f64; 70] = {
    let mut orders = [0.0; 70];
    let frac = [1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5];
    let mut i = 0;
    while i < frac.len() {
        orders[i] = frac[i];
        i += 1;
    }
    let mut a = 5;
    while a <= 64 {
        orders[i] = a as f64;
        i += 1;
        a += 1;
    }
    orders
};

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a - e^b)`; returns `-inf` when the difference is not positive.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if b >= a {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln(erfc(x))`, switching to the asymptotic series where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return libm::erfc(x).ln();
    }
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2)
        + 105.0 / (16.0 * x2 * x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// `ln A_alpha` for integer `alpha` via the binomial expansion.
fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        let term = ln_binomial(alpha, k)
            + kf * q.ln()
            + (alpha - k) as f64 * (1.0 - q).ln()
            + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

/// `ln A_alpha` for fractional `alpha` via the two-sided erfc series.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2_sigma = std::f64::consts::SQRT_2 * sigma;
    let (ln_q, ln_1mq) = (q.ln(), (1.0 - q).ln());
    let mut log_coef = 0.0;
    let mut coef_positive = true;
    for i in 0..10_000u32 {
        let fi = i as f64;
        if i > 0 {
            // binom(alpha, i) = binom(alpha, i-1) * (alpha - i + 1) / i
            let factor = alpha - fi + 1.0;
            log_coef += factor.abs().ln() - fi.ln();
            if factor < 0.0 {
                coef_positive = !coef_positive;
            }
        }
        let j = alpha - fi;
        let log_t0 = log_coef + fi * ln_q + j * ln_1mq;
        let log_t1 = log_coef + j * ln_q + fi * ln_1mq;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / sqrt2_sigma);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / sqrt2_sigma);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if coef_positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// Rényi divergence of order `alpha` for one step of the Gaussian mechanism
/// with noise multiplier `z`, Poisson-subsampled at rate `q`.
pub fn subsampled_gaussian_rdp(q: f64, z: f64, alpha: f64) -> f64 {
    if z == 0.0 {
        return f64::INFINITY;
    }
    if q == 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return alpha / (2.0 * z * z);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, z, alpha as u64)
    } else {
        log_a_frac(q, z, alpha)
    };
    log_a / (alpha - 1.0)
}

/// Converts accumulated RDP values to the tightest `epsilon` at `delta`
/// using `eps = rdp + ln((a-1)/a) - (ln delta + ln a) / (a-1)`.
pub fn rdp_to_epsilon(orders: &[f64], rdp: &[f64], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let ln_delta = delta.ln();
    let best = orders
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| r + ((a - 1.0) / a).ln() - (ln_delta + a.ln()) / (a - 1.0))
        .fold(f64::INFINITY, f64::min);
    Ok(best.max(0.0))
}

/// `epsilon` after `rounds` homogeneous rounds of the subsampled Gaussian.
pub fn account_epsilon(z: f64, q_sample: f64, delta: f64, rounds: u64) -> Result<f64> {
    check_delta(delta)?;
    if rounds == 0 {
        return Ok(0.0);
    }
    if z == 0.0 {
        return Ok(f64::INFINITY);
    }
    let rdp: Vec<f64> = RDP_ORDERS
        .iter()
        .map(|&a| rounds as f64 * subsampled_gaussian_rdp(q_sample, z, a))
        .collect();
    rdp_to_epsilon(&RDP_ORDERS, &rdp, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub round: u64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub clients_received: usize,
}

/// Running privacy state for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    pub delta: f64,
    pub records: Vec<LedgerRecord>,
    rdp: Vec<f64>,
}

impl PrivacyLedger {
    pub fn new(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self {
            delta,
            records: Vec::new(),
            rdp: vec![0.0; RDP_ORDERS.len()],
        })
    }

    pub fn rounds_applied(&self) -> u64 {
        self.records.len() as u64
    }

    /// Composes one mechanism application. `sampling_rate` is the scheduled
    /// selection rate; `clients_received` only affects the noise scale.
    pub fn record_round(&mut self, round: u64, noise_multiplier: f64, sampling_rate: f64, clients_received: usize) {
        for (acc, &a) in self.rdp.iter_mut().zip(RDP_ORDERS.iter()) {
            *acc += subsampled_gaussian_rdp(sampling_rate, noise_multiplier, a);
        }
        self.records.push(LedgerRecord {
            round,
            noise_multiplier,
            sampling_rate,
            clients_received,
        });
    }

    pub fn epsilon(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        rdp_to_epsilon(&RDP_ORDERS, &self.rdp, self.delta).expect("delta validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layout;
    use crate::rng::{substream, Stream};
    use crate::strategy::{fedavg_aggregate, ClientUpdate};

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::from_values(Layout::logistic(values.len() - 1, 1), values.to_vec()).unwrap()
    }

    #[test]
    fn clipping() {
        let inside = pv(&[0.3, 0.4]);
        assert_eq!(clip_update(&inside, 1.0), inside);
        let clipped = clip_update(&pv(&[3.0, 4.0]), 2.5);
        assert_eq!(clipped.values, vec![1.5, 2.0]);
        let zero = pv(&[0.0, 0.0]);
        assert_eq!(clip_update(&zero, 1.0), zero);
    }

    #[test]
    fn zero_noise_is_plain_mean_bit_for_bit() {
        let deltas = vec![pv(&[0.1, 0.2, 0.7]), pv(&[-0.3, 0.05, 0.2]), pv(&[0.9, -0.1, 0.0])];
        let updates: Vec<ClientUpdate> = deltas
            .iter()
            .enumerate()
            .map(|(i, d)| ClientUpdate {
                client_id: i,
                new_params: d.clone(),
                num_samples: 1,
                local_loss: 1.0,
            })
            .collect();
        let mut rng = substream(1, Stream::Noise, 0, 0);
        let (noised, spec) = noised_average(&deltas, 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(noised, fedavg_aggregate(&updates).unwrap());
        assert_eq!(spec.sigma, 0.0);
    }

    #[test]
    fn empty_round_has_no_private_aggregate() {
        let mut rng = substream(1, Stream::Noise, 0, 0);
        assert!(matches!(
            noised_average(&[], 1.0, 1.0, &mut rng),
            Err(Error::NoPrivateAggregate)
        ));
    }

    #[test]
    fn noise_scale_tracks_received_count() {
        assert_eq!(NoiseSpec::for_round(0.5, 2.0, 4).sigma, 0.25);
        assert!(NoiseSpec::for_round(1.0, 1.0, 3).sigma > NoiseSpec::for_round(1.0, 1.0, 9).sigma);
    }

    #[test]
    fn accountant_edge_cases() {
        assert_eq!(account_epsilon(0.0, 0.2, 1e-5, 10).unwrap(), f64::INFINITY);
        assert_eq!(account_epsilon(1.0, 0.2, 1e-5, 0).unwrap(), 0.0);
        assert_eq!(account_epsilon(0.0, 0.2, 1e-5, 0).unwrap(), 0.0);
        assert!(account_epsilon(1.0, 0.2, 0.0, 10).is_err());
        assert!(account_epsilon(1.0, 0.2, 1.0, 10).is_err());
    }

    // Reference values from direct numerical integration of
    // A_alpha = E_{x ~ N(0, z^2)} [((1-q) + q exp((2x-1)/(2z^2)))^alpha]
    // at 40 significant digits.
    #[test]
    fn rdp_matches_quadrature_reference() {
        let cases = [
            (0.2, 1.0, 2.0, 0.066_472_218_905_597_38),
            (0.2, 1.0, 1.5, 0.043_970_509_450_023_79),
            (0.2, 0.5, 8.0, 14.160_642_385_792_76),
            (0.01, 1.1, 32.0, 8.469_416_433_675_926),
            (1.0, 2.0, 3.0, 0.375),
            (0.2, 1.3, 4.5, 0.111_041_262_950_264_88),
            (0.05, 0.8, 2.25, 0.011_299_127_205_794_605),
            (0.2, 0.3, 1.25, 1.725_417_244_211_424_4),
            (0.2, 1.5, 1.75, 0.018_936_736_859_793_522),
        ];
        for (q, z, a, expected) in cases {
            let got = subsampled_gaussian_rdp(q, z, a);
            assert!(
                ((got - expected) / expected).abs() < 1e-9,
                "q={q} z={z} a={a}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn ledger_matches_closed_form_composition() {
        let mut ledger = PrivacyLedger::new(1e-5).unwrap();
        assert_eq!(ledger.epsilon(), 0.0);
        for r in 0..25 {
            ledger.record_round(r, 1.1, 0.2, 9);
        }
        let direct = account_epsilon(1.1, 0.2, 1e-5, 25).unwrap();
        assert!((ledger.epsilon() - direct).abs() < 1e-9 * direct);
        ledger.record_round(25, 0.0, 0.2, 9);
        assert_eq!(ledger.epsilon(), f64::INFINITY);
    }

    #[test]
    fn orders_cover_requested_grid() {
        assert_eq!(RDP_ORDERS[0], 1.25);
        assert_eq!(RDP_ORDERS[1], 1.5);
        assert_eq!(*RDP_ORDERS.last().unwrap(), 64.0);
        assert!(RDP_ORDERS.windows(2).all(|w| w[0] < w[1]));
    }
}

//! Server-side aggregation strategies.
//!
//! All aggregates visit updates in ascending `client_id` order, which makes
//! them exactly invariant to the order in which updates arrived.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub new_params: ParamVector,
    pub num_samples: usize,
    /// Loss on the client's shard under the broadcast global model.
    pub local_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "qfedavg")]
    QFedAvg,
    #[serde(rename = "fedadam")]
    FedAdam,
    #[serde(rename = "fedyogi")]
    FedYogi,
    #[serde(rename = "fedadagrad")]
    FedAdaGrad,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::FedAvg,
        StrategyKind::FedProx,
        StrategyKind::QFedAvg,
        StrategyKind::FedAdam,
        StrategyKind::FedYogi,
        StrategyKind::FedAdaGrad,
    ];

    pub fn is_adaptive(self) -> bool {
        matches!(
            self,
            StrategyKind::FedAdam | StrategyKind::FedYogi | StrategyKind::FedAdaGrad
        )
    }
}

/// Strategy hyperparameters. Learning rates are log10 exponents, so
/// `server_lr_log10 = -1.5` means a server step of `10^-1.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_lr_log10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_lr_log10: Option<f64>,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: f64,
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub q_fairness: f64,
    #[serde(default)]
    pub mu_proximal: f64,
}

impl StrategyConfig {
    /// Default hyperparameters per strategy (the "all datasets other than
    /// Shakespeare" row where the reference table distinguishes).
    pub fn defaults(kind: StrategyKind) -> Self {
        let base = Self {
            kind,
            server_lr_log10: None,
            client_lr_log10: None,
            beta1: 0.0,
            beta2: 0.0,
            tau: 0.0,
            q_fairness: 0.0,
            mu_proximal: 0.0,
        };
        match kind {
            StrategyKind::FedAvg => base,
            StrategyKind::FedAdam => Self {
                server_lr_log10: Some(-1.5),
                client_lr_log10: Some(-1.0),
                beta1: 0.9,
                beta2: 0.99,
                tau: 1e-2,
                ..base
            },
            StrategyKind::FedAdaGrad => Self {
                server_lr_log10: Some(0.0),
                client_lr_log10: Some(0.0),
                tau: 1e-3,
                ..base
            },
            StrategyKind::FedYogi => Self {
                server_lr_log10: Some(-1.5),
                client_lr_log10: Some(-1.5),
                beta1: 0.9,
                beta2: 0.99,
                tau: 1e-5,
                ..base
            },
            StrategyKind::FedProx => Self {
                mu_proximal: 1.0,
                ..base
            },
            StrategyKind::QFedAvg => Self {
                q_fairness: 1.0,
                ..base
            },
        }
    }

    pub fn server_lr(&self) -> f64 {
        10f64.powf(self.server_lr_log10.unwrap_or(0.0))
    }

    pub fn client_lr(&self) -> Option<f64> {
        self.client_lr_log10.map(|e| 10f64.powf(e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_adaptive() {
            if !(self.tau > 0.0) {
                return Err(Error::config("strategy.tau must be > 0 for adaptive strategies"));
            }
            if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
                return Err(Error::config("strategy.beta1/beta2 must lie in [0, 1)"));
            }
        }
        if self.kind == StrategyKind::QFedAvg && self.q_fairness < 0.0 {
            return Err(Error::config("strategy.q_fairness must be >= 0"));
        }
        if self.kind == StrategyKind::FedProx && self.mu_proximal < 0.0 {
            return Err(Error::config("strategy.mu_proximal must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_params: ParamVector,
    pub momentum: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub round_index: u64,
}

impl ServerState {
    pub fn new(global_params: ParamVector) -> Self {
        let n = global_params.len();
        Self {
            global_params,
            momentum: vec![0.0; n],
            second_moment: vec![0.0; n],
            round_index: 0,
        }
    }
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates.first().ok_or(Error::NoUpdates)?;
    for u in updates {
        first.new_params.check_same_shape(&u.new_params)?;
    }
    let mut refs: Vec<&ClientUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    Ok(refs)
}

/// Coordinate-wise `sum_i w_i x_i / sum_i w_i`, accumulated in input order.
pub(crate) fn weighted_mean<'a>(
    items: impl IntoIterator<Item = (&'a ParamVector, f64)>,
) -> Result<ParamVector> {
    let mut iter = items.into_iter();
    let (first, w0) = iter.next().ok_or(Error::NoUpdates)?;
    let mut acc: Vec<f64> = first.values.iter().map(|v| v * w0).collect();
    let mut total = w0;
    for (p, w) in iter {
        first.check_same_shape(p)?;
        for (a, v) in acc.iter_mut().zip(&p.values) {
            *a += v * w;
        }
        total += w;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(ParamVector {
        layout: first.layout,
        values: acc,
    })
}

/// Unweighted coordinate-wise mean of the received parameters.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    weighted_mean(sorted(updates)?.into_iter().map(|u| (&u.new_params, 1.0)))
}

/// Mean weighted by each client's sample count.
pub fn sample_weighted_aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    weighted_mean(
        sorted(updates)?
            .into_iter()
            .map(|u| (&u.new_params, u.num_samples as f64)),
    )
}

/// Proximal gradient `mu (local - global)` added to each local step.
pub fn fedprox_proximal_grad(local: &ParamVector, global: &ParamVector, mu: f64) -> Result<ParamVector> {
    Ok(local.sub(global)?.scaled(mu))
}

/// q-fair aggregation.
///
/// With `L = 1 / client_lr`, each client contributes `d_m = L (global - new_m)`
/// weighted by `F_m^q`, and the step is normalized by
/// `h_m = q F_m^(q-1) |d_m|^2 + L F_m^q`:
/// `global - sum(F_m^q d_m) / sum(h_m)`.
pub fn qfedavg_aggregate(
    state: &ServerState,
    updates: &[ClientUpdate],
    q: f64,
    client_lr: f64,
) -> Result<ParamVector> {
    let updates = sorted(updates)?;
    state.global_params.check_same_shape(&updates[0].new_params)?;
    if !(q >= 0.0) {
        return Err(Error::config("q must be non-negative"));
    }
    if !(client_lr > 0.0) {
        return Err(Error::config("client learning rate must be positive"));
    }
    if updates.iter().any(|u| !(u.local_loss >= 0.0 && u.local_loss.is_finite())) {
        return Err(Error::config("client losses must be finite and non-negative"));
    }
    if updates.iter().all(|u| u.local_loss == 0.0) {
        return Err(Error::ZeroLosses);
    }

    let inv_lr = 1.0 / client_lr;
    let global = &state.global_params.values;
    let mut numerator = vec![0.0; global.len()];
    let mut denominator = 0.0;
    for u in updates {
        let f = u.local_loss;
        let fq = f.powf(q);
        let mut norm_sq = 0.0;
        for ((num, g), w) in numerator.iter_mut().zip(global).zip(&u.new_params.values) {
            let d = inv_lr * (g - w);
            norm_sq += d * d;
            *num += fq * d;
        }
        let curvature = if q == 0.0 { 0.0 } else { q * f.powf(q - 1.0) * norm_sq };
        denominator += curvature + inv_lr * fq;
    }
    if !(denominator > 0.0 && denominator.is_finite()) {
        return Err(Error::ZeroLosses);
    }
    let values = global
        .iter()
        .zip(&numerator)
        .map(|(g, n)| g - n / denominator)
        .collect();
    Ok(ParamVector {
        layout: state.global_params.layout,
        values,
    })
}

/// One FedAdam / FedYogi / FedAdaGrad server step.
///
/// `delta` is the mean client change; `m <- b1 m + (1-b1) delta` (plain
/// `delta` for FedAdaGrad) and the new global is
/// `global + 10^eta * m / (sqrt(v) + tau)` with
///
/// * AdaGrad: `v <- v + delta^2`
/// * Adam:    `v <- b2 v + (1-b2) delta^2`
/// * Yogi:    `v <- v - (1-b2) delta^2 sign(v - delta^2)`
pub fn adaptive_server_update(
    state: &ServerState,
    updates: &[ClientUpdate],
    cfg: &StrategyConfig,
) -> Result<ServerState> {
    if !cfg.kind.is_adaptive() {
        return Err(Error::config(format!("{:?} is not an adaptive strategy", cfg.kind)));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::config("tau must be > 0"));
    }
    let mean = fedavg_aggregate(updates)?;
    let delta = mean.sub(&state.global_params)?;
    Ok(apply_adaptive_step(state, &delta, cfg))
}

pub(crate) fn apply_adaptive_step(state: &ServerState, delta: &ParamVector, cfg: &StrategyConfig) -> ServerState {
    let lr = cfg.server_lr();
    let (b1, b2, tau) = (cfg.beta1, cfg.beta2, cfg.tau);
    let mut next = state.clone();
    next.round_index += 1;
    for i in 0..delta.len() {
        let d = delta.values[i];
        let d2 = d * d;
        let m = match cfg.kind {
            StrategyKind::FedAdaGrad => d,
            _ => b1 * state.momentum[i] + (1.0 - b1) * d,
        };
        let v_prev = state.second_moment[i];
        let v = match cfg.kind {
            StrategyKind::FedAdaGrad => v_prev + d2,
            StrategyKind::FedAdam => b2 * v_prev + (1.0 - b2) * d2,
            StrategyKind::FedYogi => v_prev - (1.0 - b2) * d2 * sign(v_prev - d2),
            _ => unreachable!("caller checked kind"),
        };
        next.momentum[i] = m;
        next.second_moment[i] = v;
        next.global_params.values[i] += lr * m / (v.sqrt() + tau);
    }
    next
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs one aggregation for `cfg.kind` and returns the next server state.
pub fn aggregate(state: &ServerState, updates: &[ClientUpdate], cfg: &StrategyConfig, client_lr: f64) -> Result<ServerState> {
    if cfg.kind.is_adaptive() {
        return adaptive_server_update(state, updates, cfg);
    }
    let global_params = match cfg.kind {
        StrategyKind::FedAvg => fedavg_aggregate(updates)?,
        StrategyKind::FedProx => sample_weighted_aggregate(updates)?,
        StrategyKind::QFedAvg => qfedavg_aggregate(state, updates, cfg.q_fairness, client_lr)?,
        _ => unreachable!(),
    };
    Ok(ServerState {
        global_params,
        momentum: state.momentum.clone(),
        second_moment: state.second_moment.clone(),
        round_index: state.round_index + 1,
    })
}

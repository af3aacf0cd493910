//! Per-round cost estimate for training a model of a given size on one
//! device over one network.

use serde::{Deserialize, Serialize};

use crate::energy::{joules_to_kwh, transmission_energy, DeviceProfile};
use crate::error::{Error, Result};
use crate::netsim::{granularity, payload_bits, round_comm_time, NetworkProfile, Verdict};
use crate::profiles::Profiles;

/// Samples trained per client per round unless stated otherwise.
pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViabilityReport {
    pub params: usize,
    pub network: String,
    pub device: String,
    pub samples: usize,
    pub payload_bits: u64,
    pub payload_mb: f64,
    /// Download plus upload for one client.
    pub t_communication_s: f64,
    /// `None` when the model exceeds the device memory limit.
    pub t_computation_s: Option<f64>,
    pub granularity: Option<f64>,
    /// Transmission energy of one client's download and upload.
    pub transmission_j: f64,
    pub transmission_kwh: f64,
    /// `None` when the model does not fit on the device.
    pub verdict: Option<Verdict>,
}

impl ViabilityReport {
    pub fn verdict_label(&self) -> &'static str {
        self.verdict.map_or("OOM", Verdict::label)
    }
}

pub fn assess(
    params: usize,
    samples: usize,
    network: &NetworkProfile,
    device: &DeviceProfile,
    profiles: &Profiles,
) -> Result<ViabilityReport> {
    if params == 0 {
        return Err(Error::config("a model needs at least one parameter"));
    }
    if samples == 0 {
        return Err(Error::config("samples per round must be positive"));
    }
    let bits = payload_bits(params, network);
    let t_comm = round_comm_time(bits, network);
    let joules = transmission_energy(2 * bits, &profiles.cost_model(network)?);
    let t_comp = device.fits(params).then(|| device.compute_time(samples, params));
    let g = t_comp.map(|t| granularity(t, t_comm)).transpose()?;
    Ok(ViabilityReport {
        params,
        network: network.name.clone(),
        device: device.name.clone(),
        samples,
        payload_bits: bits,
        payload_mb: bits as f64 / 8e6,
        t_communication_s: t_comm,
        t_computation_s: t_comp,
        granularity: g,
        transmission_j: joules,
        transmission_kwh: joules_to_kwh(joules),
        verdict: g.map(Verdict::classify),
    })
}

/// [`assess`] with profiles looked up by name.
pub fn assess_named(params: usize, samples: usize, network: &str, device: &str, profiles: &Profiles) -> Result<ViabilityReport> {
    assess(params, samples, profiles.network(network)?, profiles.device(device)?, profiles)
}

//! Analytic network model: payload size, per-round transfer time and the
//! computation/communication granularity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkProfile {
    #[serde(default)]
    pub name: String,
    pub downlink_bps: f64,
    pub uplink_bps: f64,
    #[serde(default)]
    pub one_way_latency_s: f64,
    #[serde(default)]
    pub per_message_overhead_bytes: u64,
    #[serde(default = "default_bits_per_param")]
    pub bits_per_param: u32,
    /// Name of the element topology used for transmission energy.
    pub topology: String,
}

fn default_bits_per_param() -> u32 {
    64
}

impl NetworkProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.downlink_bps > 0.0 && self.uplink_bps > 0.0) {
            return Err(Error::config(format!("network `{}`: bandwidths must be positive", self.name)));
        }
        if !(self.one_way_latency_s >= 0.0) {
            return Err(Error::config(format!("network `{}`: latency must be >= 0", self.name)));
        }
        if self.bits_per_param == 0 {
            return Err(Error::config(format!("network `{}`: bits_per_param must be positive", self.name)));
        }
        Ok(())
    }
}

/// Whether the server link carries client transfers concurrently or one
/// after another.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommMode {
    #[default]
    Parallel,
    Serialized,
}

/// Size of one model transfer: `bits_per_param` per parameter plus the fixed
/// per-message overhead.
pub fn payload_bits(num_params: usize, profile: &NetworkProfile) -> u64 {
    num_params as u64 * profile.bits_per_param as u64 + profile.per_message_overhead_bytes * 8
}

/// Seconds for one client to download the global model and upload its
/// update, including two request/response round trips.
pub fn round_comm_time(bits: u64, profile: &NetworkProfile) -> f64 {
    let bits = bits as f64;
    bits / profile.downlink_bps + bits / profile.uplink_bps + 2.0 * (2.0 * profile.one_way_latency_s)
}

/// Round communication time for `clients` participants.
pub fn round_comm_time_for(bits: u64, profile: &NetworkProfile, mode: CommMode, clients: usize) -> f64 {
    let per_client = round_comm_time(bits, profile);
    match mode {
        CommMode::Parallel => per_client,
        CommMode::Serialized => per_client * clients as f64,
    }
}

pub fn granularity(t_computation_s: f64, t_communication_s: f64) -> Result<f64> {
    if !(t_communication_s > 0.0) {
        return Err(Error::UndefinedGranularity);
    }
    Ok(t_computation_s / t_communication_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// `G >= 10`: computation dominates, worth distributing.
    #[serde(rename = "G >> 1")]
    Favorable,
    /// `1 <= G < 10`: communication takes about as long as computation.
    #[serde(rename = "G ~ 1")]
    Marginal,
    /// `G < 1`: communication dominates.
    #[serde(rename = "G < 1")]
    Unfavorable,
}

impl Verdict {
    pub fn classify(g: f64) -> Self {
        if g >= 10.0 {
            Verdict::Favorable
        } else if g >= 1.0 {
            Verdict::Marginal
        } else {
            Verdict::Unfavorable
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Favorable => "G >> 1",
            Verdict::Marginal => "G ~ 1",
            Verdict::Unfavorable => "G < 1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GranularityReport {
    pub t_computation_s: f64,
    pub t_communication_s: f64,
    pub granularity: f64,
}

impl GranularityReport {
    pub fn new(t_computation_s: f64, t_communication_s: f64) -> Result<Self> {
        Ok(Self {
            t_computation_s,
            t_communication_s,
            granularity: granularity(t_computation_s, t_communication_s)?,
        })
    }

    pub fn verdict(&self) -> Verdict {
        Verdict::classify(self.granularity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(down: f64, up: f64, latency: f64, overhead: u64) -> NetworkProfile {
        NetworkProfile {
            name: "test".into(),
            downlink_bps: down,
            uplink_bps: up,
            one_way_latency_s: latency,
            per_message_overhead_bytes: overhead,
            bits_per_param: 64,
            topology: "wired".into(),
        }
    }

    #[test]
    fn payload_sizes() {
        let p = profile(1e9, 1e9, 0.0, 0);
        assert_eq!(payload_bits(100, &p), 6400);
        assert_eq!(payload_bits(0, &profile(1e9, 1e9, 0.0, 10)), 80);
        // 14K parameters at 8 bytes each: 0.112 MB.
        assert_eq!(payload_bits(14_000, &p) / 8, 112_000);
    }

    #[test]
    fn transfer_times() {
        let fiber = profile(1e9, 1e9, 0.0, 0);
        assert!((round_comm_time(8_000_000, &fiber) - 0.016).abs() < 1e-15);
        let lte = profile(40e6, 15e6, 0.0, 0);
        assert!((round_comm_time(8_000_000, &lte) - (0.2 + 8.0 / 15.0)).abs() < 1e-12);
        let slow = profile(1e6, 1e6, 0.03, 0);
        assert!((round_comm_time(0, &slow) - 0.12).abs() < 1e-15);
        assert!((round_comm_time_for(8_000_000, &fiber, CommMode::Serialized, 9) - 0.144).abs() < 1e-12);
        assert_eq!(
            round_comm_time_for(8_000_000, &fiber, CommMode::Parallel, 9),
            round_comm_time(8_000_000, &fiber)
        );
    }

    #[test]
    fn granularity_quotient() {
        assert_eq!(granularity(10.0, 5.0).unwrap(), 2.0);
        assert_eq!(granularity(3.3, 3.3).unwrap(), 1.0);
        assert!(matches!(granularity(1.0, 0.0), Err(Error::UndefinedGranularity)));
    }

    #[test]
    fn verdict_classes() {
        assert_eq!(Verdict::classify(6875.0), Verdict::Favorable);
        assert_eq!(Verdict::classify(1.5), Verdict::Marginal);
        assert_eq!(Verdict::classify(0.4), Verdict::Unfavorable);
    }

    #[test]
    fn monotone_in_bandwidth_and_bits() {
        let base = profile(40e6, 15e6, 0.01, 0);
        let t = round_comm_time(1_000_000, &base);
        assert!(round_comm_time(1_000_000, &profile(80e6, 15e6, 0.01, 0)) < t);
        assert!(round_comm_time(1_000_000, &profile(40e6, 30e6, 0.01, 0)) < t);
        assert!(round_comm_time(1_000_001, &base) > t);
    }
}

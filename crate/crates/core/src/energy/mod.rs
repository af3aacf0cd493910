//! Energy accounting: per-bit transmission cost, device computation energy
//! and throughput-per-watt efficiency.

mod microbench;

pub use microbench::{microbench, microbench_on, MicrobenchOutcome, MicrobenchReport, PhaseStat, Workload};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOULES_PER_KWH: f64 = 3.6e6;

pub fn joules_to_kwh(joules: f64) -> f64 {
    joules / JOULES_PER_KWH
}

/// Per-bit energy (J/bit) of each kind of network element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementEnergies {
    pub edge_switch: f64,
    pub lte_client: f64,
    pub lte_base_station: f64,
    pub gateway: f64,
    pub edge_router: f64,
    pub core_router: f64,
    pub datacenter_switch: f64,
}

impl ElementEnergies {
    pub fn uniform(joules_per_bit: f64) -> Self {
        Self {
            edge_switch: joules_per_bit,
            lte_client: joules_per_bit,
            lte_base_station: joules_per_bit,
            gateway: joules_per_bit,
            edge_router: joules_per_bit,
            core_router: joules_per_bit,
            datacenter_switch: joules_per_bit,
        }
    }

    fn all(&self) -> [f64; 7] {
        [
            self.edge_switch,
            self.lte_client,
            self.lte_base_station,
            self.gateway,
            self.edge_router,
            self.core_router,
            self.datacenter_switch,
        ]
    }
}

/// How many elements of each kind a transfer traverses. The gateway is
/// always traversed exactly once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyCounts {
    pub edge_switches: u32,
    pub lte_clients: u32,
    pub lte_base_stations: u32,
    pub edge_routers: u32,
    pub core_routers: u32,
    pub datacenter_switches: u32,
}

impl TopologyCounts {
    /// Wired interconnect: 2 edge switches, 3 edge routers, 4 core routers,
    /// 2 data-center switches.
    pub const WIRED: Self = Self {
        edge_switches: 2,
        lte_clients: 0,
        lte_base_stations: 0,
        edge_routers: 3,
        core_routers: 4,
        datacenter_switches: 2,
    };

    /// LTE access: modem and base station instead of edge switches, and one
    /// more edge router.
    pub const LTE: Self = Self {
        edge_switches: 0,
        lte_clients: 1,
        lte_base_stations: 1,
        edge_routers: 4,
        core_routers: 4,
        datacenter_switches: 2,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommCostModel {
    pub energies: ElementEnergies,
    pub counts: TopologyCounts,
}

impl CommCostModel {
    pub fn validate(&self) -> Result<()> {
        if self.energies.all().iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::config("per-bit energies must be finite and >= 0"));
        }
        Ok(())
    }

    /// Total energy per transmitted bit along the path.
    pub fn per_bit_joules(&self) -> f64 {
        let e = &self.energies;
        let n = &self.counts;
        n.edge_switches as f64 * e.edge_switch
            + n.lte_clients as f64 * e.lte_client
            + n.lte_base_stations as f64 * e.lte_base_station
            + e.gateway
            + n.edge_routers as f64 * e.edge_router
            + n.core_routers as f64 * e.core_router
            + n.datacenter_switches as f64 * e.datacenter_switch
    }
}

/// Joules to move `bits` along the path described by `model`.
pub fn transmission_energy(bits: u64, model: &CommCostModel) -> f64 {
    model.per_bit_joules() * bits as f64
}

/// Throughput measured at a reference parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct ThroughputPoint {
    pub params: f64,
    pub samples_per_second: f64,
}

impl From<(f64, f64)> for ThroughputPoint {
    fn from((params, samples_per_second): (f64, f64)) -> Self {
        Self {
            params,
            samples_per_second,
        }
    }
}

impl From<ThroughputPoint> for (f64, f64) {
    fn from(p: ThroughputPoint) -> Self {
        (p.params, p.samples_per_second)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    #[serde(default)]
    pub name: String,
    /// Throughput table, sorted by parameter count.
    pub samples_per_second: Vec<ThroughputPoint>,
    pub avg_power_watts: f64,
    pub peak_power_watts: f64,
    pub memory_limit_params: u64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let name = &self.name;
        if self.samples_per_second.is_empty() {
            return Err(Error::config(format!("device `{name}`: empty throughput table")));
        }
        if self
            .samples_per_second
            .iter()
            .any(|p| !(p.params > 0.0 && p.samples_per_second > 0.0))
        {
            return Err(Error::config(format!("device `{name}`: throughput entries must be positive")));
        }
        if self.samples_per_second.windows(2).any(|w| w[0].params >= w[1].params) {
            return Err(Error::config(format!(
                "device `{name}`: throughput table must be sorted by parameter count"
            )));
        }
        if !(self.avg_power_watts > 0.0 && self.avg_power_watts <= self.peak_power_watts) {
            return Err(Error::config(format!("device `{name}`: need 0 < avg_power_watts <= peak_power_watts")));
        }
        Ok(())
    }

    /// Samples per second for a model of `params` parameters: log-log
    /// interpolation between table entries, flat outside the table.
    pub fn throughput(&self, params: usize) -> f64 {
        let table = &self.samples_per_second;
        let x = (params.max(1)) as f64;
        let first = table[0];
        let last = table[table.len() - 1];
        if x <= first.params {
            return first.samples_per_second;
        }
        if x >= last.params {
            return last.samples_per_second;
        }
        let i = table.partition_point(|p| p.params <= x);
        let (a, b) = (table[i - 1], table[i]);
        let t = (x.ln() - a.params.ln()) / (b.params.ln() - a.params.ln());
        (a.samples_per_second.ln() + t * (b.samples_per_second.ln() - a.samples_per_second.ln())).exp()
    }

    pub fn fits(&self, params: usize) -> bool {
        params as u64 <= self.memory_limit_params
    }

    /// Simulated seconds to train one epoch over `samples` samples.
    pub fn compute_time(&self, samples: usize, params: usize) -> f64 {
        samples as f64 / self.throughput(params)
    }
}

/// Joules drawn at the device's average power over `t_comp` seconds.
pub fn computation_energy(t_comp: f64, profile: &DeviceProfile) -> f64 {
    profile.avg_power_watts * t_comp.max(0.0)
}

/// Samples per second per watt.
pub fn energy_efficiency(samples_processed: u64, elapsed_s: f64, profile: &DeviceProfile) -> Result<f64> {
    if !(elapsed_s > 0.0) {
        return Err(Error::ZeroElapsed);
    }
    if !(profile.avg_power_watts > 0.0) {
        return Err(Error::config("average power must be positive"));
    }
    Ok((samples_processed as f64 / elapsed_s) / profile.avg_power_watts)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub eta_e: f64,
    pub computation_kwh: f64,
    pub communication_kwh: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(counts: TopologyCounts) -> CommCostModel {
        CommCostModel {
            energies: ElementEnergies::uniform(1.0),
            counts,
        }
    }

    fn device(power: f64) -> DeviceProfile {
        DeviceProfile {
            name: "d".into(),
            samples_per_second: vec![(1e4, 100.0).into(), (1e6, 10.0).into()],
            avg_power_watts: power,
            peak_power_watts: power * 2.0,
            memory_limit_params: 1_000_000,
        }
    }

    #[test]
    fn unit_energies_count_elements() {
        assert_eq!(transmission_energy(1, &unit(TopologyCounts::WIRED)), 12.0);
        assert_eq!(transmission_energy(8, &unit(TopologyCounts::WIRED)), 96.0);
        assert_eq!(transmission_energy(1, &unit(TopologyCounts::LTE)), 13.0);
        assert_eq!(transmission_energy(0, &unit(TopologyCounts::LTE)), 0.0);
    }

    #[test]
    fn computation_energy_units() {
        let d = device(10.0);
        assert!((joules_to_kwh(computation_energy(3600.0, &d)) - 0.01).abs() < 1e-15);
        assert_eq!(computation_energy(0.0, &d), 0.0);
    }

    #[test]
    fn efficiency_definition() {
        assert_eq!(energy_efficiency(1000, 10.0, &device(10.0)).unwrap(), 10.0);
        assert_eq!(energy_efficiency(1000, 10.0, &device(20.0)).unwrap(), 5.0);
        assert!(matches!(energy_efficiency(10, 0.0, &device(10.0)), Err(Error::ZeroElapsed)));
    }

    #[test]
    fn throughput_interpolation() {
        let d = device(5.0);
        assert_eq!(d.throughput(10), 100.0);
        assert_eq!(d.throughput(10_000_000), 10.0);
        assert!((d.throughput(100_000) - 31.622_776_601_683_793).abs() < 1e-9);
        assert!(d.fits(1_000_000) && !d.fits(1_000_001));
    }

    #[test]
    fn device_validation() {
        let mut d = device(5.0);
        d.peak_power_watts = 1.0;
        assert!(d.validate().is_err());
        let mut d = device(5.0);
        d.samples_per_second.reverse();
        assert!(d.validate().is_err());
    }
}

//! Built-in and user-defined device, network and cost-model profiles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::energy::{CommCostModel, DeviceProfile, ElementEnergies, TopologyCounts};
use crate::error::{Error, Result};
use crate::netsim::NetworkProfile;

const DEVICES_TOML: &str = include_str!("../data/devices.toml");
const NETWORKS_TOML: &str = include_str!("../data/networks.toml");
const COMM_COST_TOML: &str = include_str!("../data/comm_cost.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommCostTable {
    pub per_bit_j: ElementEnergies,
    pub topology: BTreeMap<String, TopologyCounts>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profiles {
    pub devices: BTreeMap<String, DeviceProfile>,
    pub networks: BTreeMap<String, NetworkProfile>,
    pub comm_cost: CommCostTable,
}

fn parse<T: for<'de> Deserialize<'de>>(what: &str, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::config(format!("{what}: {e}")))
}

fn named<T>(mut map: BTreeMap<String, T>, set_name: impl Fn(&mut T, &str)) -> BTreeMap<String, T> {
    for (k, v) in map.iter_mut() {
        set_name(v, k);
    }
    map
}

impl Profiles {
    pub fn builtin() -> Self {
        Self::from_sources(DEVICES_TOML, NETWORKS_TOML, COMM_COST_TOML).expect("built-in profile data is valid")
    }

    pub fn from_sources(devices: &str, networks: &str, comm_cost: &str) -> Result<Self> {
        let devices = named(parse("device profiles", devices)?, |d: &mut DeviceProfile, n| {
            d.name = n.to_string()
        });
        let networks = named(parse("network profiles", networks)?, |p: &mut NetworkProfile, n| {
            p.name = n.to_string()
        });
        let profiles = Self {
            devices,
            networks,
            comm_cost: parse("communication cost table", comm_cost)?,
        };
        profiles.validate()?;
        Ok(profiles)
    }

    pub fn validate(&self) -> Result<()> {
        for d in self.devices.values() {
            d.validate()?;
        }
        for n in self.networks.values() {
            n.validate()?;
            self.topology(&n.topology)?;
        }
        CommCostModel {
            energies: self.comm_cost.per_bit_j,
            counts: TopologyCounts::WIRED,
        }
        .validate()
    }

    pub fn device(&self, name: &str) -> Result<&DeviceProfile> {
        self.devices.get(name).ok_or_else(|| Error::UnknownProfile {
            kind: "device",
            name: name.to_string(),
            available: self.devices.keys().cloned().collect(),
        })
    }

    pub fn network(&self, name: &str) -> Result<&NetworkProfile> {
        self.networks.get(name).ok_or_else(|| Error::UnknownProfile {
            kind: "network",
            name: name.to_string(),
            available: self.networks.keys().cloned().collect(),
        })
    }

    pub fn topology(&self, name: &str) -> Result<TopologyCounts> {
        self.comm_cost
            .topology
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownProfile {
                kind: "topology",
                name: name.to_string(),
                available: self.comm_cost.topology.keys().cloned().collect(),
            })
    }

    /// Transmission cost model for a network profile.
    pub fn cost_model(&self, network: &NetworkProfile) -> Result<CommCostModel> {
        Ok(CommCostModel {
            energies: self.comm_cost.per_bit_j,
            counts: self.topology(&network.topology)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_profiles_load() {
        let p = Profiles::builtin();
        assert_eq!(p.devices.keys().collect::<Vec<_>>(), ["nano", "orin", "rpi", "vm"]);
        assert_eq!(p.device("rpi").unwrap().memory_limit_params, 1_000_000);
        assert_eq!(p.device("orin").unwrap().memory_limit_params, 1_000_000_000);
        let lte = p.network("lte-global-avg").unwrap();
        assert_eq!((lte.downlink_bps, lte.uplink_bps), (40e6, 15e6));
        let fiber = p.network("fiber-1g").unwrap();
        assert_eq!((fiber.downlink_bps, fiber.uplink_bps), (1e9, 1e9));
        assert_eq!(p.topology("wired").unwrap(), TopologyCounts::WIRED);
        assert_eq!(p.topology("lte").unwrap(), TopologyCounts::LTE);
    }

    #[test]
    fn default_path_energies() {
        let p = Profiles::builtin();
        let fiber = p.cost_model(p.network("fiber-1g").unwrap()).unwrap();
        let lte = p.cost_model(p.network("lte-global-avg").unwrap()).unwrap();
        assert!((fiber.per_bit_joules() - 2.5e-7).abs() < 1e-20);
        assert!((lte.per_bit_joules() - 1.5e-6).abs() < 1e-19);
    }

    #[test]
    fn unknown_profile_lists_available() {
        let err = Profiles::builtin().device("toaster").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("toaster") && msg.contains("orin") && msg.contains("rpi"), "{msg}");
    }
}

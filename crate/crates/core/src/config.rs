//! Experiment configuration: a TOML document with a fixed key schema.
//!
//! Unknown keys are rejected everywhere. [`ExperimentConfig::normalized`]
//! fills every optional value with its effective default, which is what run
//! manifests record.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::behavior::DropoutModel;
use crate::data::SyntheticDatasetSpec;
use crate::energy::{CommCostModel, DeviceProfile, ElementEnergies, TopologyCounts};
use crate::error::{Error, Result};
use crate::model::{Layout, OptimizerConfig, OptimizerKind};
use crate::netsim::{CommMode, NetworkProfile};
use crate::privacy::PrivacyConfig;
use crate::profiles::Profiles;
use crate::strategy::{StrategyConfig, StrategyKind};

/// Source of client computation times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingMode {
    /// Device throughput tables; fully deterministic.
    #[default]
    Simulated,
    /// Measured wall-clock time of the local epoch on this machine.
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden units; 0 selects multinomial logistic regression.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: default_hidden() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_client_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            optimizer: default_optimizer(),
            learning_rate: default_client_lr(),
            weight_decay: 0.0,
            batch_size: default_batch_size(),
        }
    }
}

/// Strategy choice; absent hyperparameters take the per-strategy defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_lr_log10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_lr_log10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_fairness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_proximal: Option<f64>,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self::from(StrategyConfig::defaults(StrategyKind::FedAvg))
    }
}

impl From<StrategyConfig> for StrategySection {
    fn from(c: StrategyConfig) -> Self {
        Self {
            kind: c.kind,
            server_lr_log10: c.server_lr_log10,
            client_lr_log10: c.client_lr_log10,
            beta1: Some(c.beta1),
            beta2: Some(c.beta2),
            tau: Some(c.tau),
            q_fairness: Some(c.q_fairness),
            mu_proximal: Some(c.mu_proximal),
        }
    }
}

impl StrategySection {
    pub fn resolve(&self) -> StrategyConfig {
        let d = StrategyConfig::defaults(self.kind);
        StrategyConfig {
            kind: self.kind,
            server_lr_log10: self.server_lr_log10.or(d.server_lr_log10),
            client_lr_log10: self.client_lr_log10.or(d.client_lr_log10),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            tau: self.tau.unwrap_or(d.tau),
            q_fairness: self.q_fairness.unwrap_or(d.q_fairness),
            mu_proximal: self.mu_proximal.unwrap_or(d.mu_proximal),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_network")]
    pub profile: String,
    #[serde(default)]
    pub mode: CommMode,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            profile: default_network(),
            mode: CommMode::default(),
        }
    }
}

/// Client `i` runs on `fleet[i % fleet.len()]` unless listed in `overrides`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevicesSection {
    #[serde(default = "default_fleet")]
    pub fleet: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, String>,
}

impl Default for DevicesSection {
    fn default() -> Self {
        Self {
            fleet: default_fleet(),
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { alpha: default_alpha() }
    }
}

/// Replaces parts of the built-in communication cost table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommCostSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_bit_j: Option<ElementEnergies>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub topology: BTreeMap<String, TopologyCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_clients")]
    pub n_clients: usize,
    #[serde(default = "default_participation")]
    pub participation_rate: f64,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub timing: TimingMode,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Consecutive failed rounds after which a run stops.
    #[serde(default = "default_abort_after")]
    pub abort_after_failures: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacyConfig>,
    #[serde(default)]
    pub dropout: DropoutModel,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub devices: DevicesSection,
    #[serde(default)]
    pub dataset: SyntheticDatasetSpec,
    #[serde(default)]
    pub partition: PartitionSection,
    /// Additional or replacement network profiles.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub networks: BTreeMap<String, NetworkProfile>,
    /// Additional or replacement device profiles.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub device_profiles: BTreeMap<String, DeviceProfile>,
    #[serde(default)]
    pub comm_cost: CommCostSection,
}

fn default_hidden() -> usize {
    16
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_client_lr() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    16
}
fn default_network() -> String {
    "lte-global-avg".to_string()
}
fn default_fleet() -> Vec<String> {
    vec!["orin".to_string()]
}
fn default_alpha() -> f64 {
    1.0
}
fn default_n_clients() -> usize {
    45
}
fn default_participation() -> f64 {
    0.2
}
fn default_rounds() -> u64 {
    100
}
fn default_repeats() -> usize {
    1
}
fn default_validation_fraction() -> f64 {
    0.2
}
fn default_abort_after() -> u64 {
    10
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Everything a run needs, with profile names looked up.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub layout: Layout,
    pub strategy: StrategyConfig,
    pub optimizer: OptimizerConfig,
    pub network: NetworkProfile,
    pub cost_model: CommCostModel,
    /// Device of every client, indexed by client id.
    pub devices: Vec<DeviceProfile>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::config(format!("{e}")))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string().trim_end().to_string()))
    }

    /// Copy with every strategy hyperparameter made explicit.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        c.strategy = StrategySection::from(self.strategy.resolve());
        c
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Number of clients selected each round: `round(rate * n)`, at least 1.
    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.n_clients, self.participation_rate)
    }

    fn profiles(&self) -> Result<Profiles> {
        let mut p = Profiles::builtin();
        for (name, net) in &self.networks {
            let mut net = net.clone();
            net.name = name.clone();
            p.networks.insert(name.clone(), net);
        }
        for (name, dev) in &self.device_profiles {
            let mut dev = dev.clone();
            dev.name = name.clone();
            p.devices.insert(name.clone(), dev);
        }
        if let Some(e) = self.comm_cost.per_bit_j {
            p.comm_cost.per_bit_j = e;
        }
        for (name, counts) in &self.comm_cost.topology {
            p.comm_cost.topology.insert(name.clone(), *counts);
        }
        p.validate()?;
        Ok(p)
    }

    /// Validates every field and looks up all referenced profiles.
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        if self.n_clients == 0 {
            return Err(Error::config("n_clients must be at least 1"));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::config("participation_rate must lie in (0, 1]"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must lie in (0, 1)"));
        }
        if self.abort_after_failures == 0 {
            return Err(Error::config("abort_after_failures must be at least 1"));
        }
        if self.client.batch_size == 0 {
            return Err(Error::config("client.batch_size must be at least 1"));
        }
        if self.devices.fleet.is_empty() {
            return Err(Error::config("devices.fleet must name at least one device"));
        }
        self.dataset.validate()?;
        self.dropout.validate()?;
        if let Some(p) = &self.privacy {
            p.validate()?;
        }
        if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return Err(Error::config("partition.alpha must be positive and finite"));
        }
        let strategy = self.strategy.resolve();
        strategy.validate()?;

        let learning_rate = strategy.client_lr().unwrap_or(self.client.learning_rate);
        let optimizer = OptimizerConfig {
            kind: self.client.optimizer,
            learning_rate,
            weight_decay: self.client.weight_decay,
            ..OptimizerConfig::sgd(learning_rate)
        };
        optimizer.validate()?;

        let n_val = (self.dataset.n_samples as f64 * self.validation_fraction).round() as usize;
        let n_train = self.dataset.n_samples.saturating_sub(n_val.max(1));
        if self.n_clients > n_train {
            return Err(Error::TooManyClients {
                clients: self.n_clients,
                samples: n_train,
            });
        }

        let layout = Layout::new(self.dataset.n_features, self.model.hidden, self.dataset.n_classes);
        let profiles = self.profiles()?;
        let network = profiles.network(&self.network.profile)?.clone();
        let cost_model = profiles.cost_model(&network)?;

        for key in self.devices.overrides.keys() {
            match key.parse::<usize>() {
                Ok(i) if i < self.n_clients => {}
                _ => {
                    return Err(Error::config(format!(
                        "devices.overrides key `{key}` is not a client id below {}",
                        self.n_clients
                    )))
                }
            }
        }
        let mut devices = Vec::with_capacity(self.n_clients);
        for i in 0..self.n_clients {
            let name = self
                .devices
                .overrides
                .get(&i.to_string())
                .unwrap_or(&self.devices.fleet[i % self.devices.fleet.len()]);
            let dev = profiles.device(name)?.clone();
            if !dev.fits(layout.param_count()) {
                return Err(Error::config(format!(
                    "device `{name}` holds at most {} parameters; the model has {}",
                    dev.memory_limit_params,
                    layout.param_count()
                )));
            }
            devices.push(dev);
        }

        Ok(ResolvedExperiment {
            config: self.normalized(),
            layout,
            strategy,
            optimizer,
            network,
            cost_model,
            devices,
        })
    }
}

pub fn clients_per_round(n_clients: usize, rate: f64) -> usize {
    ((rate * n_clients as f64).round() as usize).clamp(1, n_clients.max(1))
}

/// Short names accepted in place of full dotted keys.
pub fn expand_alias(key: &str) -> &str {
    match key {
        "z" => "privacy.noise_multiplier",
        "p" => "dropout.p",
        "q" => "strategy.q_fairness",
        "mu" => "strategy.mu_proximal",
        "alpha" => "partition.alpha",
        other => other,
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `key` (dotted path) to `value`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let key = expand_alias(key);
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies a `key=value` override.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not of the form key=value")))?;
    set_path(table, key.trim(), parse_value(value.trim()))
}

/// Looks up a dotted path in a serialized config.
pub fn get_path<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let key = expand_alias(key);
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

//! Round state machine and whole-experiment execution.
//!
//! One round: select clients, broadcast the global model, train one local
//! epoch per selected client, sample dropouts, clip/noise/aggregate the
//! surviving updates and validate centrally. Every random choice comes from a
//! substream keyed by `(seed, round, client)`, so a run is a pure function of
//! its configuration and seed (wall-clock timings aside).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::behavior::sample_survivors;
use crate::config::{clients_per_round, ExperimentConfig, ResolvedExperiment, TimingMode};
use crate::data::{dirichlet_partition, generate, PartitionConfig};
use crate::energy::{joules_to_kwh, transmission_energy, EnergyReport};
use crate::error::{Error, Result};
use crate::model::{
    evaluate, local_train_epoch, Batch, OptimizerState, ParamVector, PhaseTimings, Proximal,
};
use crate::netsim::{payload_bits, round_comm_time_for};
use crate::privacy::{add_gaussian_noise, clip_update, noised_average, NoiseSpec, PrivacyLedger};
use crate::rng::{derive_seed, substream, Stream};
use crate::strategy::{aggregate, ClientUpdate, ServerState, StrategyKind};

/// `round(rate * n)` clients (at least one) drawn without replacement,
/// returned in ascending order.
pub fn select_clients(n_clients: usize, rate: f64, round: u64, seed: u64) -> Vec<usize> {
    let m = clients_per_round(n_clients, rate);
    let mut ids: Vec<usize> = (0..n_clients).collect();
    ids.shuffle(&mut substream(seed, Stream::Selection, round, 0));
    ids.truncate(m);
    ids.sort_unstable();
    ids
}

/// Seed of repeat `r`; repeat 0 uses the configured seed itself.
pub fn repeat_seed(seed: u64, repeat: usize) -> u64 {
    if repeat == 0 {
        seed
    } else {
        derive_seed(seed, Stream::Repeat, repeat as u64, 0)
    }
}

/// Serializes `f64::INFINITY` as the string `"inf"`.
pub mod epsilon_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(Deserialize)]
        struct Item(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            struct Item<'a>(&'a f64);
            impl serde::Serialize for Item<'_> {
                fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                    super::serialize(self.0, s)
                }
            }
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&Item(x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
        }
    }
}

/// Wall-clock phase breakdown of one client's local epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientTiming {
    pub client_id: usize,
    pub timings: PhaseTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_index: u64,
    pub selected: Vec<usize>,
    pub survivors: Vec<usize>,
    /// Selected clients whose local training produced non-finite values.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diverged: Vec<usize>,
    /// Set when the global model was left unchanged this round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Slowest survivor's local training time.
    pub t_computation_s: f64,
    pub t_communication_s: f64,
    pub granularity: f64,
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub delta: Option<f64>,
    /// Per-coordinate standard deviation of the noise added this round.
    pub noise_sigma: f64,
    pub energy: EnergyReport,
    /// Not part of the serialized report: wall-clock data is not reproducible.
    #[serde(skip)]
    pub client_timings: Vec<ClientTiming>,
}

impl RoundReport {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    #[serde(with = "epsilon_serde")]
    pub final_epsilon: f64,
    #[serde(with = "epsilon_serde::vec")]
    pub epsilon_trajectory: Vec<f64>,
    pub failed_rounds: u64,
    pub aborted: bool,
    pub computation_kwh: f64,
    pub communication_kwh: f64,
    /// Sum over rounds of computation plus communication energy.
    pub total_kwh: f64,
    pub rounds: Vec<RoundReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub repeats: usize,
    pub final_accuracy: MeanStd,
    pub final_loss: MeanStd,
    pub aborted: bool,
    pub computation_kwh: f64,
    pub communication_kwh: f64,
    pub total_kwh: f64,
    pub runs: Vec<RunReport>,
}

struct ClientResult {
    client_id: usize,
    update: Option<ClientUpdate>,
    compute_s: f64,
    joules: f64,
    samples: usize,
    timings: PhaseTimings,
}

/// Live state of one run.
pub struct Simulation {
    exp: ResolvedExperiment,
    seed: u64,
    shards: Vec<Batch>,
    validation: Batch,
    server: ServerState,
    ledger: Option<PrivacyLedger>,
    payload_bits: u64,
    val_loss: f64,
    val_accuracy: f64,
}

impl Simulation {
    pub fn new(exp: &ResolvedExperiment, seed: u64) -> Result<Self> {
        let cfg = &exp.config;
        let dataset = generate(&cfg.dataset, seed)?;
        let (train, val) = dataset.split_indices(cfg.validation_fraction, seed);
        let train_labels: Vec<usize> = train.iter().map(|&i| dataset.labels[i]).collect();
        let parts = dirichlet_partition(
            &train_labels,
            &PartitionConfig {
                n_clients: cfg.n_clients,
                alpha: cfg.partition.alpha,
                seed,
            },
        )?;
        let shards: Vec<Batch> = parts
            .iter()
            .map(|p| dataset.subset(&p.iter().map(|&j| train[j]).collect::<Vec<_>>()))
            .collect();
        let validation = dataset.subset(&val);

        let ledger = match &cfg.privacy {
            Some(p) => Some(PrivacyLedger::new(p.delta.unwrap_or(1.0 / train.len() as f64))?),
            None => None,
        };
        let params = ParamVector::init(exp.layout, seed);
        let (val_loss, val_accuracy) = evaluate(&params, &validation)?;
        Ok(Self {
            payload_bits: payload_bits(exp.layout.param_count(), &exp.network),
            exp: exp.clone(),
            seed,
            shards,
            validation,
            server: ServerState::new(params),
            ledger,
            val_loss,
            val_accuracy,
        })
    }

    pub fn global_params(&self) -> &ParamVector {
        &self.server.global_params
    }

    pub fn shard(&self, client: usize) -> &Batch {
        &self.shards[client]
    }

    pub fn validation(&self) -> &Batch {
        &self.validation
    }

    pub fn epsilon(&self) -> f64 {
        self.ledger.as_ref().map_or(f64::INFINITY, |l| l.epsilon())
    }

    fn train_client(&self, client: usize, round: u64) -> ClientResult {
        let exp = &self.exp;
        let global = &self.server.global_params;
        let shard = &self.shards[client];
        let device = &exp.devices[client];
        let mut opt = OptimizerState::new(exp.optimizer, global.len());
        let proximal = (exp.strategy.kind == StrategyKind::FedProx).then_some(Proximal {
            anchor: global,
            mu: exp.strategy.mu_proximal,
        });
        let local_loss = evaluate(global, shard).map(|(l, _)| l);
        let outcome = local_train_epoch(
            global,
            shard,
            exp.config.client.batch_size,
            &mut opt,
            derive_seed(self.seed, Stream::Shuffle, round, client as u64),
            proximal,
        );
        let (update, timings) = match (outcome, local_loss) {
            (Ok(o), Ok(loss)) if o.params.is_finite() => (
                Some(ClientUpdate {
                    client_id: client,
                    new_params: o.params,
                    num_samples: o.samples_processed,
                    local_loss: loss,
                }),
                o.timings,
            ),
            (Ok(o), _) => (None, o.timings),
            _ => (None, PhaseTimings::default()),
        };
        let compute_s = match exp.config.timing {
            TimingMode::Simulated => device.compute_time(shard.len(), exp.layout.param_count()),
            TimingMode::Host => timings.total(),
        };
        ClientResult {
            client_id: client,
            update,
            compute_s,
            joules: device.avg_power_watts * compute_s,
            samples: shard.len(),
            timings,
        }
    }

    fn train_selected(&self, selected: &[usize], round: u64) -> Vec<ClientResult> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            selected.par_iter().map(|&c| self.train_client(c, round)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            selected.iter().map(|&c| self.train_client(c, round)).collect()
        }
    }

    /// Aggregates surviving updates into the next server state, applying
    /// clipping and noise when privacy is configured.
    fn aggregate_round(&self, updates: &[ClientUpdate], round: u64) -> Result<(ServerState, f64)> {
        let exp = &self.exp;
        let global = &self.server.global_params;
        let Some(privacy) = &exp.config.privacy else {
            return Ok((aggregate(&self.server, updates, &exp.strategy, exp.optimizer.learning_rate)?, 0.0));
        };
        let (z, c) = (privacy.noise_multiplier, privacy.clip_norm);
        let mut noise_rng = substream(self.seed, Stream::Noise, round, 0);
        let mut clipped = Vec::with_capacity(updates.len());
        for u in updates {
            clipped.push(clip_update(&u.new_params.sub(global)?, c));
        }
        if exp.strategy.kind == StrategyKind::FedAvg {
            let (mean_delta, spec) = noised_average(&clipped, z, c, &mut noise_rng)?;
            let mut next = self.server.clone();
            next.global_params = global.add(&mean_delta)?;
            next.round_index += 1;
            return Ok((next, spec.sigma));
        }
        let clipped_updates: Vec<ClientUpdate> = updates
            .iter()
            .zip(&clipped)
            .map(|(u, d)| {
                Ok(ClientUpdate {
                    new_params: global.add(d)?,
                    ..u.clone()
                })
            })
            .collect::<Result<_>>()?;
        let mut next = aggregate(&self.server, &clipped_updates, &exp.strategy, exp.optimizer.learning_rate)?;
        let spec = NoiseSpec::for_round(z, c, updates.len());
        add_gaussian_noise(&mut next.global_params, spec.sigma, &mut noise_rng);
        Ok((next, spec.sigma))
    }

    /// Executes round `round` (1-based) and advances the state unless the
    /// round fails.
    pub fn run_round(&mut self, round: u64) -> RoundReport {
        let exp = &self.exp;
        let cfg = &exp.config;
        let selected = select_clients(cfg.n_clients, cfg.participation_rate, round, self.seed);
        let results = self.train_selected(&selected, round);

        let diverged: Vec<usize> = results.iter().filter(|r| r.update.is_none()).map(|r| r.client_id).collect();
        let survivors: Vec<usize> = sample_survivors(&selected, &cfg.dropout_for(self.seed), round)
            .into_iter()
            .filter(|c| !diverged.contains(c))
            .collect();
        let updates: Vec<ClientUpdate> = results
            .iter()
            .filter(|r| survivors.contains(&r.client_id))
            .filter_map(|r| r.update.clone())
            .collect();

        let t_computation_s = results
            .iter()
            .filter(|r| survivors.contains(&r.client_id))
            .map(|r| r.compute_s)
            .fold(0.0, f64::max);
        let t_communication_s = round_comm_time_for(self.payload_bits, &exp.network, cfg.network.mode, selected.len());
        let comp_joules: f64 = results.iter().map(|r| r.joules).sum();
        let transfers = (selected.len() + survivors.len()) as u64;
        let comm_joules = transmission_energy(self.payload_bits * transfers, &exp.cost_model);
        let samples: usize = results.iter().map(|r| r.samples).sum();
        let energy = EnergyReport {
            eta_e: if comp_joules > 0.0 { samples as f64 / comp_joules } else { 0.0 },
            computation_kwh: joules_to_kwh(comp_joules),
            communication_kwh: joules_to_kwh(comm_joules),
        };

        let mut noise_sigma = 0.0;
        let failure = if updates.is_empty() {
            Some(Error::NoUpdates.to_string())
        } else {
            match self.aggregate_round(&updates, round) {
                Ok((next, _)) if !next.global_params.is_finite() => Some("aggregate is not finite".to_string()),
                Ok((next, sigma)) => match evaluate(&next.global_params, &self.validation) {
                    Ok((loss, acc)) if loss.is_finite() => {
                        self.server = next;
                        (self.val_loss, self.val_accuracy) = (loss, acc);
                        noise_sigma = sigma;
                        if let (Some(ledger), Some(p)) = (self.ledger.as_mut(), &cfg.privacy) {
                            let q = p
                                .sampling_rate
                                .unwrap_or(selected.len() as f64 / cfg.n_clients as f64);
                            ledger.record_round(round, p.noise_multiplier, q, updates.len());
                        }
                        None
                    }
                    Ok(_) => Some("validation loss is not finite".to_string()),
                    Err(e) => Some(e.to_string()),
                },
                Err(e) => Some(e.to_string()),
            }
        };

        RoundReport {
            round_index: round,
            client_timings: results
                .iter()
                .map(|r| ClientTiming {
                    client_id: r.client_id,
                    timings: r.timings,
                })
                .collect(),
            selected,
            survivors,
            diverged,
            failure,
            val_accuracy: self.val_accuracy,
            val_loss: self.val_loss,
            t_computation_s,
            t_communication_s,
            granularity: t_computation_s / t_communication_s,
            epsilon: self.epsilon(),
            delta: self.ledger.as_ref().map(|l| l.delta),
            noise_sigma,
            energy,
        }
    }
}

impl ExperimentConfig {
    /// Dropout model with its seed defaulted to the run seed.
    pub fn dropout_for(&self, run_seed: u64) -> crate::behavior::DropoutModel {
        crate::behavior::DropoutModel {
            p: self.dropout.p,
            seed: Some(self.dropout.seed.unwrap_or(run_seed)),
        }
    }
}

/// Runs all configured rounds for one seed.
pub fn run_single(exp: &ResolvedExperiment, seed: u64) -> Result<RunReport> {
    let cfg = &exp.config;
    let mut sim = Simulation::new(exp, seed)?;
    let mut rounds = Vec::with_capacity(cfg.rounds as usize);
    let mut consecutive = 0;
    let mut aborted = false;
    for round in 1..=cfg.rounds {
        let report = sim.run_round(round);
        consecutive = if report.failed() { consecutive + 1 } else { 0 };
        rounds.push(report);
        if consecutive >= cfg.abort_after_failures {
            aborted = true;
            break;
        }
    }
    let mut computation_kwh = 0.0;
    let mut communication_kwh = 0.0;
    let mut total_kwh = 0.0;
    for r in &rounds {
        computation_kwh += r.energy.computation_kwh;
        communication_kwh += r.energy.communication_kwh;
        total_kwh += r.energy.computation_kwh + r.energy.communication_kwh;
    }
    Ok(RunReport {
        seed,
        final_accuracy: sim.val_accuracy,
        final_loss: sim.val_loss,
        final_epsilon: sim.epsilon(),
        epsilon_trajectory: rounds.iter().map(|r| r.epsilon).collect(),
        failed_rounds: rounds.iter().filter(|r| r.failed()).count() as u64,
        aborted,
        computation_kwh,
        communication_kwh,
        total_kwh,
        rounds,
    })
}

/// Validates the configuration, then runs `repeats` independent seeds.
pub fn run_experiment(config: &ExperimentConfig, repeats: usize) -> Result<ExperimentSummary> {
    if repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    let exp = config.resolve()?;
    let runs = (0..repeats)
        .map(|r| run_single(&exp, repeat_seed(config.seed, r)))
        .collect::<Result<Vec<_>>>()?;
    let acc: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
    let loss: Vec<f64> = runs.iter().map(|r| r.final_loss).collect();
    let mut computation_kwh = 0.0;
    let mut communication_kwh = 0.0;
    let mut total_kwh = 0.0;
    for r in &runs {
        computation_kwh += r.computation_kwh;
        communication_kwh += r.communication_kwh;
        total_kwh += r.total_kwh;
    }
    Ok(ExperimentSummary {
        repeats,
        final_accuracy: MeanStd::of(&acc),
        final_loss: MeanStd::of(&loss),
        aborted: runs.iter().any(|r| r.aborted),
        computation_kwh,
        communication_kwh,
        total_kwh,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(extra: &str) -> ExperimentConfig {
        let doc = format!(
            "seed = 3\nn_clients = 10\nrounds = 5\n{extra}\n[dataset]\nn_samples = 400\nn_features = 4\nn_classes = 3\nclass_separation = 4.0\n"
        );
        ExperimentConfig::from_toml_str(&doc).unwrap()
    }

    #[test]
    fn selection_size_and_determinism() {
        assert_eq!(select_clients(45, 0.2, 1, 0).len(), 9);
        assert_eq!(select_clients(45, 1.0, 1, 0), (0..45).collect::<Vec<_>>());
        assert_eq!(select_clients(45, 0.2, 7, 11), select_clients(45, 0.2, 7, 11));
        assert_ne!(select_clients(45, 0.2, 7, 11), select_clients(45, 0.2, 8, 11));
        assert_eq!(select_clients(3, 0.01, 1, 0).len(), 1);
    }

    #[test]
    fn epsilon_serializes_infinity_as_string() {
        #[derive(Serialize, Deserialize)]
        struct W(#[serde(with = "epsilon_serde")] f64);
        assert_eq!(serde_json::to_string(&W(f64::INFINITY)).unwrap(), "\"inf\"");
        assert_eq!(serde_json::from_str::<W>("\"inf\"").unwrap().0, f64::INFINITY);
        assert_eq!(serde_json::from_str::<W>("1.5").unwrap().0, 1.5);
        assert!(serde_json::from_str::<W>("\"nan\"").is_err());
    }

    #[test]
    fn survivors_are_selected_and_timing_is_max() {
        let exp = small("[dropout]\np = 0.4").resolve().unwrap();
        let mut sim = Simulation::new(&exp, 3).unwrap();
        for round in 1..=5 {
            let r = sim.run_round(round);
            assert!(r.survivors.iter().all(|s| r.selected.contains(s)));
            let expected = r
                .survivors
                .iter()
                .map(|&c| exp.devices[c].compute_time(sim.shard(c).len(), exp.layout.param_count()))
                .fold(0.0, f64::max);
            assert_eq!(r.t_computation_s, expected);
        }
    }

    #[test]
    fn total_dropout_fails_every_round_and_aborts() {
        let cfg = small("abort_after_failures = 3\n[dropout]\np = 1.0\n[privacy]\nnoise_multiplier = 1.0");
        let exp = cfg.resolve().unwrap();
        let init = ParamVector::init(exp.layout, 3);
        let run = run_single(&exp, 3).unwrap();
        assert!(run.aborted);
        assert_eq!(run.rounds.len(), 3);
        assert!(run.rounds.iter().all(|r| r.failed() && r.epsilon == 0.0));
        let sim = Simulation::new(&exp, 3).unwrap();
        assert_eq!(sim.global_params(), &init);
    }

    #[test]
    fn repeats_change_seed_and_single_repeat_has_zero_std() {
        let s = run_experiment(&small(""), 1).unwrap();
        assert_eq!(s.final_accuracy.std, 0.0);
        assert_eq!(repeat_seed(9, 0), 9);
        assert_ne!(repeat_seed(9, 1), 9);
    }

    #[test]
    fn no_privacy_reports_infinite_epsilon() {
        let run = run_single(&small("").resolve().unwrap(), 3).unwrap();
        assert!(run.final_epsilon.is_infinite());
        assert!(run.rounds.iter().all(|r| r.delta.is_none()));
    }

    #[test]
    fn every_strategy_runs() {
        for kind in ["fedavg", "fedprox", "qfedavg", "fedadam", "fedyogi", "fedadagrad"] {
            for privacy in ["", "[privacy]\nnoise_multiplier = 0.5"] {
                let cfg = small(&format!("[strategy]\nkind = \"{kind}\"\n{privacy}"));
                let run = run_single(&cfg.resolve().unwrap(), 3).unwrap();
                assert_eq!(run.rounds.len(), 5, "{kind}");
                assert!(run.final_accuracy.is_finite());
            }
        }
    }
}

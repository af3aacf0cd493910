use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DeviceProfile;
use crate::error::{Error, Result};
use crate::model::train::{gather, Stopwatch};
use crate::model::{backward, cross_entropy, forward_cached, Batch, Layout, Matrix, OptimizerConfig, OptimizerState, ParamVector, PhaseTimings};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub layout: Layout,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStat {
    pub phase: String,
    pub median_s: f64,
    /// Interquartile range.
    pub iqr_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchReport {
    pub params: usize,
    pub batch_size: usize,
    pub repetitions: usize,
    pub phases: Vec<PhaseStat>,
    pub total: PhaseStat,
    pub mean_phase_sum_s: f64,
    pub mean_total_s: f64,
}

impl MicrobenchReport {
    /// Relative gap between the summed phases and the measured step time.
    pub fn accounting_gap(&self) -> f64 {
        (self.mean_phase_sum_s - self.mean_total_s).abs() / self.mean_total_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum MicrobenchOutcome {
    Measured(MicrobenchReport),
    /// The workload does not fit the simulated device.
    Oom { device: String, params: usize, limit: u64 },
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn stat(phase: &str, samples: &[f64]) -> PhaseStat {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    PhaseStat {
        phase: phase.to_string(),
        median_s: quantile(&sorted, 0.5),
        iqr_s: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
    }
}

/// Times `repetitions` SGD steps of the workload on this host, split into
/// batch loading, forward, loss, backward and optimizer phases.
pub fn microbench(workload: &Workload, repetitions: usize, seed: u64) -> Result<MicrobenchReport> {
    if repetitions < 3 {
        return Err(Error::config("micro-benchmark needs at least 3 repetitions"));
    }
    if workload.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let layout = workload.layout;
    let mut rng = substream(seed, Stream::Bench, 0, 0);
    let pool_size = workload.batch_size * 4;
    let feats = (0..pool_size * layout.inputs).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..pool_size).map(|_| rng.random_range(0..layout.classes)).collect();
    let pool = Batch::new(Matrix::from_vec(pool_size, layout.inputs, feats)?, labels)?;

    let mut params = ParamVector::init(layout, seed);
    let mut opt = OptimizerState::new(OptimizerConfig::sgd(1e-3), params.len());
    let mut per_phase: [Vec<f64>; 5] = Default::default();
    let mut totals = Vec::with_capacity(repetitions);
    let mut phase_sum = 0.0;

    // One untimed warm-up step.
    for rep in 0..=repetitions {
        let start = rng.random_range(0..=pool_size - workload.batch_size);
        let indices: Vec<usize> = (start..start + workload.batch_size).collect();

        let mut outer = Stopwatch::start();
        let mut clock = Stopwatch::start();
        let batch = gather(&pool, &indices);
        let batch_load = clock.lap();
        let cache = forward_cached(&params, &batch)?;
        let forward = clock.lap();
        let loss = cross_entropy(&cache, &batch.labels);
        let loss_t = clock.lap();
        let grad = backward(&params, &batch, &cache);
        let backward_t = clock.lap();
        opt.step(&mut params, &grad)?;
        let optimizer = clock.lap();
        let total = outer.lap();
        std::hint::black_box(loss);

        if rep == 0 {
            continue;
        }
        let t = PhaseTimings {
            batch_load,
            forward,
            loss: loss_t,
            backward: backward_t,
            optimizer,
        };
        for (acc, v) in per_phase.iter_mut().zip(t.as_array()) {
            acc.push(v);
        }
        phase_sum += t.total();
        totals.push(total);
    }

    let n = repetitions as f64;
    Ok(MicrobenchReport {
        params: layout.param_count(),
        batch_size: workload.batch_size,
        repetitions,
        phases: PhaseTimings::PHASES
            .iter()
            .zip(&per_phase)
            .map(|(name, xs)| stat(name, xs))
            .collect(),
        total: stat("total", &totals),
        mean_phase_sum_s: phase_sum / n,
        mean_total_s: totals.iter().sum::<f64>() / n,
    })
}

/// Like [`microbench`], but first checks the workload against a simulated
/// device's memory limit.
pub fn microbench_on(
    workload: &Workload,
    repetitions: usize,
    seed: u64,
    device: Option<&DeviceProfile>,
) -> Result<MicrobenchOutcome> {
    let params = workload.layout.param_count();
    if let Some(d) = device {
        if !d.fits(params) {
            return Ok(MicrobenchOutcome::Oom {
                device: d.name.clone(),
                params,
                limit: d.memory_limit_params,
            });
        }
    }
    microbench(workload, repetitions, seed).map(MicrobenchOutcome::Measured)
}

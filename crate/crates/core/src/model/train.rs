use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, cross_entropy, forward_cached, Batch, Matrix, OptimizerState, ParamVector};
use crate::error::{Error, Result};
use crate::strategy::fedprox_proximal_grad;

/// Wall-clock seconds spent in each phase of a training step, summed over
/// the steps of an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub batch_load: f64,
    pub forward: f64,
    pub loss: f64,
    pub backward: f64,
    pub optimizer: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.batch_load + self.forward + self.loss + self.backward + self.optimizer
    }

    pub fn accumulate(&mut self, other: &PhaseTimings) {
        self.batch_load += other.batch_load;
        self.forward += other.forward;
        self.loss += other.loss;
        self.backward += other.backward;
        self.optimizer += other.optimizer;
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.batch_load,
            self.forward,
            self.loss,
            self.backward,
            self.optimizer,
        ]
    }

    pub const PHASES: [&'static str; 5] = ["batch_load", "forward", "loss", "backward", "optimizer"];
}

/// FedProx anchor: adds `mu (w - anchor)` to every local gradient.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a ParamVector,
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub params: ParamVector,
    pub samples_processed: usize,
    pub timings: PhaseTimings,
}

#[cfg(not(target_arch = "wasm32"))]
mod clock {
    pub struct Stopwatch(std::time::Instant);

    impl Stopwatch {
        pub fn start() -> Self {
            Self(std::time::Instant::now())
        }

        /// Seconds since the last lap (or start), restarting the lap.
        pub fn lap(&mut self) -> f64 {
            let now = std::time::Instant::now();
            let dt = now.duration_since(self.0).as_secs_f64();
            self.0 = now;
            dt
        }
    }
}

// No monotonic clock on wasm32-unknown-unknown; phase timings read as zero.
#[cfg(target_arch = "wasm32")]
mod clock {
    pub struct Stopwatch;

    impl Stopwatch {
        pub fn start() -> Self {
            Self
        }

        pub fn lap(&mut self) -> f64 {
            0.0
        }
    }
}

pub(crate) use clock::Stopwatch;

/// Gathers the rows at `indices` into a fresh batch.
pub(crate) fn gather(shard: &Batch, indices: &[usize]) -> Batch {
    let d = shard.features.cols;
    let mut data = Vec::with_capacity(indices.len() * d);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(shard.features.row(i));
        labels.push(shard.labels[i]);
    }
    Batch {
        features: Matrix {
            rows: indices.len(),
            cols: d,
            data,
        },
        labels,
    }
}

/// Trains for exactly one pass over `shard`.
///
/// Samples are visited in a permutation drawn from `shuffle_seed` at the start
/// of the epoch and grouped into mini-batches of `batch_size` (the last batch
/// may be short).
pub fn local_train_epoch(
    params: &ParamVector,
    shard: &Batch,
    batch_size: usize,
    opt: &mut OptimizerState,
    shuffle_seed: u64,
    proximal: Option<Proximal<'_>>,
) -> Result<EpochOutcome> {
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if let Some(p) = proximal {
        params.check_same_shape(p.anchor)?;
    }

    let mut order: Vec<usize> = (0..shard.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

    let mut params = params.clone();
    let mut timings = PhaseTimings::default();
    for chunk in order.chunks(batch_size) {
        let mut clock = Stopwatch::start();
        let batch = gather(shard, chunk);
        timings.batch_load += clock.lap();

        let cache = forward_cached(&params, &batch)?;
        timings.forward += clock.lap();

        let loss = cross_entropy(&cache, &batch.labels);
        timings.loss += clock.lap();
        if !loss.is_finite() {
            return Err(Error::Divergence("loss"));
        }

        let mut grad = backward(&params, &batch, &cache);
        if let Some(p) = proximal {
            let prox = fedprox_proximal_grad(&params, p.anchor, p.mu)?;
            for (g, q) in grad.values.iter_mut().zip(&prox.values) {
                *g += q;
            }
        }
        timings.backward += clock.lap();

        opt.step(&mut params, &grad)?;
        timings.optimizer += clock.lap();
    }

    Ok(EpochOutcome {
        params,
        samples_processed: shard.len(),
        timings,
    })
}

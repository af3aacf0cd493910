//! Client reliability models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Decides whether a selected client delivers its update in a given round.
pub trait ClientBehavior {
    fn survives(&self, client_id: usize, round: u64) -> bool;
}

/// Independent per-client, per-round failures with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutModel {
    /// Failure probability.
    pub p: f64,
    /// Falls back to the experiment seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DropoutModel {
    fn default() -> Self {
        Self { p: 0.0, seed: None }
    }
}

impl DropoutModel {
    pub fn new(p: f64, seed: u64) -> Self {
        Self { p, seed: Some(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("dropout.p must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The uniform draw for `(client, round)`; the client survives when it
    /// is below `1 - p`. Exposed so runs at different `p` can share draws.
    pub fn draw(&self, client_id: usize, round: u64) -> f64 {
        let seed = self.seed.unwrap_or(0);
        substream(seed, Stream::Dropout, round, client_id as u64).random::<f64>()
    }
}

impl ClientBehavior for DropoutModel {
    fn survives(&self, client_id: usize, round: u64) -> bool {
        self.draw(client_id, round) < 1.0 - self.p
    }
}

/// Selected clients whose updates reach the server, in selection order.
pub fn sample_survivors(selected: &[usize], behavior: &dyn ClientBehavior, round: u64) -> Vec<usize> {
    selected
        .iter()
        .copied()
        .filter(|&c| behavior.survives(c, round))
        .collect()
}

//! Synthetic Gaussian-cluster datasets and Dirichlet label-skew partitioning.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Matrix};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub class_separation: f64,
    #[serde(default)]
    pub label_noise: f64,
    /// Falls back to a value derived from the experiment seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 2250,
            n_features: 10,
            n_classes: 4,
            class_separation: 3.0,
            label_noise: 0.0,
            seed: None,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_classes == 0 {
            return Err(Error::config("dataset needs at least one feature and one class"));
        }
        if self.n_samples < self.n_classes {
            return Err(Error::config("dataset.n_samples must be at least n_classes"));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config("dataset.class_separation must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::config("dataset.label_noise must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the rows at `indices` into a batch.
    pub fn subset(&self, indices: &[usize]) -> Batch {
        let d = self.features.cols;
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
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

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Deterministic held-out split; returns `(train, validation)` index lists.
    pub fn split_indices(&self, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut substream(seed, Stream::Split, 0, 0));
        let n_val = ((self.len() as f64) * validation_fraction).round() as usize;
        let n_val = n_val.min(self.len().saturating_sub(1));
        let val = order.split_off(self.len() - n_val);
        (order, val)
    }
}

/// Class centres: the first `d` classes sit on the positive coordinate axes,
/// the next `d` on the negative axes, any further ones on random directions.
/// All centres have norm `separation / sqrt(2)`, so axis-aligned pairs are
/// exactly `separation` apart.
fn class_means(spec: &SyntheticDatasetSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let d = spec.n_features;
    let radius = spec.class_separation / std::f64::consts::SQRT_2;
    (0..spec.n_classes)
        .map(|c| {
            let mut mean = vec![0.0; d];
            if c < 2 * d {
                mean[c % d] = if c < d { radius } else { -radius };
            } else {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for (m, v) in mean.iter_mut().zip(dir) {
                    *m = radius * v / norm;
                }
            }
            mean
        })
        .collect()
}

/// Draws `n_samples` points from `n_classes` unit-variance Gaussian clusters.
///
/// Classes are balanced (`i mod k`) before shuffling, and each label is then
/// replaced by a uniformly chosen different class with probability
/// `label_noise`.
pub fn generate(spec: &SyntheticDatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let seed = spec.seed.unwrap_or(seed);
    let mut rng = substream(seed, Stream::Dataset, 0, 0);
    let (n, d, k) = (spec.n_samples, spec.n_features, spec.n_classes);

    let means = class_means(spec, &mut rng);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for mu in &means[y] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu + z);
        }
    }

    if spec.label_noise > 0.0 && k > 1 {
        for y in labels.iter_mut() {
            if rng.random::<f64>() < spec.label_noise {
                let shift = rng.random_range(1..k);
                *y = (*y + shift) % k;
            }
        }
    }

    Ok(Dataset {
        features: Matrix::from_vec(n, d, data)?,
        labels,
        classes: k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub n_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("partition needs at least one client"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("partition.alpha must be positive and finite"));
        }
        Ok(())
    }
}

fn dirichlet(alpha: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|v| *v /= sum);
    } else {
        // Every gamma draw underflowed (tiny alpha): all mass on one client.
        draws.iter_mut().for_each(|v| *v = 0.0);
        draws[rng.random_range(0..n)] = 1.0;
    }
    draws
}

/// Label-skew partition: for each class, client shares are drawn from
/// `Dirichlet(alpha, ..., alpha)` and that class's (shuffled) samples are cut
/// at the cumulative shares.
///
/// Clients left without samples receive one sample from the currently largest
/// client, so every client can train.
pub fn dirichlet_partition(labels: &[usize], cfg: &PartitionConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::config("cannot partition an empty label set"));
    }
    if cfg.n_clients > labels.len() {
        return Err(Error::TooManyClients {
            clients: cfg.n_clients,
            samples: labels.len(),
        });
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = substream(cfg.seed, Stream::Partition, 0, 0);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clients];

    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let shares = dirichlet(cfg.alpha, cfg.n_clients, &mut rng);
        let total = members.len();
        let mut start = 0;
        let mut cumulative = 0.0;
        for (client, share) in shares.iter().enumerate() {
            cumulative += share;
            let end = if client + 1 == cfg.n_clients {
                total
            } else {
                ((cumulative * total as f64) as usize).clamp(start, total)
            };
            clients[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }

    while let Some(empty) = clients.iter().position(|c| c.is_empty()) {
        let largest = (0..clients.len())
            .max_by_key(|&c| (clients[c].len(), std::cmp::Reverse(c)))
            .expect("at least one client");
        let moved = clients[largest].pop().expect("largest client is non-empty");
        clients[empty].push(moved);
    }
    for c in clients.iter_mut() {
        c.sort_unstable();
    }
    Ok(clients)
}

/// Per-client class histograms.
pub fn class_histograms(labels: &[usize], partition: &[Vec<usize>], n_classes: usize) -> Vec<Vec<usize>> {
    partition
        .iter()
        .map(|idx| {
            let mut h = vec![0; n_classes];
            for &i in idx {
                h[labels[i]] += 1;
            }
            h
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PartitionManifest {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub partition: PartitionConfig,
    pub clients: Vec<Vec<usize>>,
}

/// Writes `features.csv`, `labels.csv` and `partition.json` into `dir`.
pub fn export_fixture(
    dir: &Path,
    dataset: &Dataset,
    cfg: &PartitionConfig,
    clients: &[Vec<usize>],
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let d = dataset.features.cols;

    let mut w = csv::Writer::from_path(dir.join("features.csv"))?;
    w.write_record((0..d).map(|j| format!("f{j}")))?;
    for i in 0..dataset.len() {
        w.write_record(dataset.features.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record(["label"])?;
    for y in &dataset.labels {
        w.write_record([y.to_string()])?;
    }
    w.flush()?;

    let manifest = PartitionManifest {
        n_samples: dataset.len(),
        n_features: d,
        n_classes: dataset.classes,
        partition: *cfg,
        clients: clients.to_vec(),
    };
    let file = BufWriter::new(File::create(dir.join("partition.json"))?);
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticDatasetSpec::default();
        let a = generate(&spec, 11).unwrap();
        let b = generate(&spec, 11).unwrap();
        let bytes = |d: &Dataset| d.features.data.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.labels, b.labels);
        assert_ne!(bytes(&a), bytes(&generate(&spec, 12).unwrap()));
    }

    #[test]
    fn one_sample_per_class_is_a_permutation() {
        let spec = SyntheticDatasetSpec {
            n_samples: 7,
            n_classes: 7,
            ..Default::default()
        };
        let mut labels = generate(&spec, 3).unwrap().labels;
        labels.sort_unstable();
        assert_eq!(labels, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn spec_validation() {
        let bad = SyntheticDatasetSpec {
            n_samples: 3,
            n_classes: 4,
            ..Default::default()
        };
        assert!(generate(&bad, 0).is_err());
        let bad = SyntheticDatasetSpec {
            label_noise: 1.5,
            ..Default::default()
        };
        assert!(generate(&bad, 0).is_err());
    }

    #[test]
    fn label_noise_flips_roughly_the_requested_fraction() {
        let clean = SyntheticDatasetSpec {
            n_samples: 20_000,
            ..Default::default()
        };
        let noisy = SyntheticDatasetSpec {
            label_noise: 0.3,
            ..clean
        };
        let a = generate(&clean, 5).unwrap();
        let b = generate(&noisy, 5).unwrap();
        // Same stream up to the noise pass, so features and clean labels agree.
        assert_eq!(a.features, b.features);
        let flipped = a.labels.iter().zip(&b.labels).filter(|(x, y)| x != y).count();
        let frac = flipped as f64 / 20_000.0;
        assert!((frac - 0.3).abs() < 0.02, "{frac}");
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let cfg = PartitionConfig {
            n_clients: 1,
            alpha: 1.0,
            seed: 4,
        };
        let parts = dirichlet_partition(&labels, &cfg).unwrap();
        assert_eq!(parts, vec![(0..50).collect::<Vec<_>>()]);
    }

    #[test]
    fn more_clients_than_samples_is_an_error() {
        let cfg = PartitionConfig {
            n_clients: 6,
            alpha: 1.0,
            seed: 0,
        };
        assert!(matches!(
            dirichlet_partition(&[0, 1, 0, 1, 0], &cfg),
            Err(Error::TooManyClients { .. })
        ));
    }

    #[test]
    fn huge_alpha_tracks_global_histogram() {
        let labels: Vec<usize> = (0..20_000).map(|i| i % 4).collect();
        let cfg = PartitionConfig {
            n_clients: 5,
            alpha: 1e6,
            seed: 2,
        };
        let parts = dirichlet_partition(&labels, &cfg).unwrap();
        for h in class_histograms(&labels, &parts, 4) {
            let total: usize = h.iter().sum();
            for count in h {
                let share = count as f64 / total as f64;
                assert!((share - 0.25).abs() / 0.25 < 0.05, "{share}");
            }
        }
    }

    #[test]
    fn empty_clients_are_repaired() {
        // Tiny alpha concentrates each class on one client, leaving most empty.
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let cfg = PartitionConfig {
            n_clients: 10,
            alpha: 0.01,
            seed: 8,
        };
        let parts = dirichlet_partition(&labels, &cfg).unwrap();
        assert!(parts.iter().all(|p| !p.is_empty()));
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 30);
    }

    #[test]
    fn export_writes_three_parseable_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticDatasetSpec {
            n_samples: 30,
            n_features: 3,
            n_classes: 3,
            ..Default::default()
        };
        let ds = generate(&spec, 1).unwrap();
        let cfg = PartitionConfig {
            n_clients: 4,
            alpha: 1.0,
            seed: 1,
        };
        let parts = dirichlet_partition(&ds.labels, &cfg).unwrap();
        export_fixture(dir.path(), &ds, &cfg, &parts).unwrap();

        let mut rdr = csv::Reader::from_path(dir.path().join("features.csv")).unwrap();
        let rows: Vec<Vec<f64>> = rdr
            .records()
            .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 30);
        assert_eq!(rows[4], ds.features.row(4));
        let manifest: PartitionManifest =
            serde_json::from_reader(File::open(dir.path().join("partition.json")).unwrap()).unwrap();
        assert_eq!(manifest.clients, parts);
    }

    proptest! {
        #[test]
        fn partition_is_exact_and_deterministic(
            n in 1usize..300, k in 1usize..6, clients in 1usize..20,
            alpha in 0.05f64..50.0, seed in 0u64..1_000
        ) {
            prop_assume!(clients <= n);
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % k).collect();
            let cfg = PartitionConfig { n_clients: clients, alpha, seed };
            let parts = dirichlet_partition(&labels, &cfg).unwrap();
            prop_assert_eq!(&parts, &dirichlet_partition(&labels, &cfg).unwrap());
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(parts.iter().all(|p| !p.is_empty()));
        }
    }
}

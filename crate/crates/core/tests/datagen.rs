use fledgesim_core::data::{class_histograms, dirichlet_partition, generate, PartitionConfig, SyntheticDatasetSpec};

fn spec(n: usize, d: usize, k: usize, sep: f64) -> SyntheticDatasetSpec {
    SyntheticDatasetSpec {
        n_samples: n,
        n_features: d,
        n_classes: k,
        class_separation: sep,
        label_noise: 0.0,
        seed: None,
    }
}

/// Binary logistic regression by full-batch gradient descent, written with
/// plain loops and no shared code with the simulator's model.
fn fit_binary_logistic(x: &[Vec<f64>], y: &[usize], iters: usize, lr: f64) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let n = x.len() as f64;
    for _ in 0..iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - yi as f64;
            for j in 0..d {
                gw[j] += err * xi[j] / n;
            }
            gb += err / n;
        }
        for j in 0..d {
            w[j] -= lr * gw[j];
        }
        b -= lr * gb;
    }
    (w, b)
}

#[test]
fn well_separated_clusters_are_learnable_by_logistic_regression() {
    let data = generate(&spec(1000, 2, 2, 10.0), 42).unwrap();
    let x: Vec<Vec<f64>> = (0..data.len()).map(|i| data.features.row(i).to_vec()).collect();
    let (w, b) = fit_binary_logistic(&x, &data.labels, 500, 0.5);
    let correct = x
        .iter()
        .zip(&data.labels)
        .filter(|(xi, &yi)| {
            let z: f64 = xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            usize::from(z > 0.0) == yi
        })
        .count();
    let acc = correct as f64 / data.len() as f64;
    assert!(acc >= 0.99, "training accuracy {acc}");
}

#[test]
fn generation_is_byte_identical_for_equal_seeds() {
    let s = spec(300, 5, 3, 2.0);
    let a = generate(&s, 9).unwrap();
    let b = generate(&s, 9).unwrap();
    let bits = |d: &fledgesim_core::data::Dataset| d.features.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.labels, b.labels);
    assert_ne!(bits(&a), bits(&generate(&s, 10).unwrap()));
}

#[test]
fn one_sample_per_class_gives_a_label_permutation() {
    for seed in 0..20 {
        let d = generate(&spec(7, 3, 7, 1.0), seed).unwrap();
        let mut labels = d.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, (0..7).collect::<Vec<_>>());
    }
}

#[test]
fn client_sizes_are_dispersed_at_alpha_one() {
    let data = generate(&SyntheticDatasetSpec::default(), 0).unwrap();
    let mut cvs = Vec::new();
    for seed in 0..100 {
        let parts = dirichlet_partition(
            &data.labels,
            &PartitionConfig {
                n_clients: 45,
                alpha: 1.0,
                seed,
            },
        )
        .unwrap();
        let sizes: Vec<f64> = parts.iter().map(|p| p.len() as f64).collect();
        let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
        let var = sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sizes.len() as f64;
        cvs.push(var.sqrt() / mean);
    }
    let min = cvs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = cvs.iter().sum::<f64>() / cvs.len() as f64;
    assert!(min > 0.1, "min CV {min}, mean CV {mean}");
}

fn mean_kl_from_global(labels: &[usize], k: usize, alpha: f64, seeds: u64) -> f64 {
    let n = labels.len() as f64;
    let mut global = vec![0.0; k];
    for &y in labels {
        global[y] += 1.0 / n;
    }
    let mut total = 0.0;
    for seed in 0..seeds {
        let parts = dirichlet_partition(
            labels,
            &PartitionConfig {
                n_clients: 20,
                alpha,
                seed,
            },
        )
        .unwrap();
        let hists = class_histograms(labels, &parts, k);
        let mut kl = 0.0;
        for h in &hists {
            let m: usize = h.iter().sum();
            for c in 0..k {
                if h[c] > 0 {
                    let p = h[c] as f64 / m as f64;
                    kl += p * (p / global[c]).ln();
                }
            }
        }
        total += kl / hists.len() as f64;
    }
    total / seeds as f64
}

#[test]
fn label_skew_decreases_with_alpha() {
    let data = generate(&spec(2000, 4, 5, 1.0), 1).unwrap();
    let alphas = [0.05, 0.1, 0.5, 1.0, 5.0, 50.0, 1e4];
    let kls: Vec<f64> = alphas.iter().map(|&a| mean_kl_from_global(&data.labels, 5, a, 30)).collect();
    for w in kls.windows(2) {
        assert!(w[1] <= w[0], "KL not monotone: {kls:?}");
    }
    assert!(kls[0] > 10.0 * kls[kls.len() - 1], "{kls:?}");
}

#[test]
fn partition_is_exact_and_deterministic() {
    let data = generate(&SyntheticDatasetSpec::default(), 5).unwrap();
    let cfg = PartitionConfig {
        n_clients: 45,
        alpha: 0.3,
        seed: 77,
    };
    let parts = dirichlet_partition(&data.labels, &cfg).unwrap();
    let mut all: Vec<usize> = parts.concat();
    all.sort_unstable();
    assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
    assert!(parts.iter().all(|p| !p.is_empty()));
    assert_eq!(parts, dirichlet_partition(&data.labels, &cfg).unwrap());
}
